//! Image substrate and preprocessing: resizing, median denoising and
//! Pareto–Gini clip-limited CLAHE.

mod clahe;
mod filter;
mod raster;

use serde::{Deserialize, Serialize};

pub use clahe::{
    clahe_enhance, clahe_tiles, estimate_pareto_exponent, gini_clip, hill_estimate, tile_mapping, ClaheParams,
    ClipPolicy, TileMapping,
};
pub use filter::{median_filter, median_of, resize, EdgePolicy, MedianParams};
pub use raster::{luma, to_u8, Image};

use crate::error::Result;

/// Parameters of the full preprocessing chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub width: usize,
    pub height: usize,
    pub median: MedianParams,
    pub clahe: ClaheParams,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            width: 56,
            height: 56,
            median: MedianParams::default(),
            clahe: ClaheParams {
                tile: 28,
                ..ClaheParams::default()
            },
        }
    }
}

/// resize -> median filter -> enhancement.
pub fn preprocess(img: &Image, cfg: &PreprocessConfig) -> Result<Image> {
    let resized = resize(img, cfg.width, cfg.height)?;
    let denoised = median_filter(&resized, &cfg.median)?;
    clahe_enhance(&denoised, &cfg.clahe)
}

/// Standard deviation of the luma plane.
pub fn rms_contrast(img: &Image) -> f64 {
    let g = img.to_gray();
    let mean = g.mean();
    let var = g.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / g.data().len() as f64;
    var.sqrt()
}
