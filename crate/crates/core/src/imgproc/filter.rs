use serde::{Deserialize, Serialize};

use super::raster::{to_u8, Image};
use crate::error::{Error, Result};

/// Bilinear resampling with pixel-center alignment.
///
/// Source coordinates are clamped to the border, so enlarging a 1x1 image
/// replicates its value and resizing to the same dimensions is exact.
pub fn resize(img: &Image, target_w: usize, target_h: usize) -> Result<Image> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::invalid(format!(
            "resize target must be at least 1x1, got {target_w}x{target_h}"
        )));
    }
    let (sw, sh, ch) = (img.width(), img.height(), img.channels());
    let sx = sw as f64 / target_w as f64;
    let sy = sh as f64 / target_h as f64;
    let mut out = Vec::with_capacity(target_w * target_h * ch);
    for ty in 0..target_h {
        let fy = ((ty as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for tx in 0..target_w {
            let fx = ((tx as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            for c in 0..ch {
                let top = img.get(x0, y0, c) as f64 * (1.0 - wx) + img.get(x1, y0, c) as f64 * wx;
                let bottom = img.get(x0, y1, c) as f64 * (1.0 - wx) + img.get(x1, y1, c) as f64 * wx;
                out.push(to_u8(top * (1.0 - wy) + bottom * wy));
            }
        }
    }
    Image::new(target_w, target_h, ch, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgePolicy {
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedianParams {
    pub window: usize,
    pub edge_policy: EdgePolicy,
}

impl Default for MedianParams {
    fn default() -> Self {
        Self {
            window: 3,
            edge_policy: EdgePolicy::Replicate,
        }
    }
}

impl MedianParams {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            ..Self::default()
        }
    }

    fn validate(&self, img: &Image) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "median window must be odd and at least 3, got {}",
                self.window
            )));
        }
        if self.window > img.width().min(img.height()) {
            return Err(Error::invalid(format!(
                "median window {} larger than image {}x{}",
                self.window,
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }
}

/// Median of a window of samples. Sorts in place.
///
/// Even-length windows average the two middle values and round half up.
pub fn median_of(values: &mut [u8]) -> u8 {
    assert!(!values.is_empty(), "median of an empty window");
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        let sum = values[n / 2 - 1] as u16 + values[n / 2] as u16;
        sum.div_ceil(2) as u8
    }
}

/// Replaces every pixel with the median of its `window x window`
/// neighbourhood, channel by channel, replicating border pixels.
pub fn median_filter(img: &Image, params: &MedianParams) -> Result<Image> {
    params.validate(img)?;
    let r = (params.window / 2) as isize;
    let mut out = img.clone();
    let mut buf = Vec::with_capacity(params.window * params.window);
    for c in 0..img.channels() {
        for y in 0..img.height() as isize {
            for x in 0..img.width() as isize {
                buf.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        buf.push(img.get_clamped(x + dx, y + dy, c));
                    }
                }
                out.set(x as usize, y as usize, c, median_of(&mut buf));
            }
        }
    }
    Ok(out)
}
