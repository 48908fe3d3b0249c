//! Clip-limited adaptive histogram equalization whose per-tile clip limit
//! comes from the Gini index of a Pareto fit to the tile histogram.

use serde::{Deserialize, Serialize};

use super::raster::{to_u8, Image};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum ClipPolicy {
    /// Clip fraction from the tile's Pareto exponent.
    ParetoGini,
    /// Plain CLAHE with a fixed clip fraction, for reference comparisons.
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClaheParams {
    pub tile: usize,
    pub bins: usize,
    pub sigma_floor: f64,
    pub gini_floor: f64,
    pub count_scale: f64,
    pub clip: ClipPolicy,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            tile: 8,
            bins: 256,
            sigma_floor: 1.05,
            gini_floor: 0.01,
            count_scale: 4.0,
            clip: ClipPolicy::ParetoGini,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if self.tile < 2 {
            return Err(Error::invalid(format!("tile must be >= 2, got {}", self.tile)));
        }
        if !(2..=256).contains(&self.bins) {
            return Err(Error::invalid(format!("bins must be in 2..=256, got {}", self.bins)));
        }
        if !(self.sigma_floor > 1.0) {
            return Err(Error::invalid("sigma_floor must exceed 1"));
        }
        if !(self.gini_floor > 0.0 && self.gini_floor <= 1.0) {
            return Err(Error::invalid("gini_floor must lie in (0, 1]"));
        }
        if !(self.count_scale > 0.0) {
            return Err(Error::invalid("count_scale must be positive"));
        }
        if let ClipPolicy::Fixed(f) = self.clip {
            if !(f > 0.0) {
                return Err(Error::invalid("fixed clip fraction must be positive"));
            }
        }
        Ok(())
    }

    #[inline]
    fn bin_of(&self, v: u8) -> usize {
        v as usize * self.bins / 256
    }
}

/// Hill tail-index estimate `n / sum(ln(x_i / x_min))` over the given tail.
///
/// Returns `None` when the log sum vanishes (all tail values equal).
pub fn hill_estimate(tail: &[f64]) -> Option<f64> {
    let x_min = tail.iter().copied().fold(f64::INFINITY, f64::min);
    if tail.is_empty() || !(x_min > 0.0) {
        return None;
    }
    let s: f64 = tail.iter().map(|&x| (x / x_min).ln()).sum();
    (s > 0.0).then(|| tail.len() as f64 / s)
}

/// Pareto exponent of a histogram from the top quartile of its nonzero
/// counts, floored at `sigma_floor`.
pub fn estimate_pareto_exponent(hist: &[u32], sigma_floor: f64) -> Result<f64> {
    let mut nonzero: Vec<f64> = hist.iter().filter(|&&c| c > 0).map(|&c| c as f64).collect();
    if nonzero.is_empty() {
        return Err(Error::DegenerateTile);
    }
    nonzero.sort_unstable_by(|a, b| b.total_cmp(a));
    let n_tail = nonzero.len().div_ceil(4);
    let sigma = hill_estimate(&nonzero[..n_tail]).unwrap_or(sigma_floor);
    Ok(sigma.max(sigma_floor))
}

/// Clip fraction `max(gini_floor, 1 - 2 / (sigma + 1))`.
pub fn gini_clip(sigma: f64, gini_floor: f64) -> f64 {
    (1.0 - 2.0 / (sigma + 1.0)).max(gini_floor)
}

/// Per-tile intermediate results, exposed for inspection and tests.
#[derive(Clone, Debug)]
pub struct TileMapping {
    pub sigma: f64,
    /// Clip threshold in counts.
    pub clip_count: f64,
    /// Cumulative distribution of the clipped histogram, ending at 1.
    pub cdf: Vec<f64>,
    /// Normalized mapping in `[0, 1]` for every bin.
    pub mapping: Vec<f64>,
    /// True when the tile holds a single occupied bin.
    pub degenerate: bool,
}

/// Builds the clipped, redistributed, normalized mapping of one tile.
pub fn tile_mapping(hist: &[u32], params: &ClaheParams) -> TileMapping {
    let bins = hist.len();
    let total: f64 = hist.iter().map(|&c| c as f64).sum();
    let sigma = estimate_pareto_exponent(hist, params.sigma_floor).unwrap_or(params.sigma_floor);
    let fraction = match params.clip {
        ClipPolicy::ParetoGini => gini_clip(sigma, params.gini_floor),
        ClipPolicy::Fixed(f) => f,
    };
    let clip_count = fraction * (total / bins as f64) * params.count_scale;

    let mut clipped: Vec<f64> = hist.iter().map(|&c| c as f64).collect();
    let mut excess = 0.0;
    for h in &mut clipped {
        if *h > clip_count {
            excess += *h - clip_count;
            *h = clip_count;
        }
    }
    let share = excess / bins as f64;
    let mut cdf = Vec::with_capacity(bins);
    let mut acc = 0.0;
    for h in &clipped {
        acc += h + share;
        cdf.push(if total > 0.0 { acc / total } else { 0.0 });
    }

    let lo = hist.iter().position(|&c| c > 0);
    let hi = hist.iter().rposition(|&c| c > 0);
    let (mapping, degenerate) = match (lo, hi) {
        (Some(lo), Some(hi)) if lo < hi => {
            let (base, span) = (cdf[lo], cdf[hi] - cdf[lo]);
            let m = cdf.iter().map(|&c| ((c - base) / span).clamp(0.0, 1.0)).collect();
            (m, false)
        }
        _ => (vec![0.5; bins], true),
    };
    TileMapping {
        sigma,
        clip_count,
        cdf,
        mapping,
        degenerate,
    }
}

/// Half-open pixel ranges of the tiles along one axis.
fn tile_spans(len: usize, tile: usize) -> Vec<(usize, usize)> {
    (0..len.div_ceil(tile))
        .map(|k| (k * tile, ((k + 1) * tile).min(len)))
        .collect()
}

/// Left tile index and fractional distance toward the next tile centre.
fn interp_coord(pos: usize, centers: &[f64]) -> (usize, usize, f64) {
    let p = pos as f64;
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.partition_point(|&c| c <= p) - 1;
    let f = (p - centers[i]) / (centers[i + 1] - centers[i]);
    (i, i + 1, f)
}

/// Computes every tile mapping of a gray image, row-major over tiles.
pub fn clahe_tiles(gray: &Image, params: &ClaheParams) -> Result<(usize, usize, Vec<TileMapping>)> {
    params.validate()?;
    if !gray.is_gray() {
        return Err(Error::invalid("clahe_tiles expects a single-channel image"));
    }
    let single = params.tile > gray.width() || params.tile > gray.height();
    let (xs, ys) = if single {
        (vec![(0, gray.width())], vec![(0, gray.height())])
    } else {
        (
            tile_spans(gray.width(), params.tile),
            tile_spans(gray.height(), params.tile),
        )
    };
    let mut maps = Vec::with_capacity(xs.len() * ys.len());
    for &(y0, y1) in &ys {
        for &(x0, x1) in &xs {
            let mut hist = vec![0u32; params.bins];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[params.bin_of(gray.get(x, y, 0))] += 1;
                }
            }
            maps.push(tile_mapping(&hist, params));
        }
    }
    Ok((xs.len(), ys.len(), maps))
}

fn enhance_plane(gray: &Image, params: &ClaheParams) -> Result<Image> {
    let (nx, ny, maps) = clahe_tiles(gray, params)?;
    let (w, h) = (gray.width(), gray.height());
    let centers = |len: usize, n: usize| -> Vec<f64> {
        if n == 1 {
            return vec![(len as f64 - 1.0) / 2.0];
        }
        tile_spans(len, params.tile)
            .into_iter()
            .map(|(a, b)| (a + b - 1) as f64 / 2.0)
            .collect()
    };
    let cx = centers(w, nx);
    let cy = centers(h, ny);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (ty0, ty1, q) = interp_coord(y, &cy);
        for x in 0..w {
            let (tx0, tx1, p) = interp_coord(x, &cx);
            let b = params.bin_of(gray.get(x, y, 0));
            let m = |tx: usize, ty: usize| maps[ty * nx + tx].mapping[b];
            let v = (1.0 - p) * (1.0 - q) * m(tx0, ty0)
                + p * (1.0 - q) * m(tx1, ty0)
                + p * q * m(tx1, ty1)
                + (1.0 - p) * q * m(tx0, ty1);
            out.push(to_u8(v * 255.0));
        }
    }
    Image::new(w, h, 1, out)
}

/// Enhances a gray image directly; RGB inputs have their luma plane
/// enhanced and the luma change added back to every channel.
pub fn clahe_enhance(img: &Image, params: &ClaheParams) -> Result<Image> {
    if img.is_gray() {
        return enhance_plane(img, params);
    }
    let gray = img.to_gray();
    let enhanced = enhance_plane(&gray, params)?;
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let delta = enhanced.get(x, y, 0) as i16 - gray.get(x, y, 0) as i16;
            for c in 0..3 {
                let v = (img.get(x, y, c) as i16 + delta).clamp(0, 255);
                out.set(x, y, c, v as u8);
            }
        }
    }
    Ok(out)
}
