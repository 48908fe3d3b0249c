//! Binarization and Zhang–Suen thinning of object crops.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::Image;

/// Binary raster; `true` is foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

/// A thinned mask.
pub type SkeletonImage = Mask;

/// Neighbour offsets P2..P9, clockwise from north.
pub const NEIGHBOURS: [(isize, isize); 8] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "mask data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    /// Parses rows of `#` (foreground) and `.` (background).
    pub fn from_ascii(rows: &[&str]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(width * height);
        for r in rows {
            if r.len() != width {
                return Err(Error::invalid("ragged mask rows"));
            }
            data.extend(r.bytes().map(|b| b == b'#'));
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-bounds reads are background.
    #[inline]
    pub fn get_or_false(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Foreground neighbours in P2..P9 order.
    pub fn neighbours(&self, x: usize, y: usize) -> [bool; 8] {
        NEIGHBOURS.map(|(dx, dy)| self.get_or_false(x as isize + dx, y as isize + dy))
    }

    /// 8-connected component label per pixel (`usize::MAX` for background)
    /// and the component count. Labels follow raster order of first pixels.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let mut labels = vec![usize::MAX; self.data.len()];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            if !self.data[start] || labels[start] != usize::MAX {
                continue;
            }
            labels[start] = next;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = ((i % self.width) as isize, (i / self.width) as isize);
                for (dx, dy) in NEIGHBOURS {
                    let (nx, ny) = (x + dx, y + dy);
                    if self.get_or_false(nx, ny) {
                        let j = ny as usize * self.width + nx as usize;
                        if labels[j] == usize::MAX {
                            labels[j] = next;
                            stack.push(j);
                        }
                    }
                }
            }
            next += 1;
        }
        (labels, next)
    }

    pub fn component_count(&self) -> usize {
        self.components().1
    }

    /// Foreground as 255, background as 0.
    pub fn to_image(&self) -> Image {
        let data = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        Image::new(self.width.max(1), self.height.max(1), 1, data).expect("mask dimensions are positive")
    }

    pub fn from_image(img: &Image) -> Mask {
        let g = img.to_gray();
        Mask {
            width: g.width(),
            height: g.height(),
            data: g.data().iter().map(|&v| v >= 128).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Mask> {
        Ok(Mask::from_image(&Image::load(path)?))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdPolicy {
    #[default]
    Otsu,
    Fixed(u8),
}

/// Otsu threshold: the smallest `t` maximising between-class variance for
/// the split `v <= t` / `v > t`. `None` when only one gray level occurs.
pub fn otsu_threshold(gray: &Image) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &v in gray.data() {
        hist[v as usize] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total = gray.data().len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0u8);
    for t in 0..255usize {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    Some(best.1)
}

/// Foreground is every pixel strictly above the threshold.
pub fn binarize(crop: &Image, policy: ThresholdPolicy) -> Result<Mask> {
    let gray = crop.to_gray();
    let threshold = match policy {
        ThresholdPolicy::Fixed(t) => Some(t),
        ThresholdPolicy::Otsu => otsu_threshold(&gray),
    };
    let data = match threshold {
        Some(t) => gray.data().iter().map(|&v| v > t).collect(),
        None => vec![false; gray.data().len()],
    };
    Mask::new(gray.width(), gray.height(), data)
}

/// `(A, B)`: 0→1 transitions around P2..P9..P2 and foreground neighbour count.
fn transitions_and_count(n: &[bool; 8]) -> (usize, usize) {
    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
    let b = n.iter().filter(|&&v| v).count();
    (a, b)
}

fn deletable(mask: &Mask, x: usize, y: usize, first: bool) -> bool {
    let n = mask.neighbours(x, y);
    let (a, b) = transitions_and_count(&n);
    if a != 1 || !(2..=6).contains(&b) {
        return false;
    }
    // n[0]=P2 n[2]=P4 n[4]=P6 n[6]=P8
    if first {
        !(n[0] && n[2] && n[4]) && !(n[2] && n[4] && n[6])
    } else {
        !(n[0] && n[2] && n[6]) && !(n[0] && n[4] && n[6])
    }
}

/// Zhang–Suen thinning to convergence.
///
/// Candidates of each sub-iteration are chosen on the unmodified mask; each
/// is removed only if the transition and neighbour-count tests still hold
/// after the earlier removals of that sub-iteration. This keeps two-pixel
/// thick blocks connected and makes the result idempotent.
pub fn thin(mask: &Mask) -> SkeletonImage {
    let mut m = mask.clone();
    loop {
        let mut changed = false;
        for first in [true, false] {
            let candidates: Vec<(usize, usize)> = (0..m.height)
                .flat_map(|y| (0..m.width).map(move |x| (x, y)))
                .filter(|&(x, y)| m.get(x, y) && deletable(&m, x, y, first))
                .collect();
            for (x, y) in candidates {
                let (a, b) = transitions_and_count(&m.neighbours(x, y));
                if a == 1 && (2..=6).contains(&b) {
                    m.set(x, y, false);
                    changed = true;
                }
            }
        }
        if !changed {
            return m;
        }
    }
}

/// Binarize then thin.
pub fn skeletonize(crop: &Image, policy: ThresholdPolicy) -> Result<SkeletonImage> {
    if crop.data().is_empty() {
        return Err(Error::invalid("empty crop"));
    }
    Ok(thin(&binarize(crop, policy)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive Otsu: evaluate every threshold directly from pixel lists.
    fn otsu_oracle(values: &[u8]) -> u8 {
        let mut best = (f64::NEG_INFINITY, 0u8);
        for t in 0..=254u8 {
            let (lo, hi): (Vec<f64>, Vec<f64>) = {
                let lo = values.iter().filter(|&&v| v <= t).map(|&v| v as f64).collect();
                let hi = values.iter().filter(|&&v| v > t).map(|&v| v as f64).collect();
                (lo, hi)
            };
            if lo.is_empty() || hi.is_empty() {
                continue;
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let score = lo.len() as f64 * hi.len() as f64 * (mean(&lo) - mean(&hi)).powi(2);
            if score > best.0 * (1.0 + 1e-12) {
                best = (score, t);
            }
        }
        best.1
    }

    #[test]
    fn otsu_matches_exhaustive_oracle() {
        let bimodal = Image::from_gray_fn(8, 8, |x, _| if x < 3 { 10 } else { 200 }).unwrap();
        let t = otsu_threshold(&bimodal).unwrap();
        assert_eq!(t, otsu_oracle(bimodal.data()));
        assert!((10..200).contains(&t));
        let m = binarize(&bimodal, ThresholdPolicy::Otsu).unwrap();
        assert_eq!(m.count(), 5 * 8);

        let mut seed = 12345u32;
        let ramp = Image::from_gray_fn(16, 16, |_, _| {
            seed = seed.wrapping_mul(1_103_515_245).wrapping_add(12_345);
            ((seed >> 16) % 256) as u8
        })
        .unwrap();
        assert_eq!(otsu_threshold(&ramp).unwrap(), otsu_oracle(ramp.data()));
    }

    #[test]
    fn constant_and_fixed_thresholds() {
        let c = Image::filled(5, 5, 1, 77).unwrap();
        assert_eq!(binarize(&c, ThresholdPolicy::Otsu).unwrap().count(), 0);
        let bright = Image::filled(3, 3, 1, 200).unwrap();
        assert_eq!(binarize(&bright, ThresholdPolicy::Fixed(128)).unwrap().count(), 9);
    }

    #[test]
    fn thin_line_unchanged() {
        let line = Mask::from_ascii(&[".......", ".#####.", "......."]).unwrap();
        assert_eq!(thin(&line), line);
        let diag = Mask::from_ascii(&["#....", ".#...", "..#..", "...#.", "....#"]).unwrap();
        assert_eq!(thin(&diag), diag);
    }

    #[test]
    fn thin_square_small_and_connected() {
        let sq = Mask::from_ascii(&[
            ".......", ".#####.", ".#####.", ".#####.", ".#####.", ".#####.", ".......",
        ])
        .unwrap();
        let s = thin(&sq);
        assert!(s.is_subset_of(&sq));
        assert!((1..=5).contains(&s.count()), "{}", s.count());
        assert_eq!(s.component_count(), 1);
    }

    #[test]
    fn two_by_two_block_survives() {
        let block = Mask::from_ascii(&["....", ".##.", ".##.", "...."]).unwrap();
        let s = thin(&block);
        assert_eq!(s.component_count(), 1);
        assert_eq!(thin(&s), s);
    }

    #[test]
    fn empty_mask() {
        let m = Mask::empty(4, 4);
        assert_eq!(thin(&m), m);
    }

    #[test]
    fn components_count_eight_connected() {
        let m = Mask::from_ascii(&["#..#", ".#..", "....", "##.#"]).unwrap();
        assert_eq!(m.component_count(), 4);
    }
}
