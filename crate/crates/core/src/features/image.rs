use crate::imgproc::Image;

/// Names of the image features, in emission order.
pub fn image_feature_names() -> Vec<String> {
    let mut names: Vec<String> = ["mean", "variance", "skewness", "kurtosis", "smoothness"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for ch in ["r", "g", "b"] {
        names.extend((0..8).map(|i| format!("hist_{ch}{i}")));
    }
    names.push("edge_density".into());
    for s in ["contrast", "energy", "homogeneity", "correlation"] {
        names.push(format!("glcm_{s}"));
    }
    names.extend((0..9).map(|i| format!("hog{i}")));
    names
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    /// Fisher (excess) kurtosis.
    pub kurtosis: f64,
}

/// Population moments; skewness and kurtosis are 0 for constant data.
pub fn moments(values: &[f64]) -> Moments {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let (skewness, kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    Moments {
        mean,
        variance: m2,
        skewness,
        kurtosis,
    }
}

/// Fraction of pixels per channel in 8 equal-width bins; gray images
/// repeat their histogram for all three channels.
pub fn color_histogram(img: &Image) -> Vec<f64> {
    let rgb = img.to_rgb();
    let n = (rgb.width() * rgb.height()) as f64;
    let mut h = vec![0.0; 24];
    for p in rgb.data().chunks_exact(3) {
        for (c, &v) in p.iter().enumerate() {
            h[c * 8 + (v >> 5) as usize] += 1.0 / n;
        }
    }
    h
}

fn gray_f64(gray: &Image) -> Vec<f64> {
    gray.data().iter().map(|&v| v as f64).collect()
}

/// Fraction of pixels whose Sobel magnitude exceeds mean + one std.
pub fn edge_density(gray: &Image) -> f64 {
    let (w, h) = (gray.width() as isize, gray.height() as isize);
    let px = |x: isize, y: isize| gray.get_clamped(x, y, 0) as f64;
    let mut mags = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let gx = px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1)
                - px(x - 1, y - 1)
                - 2.0 * px(x - 1, y)
                - px(x - 1, y + 1);
            let gy = px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1)
                - px(x - 1, y - 1)
                - 2.0 * px(x, y - 1)
                - px(x + 1, y - 1);
            mags.push(gx.hypot(gy));
        }
    }
    let m = moments(&mags);
    let threshold = m.mean + m.variance.sqrt();
    mags.iter().filter(|&&v| v > threshold).count() as f64 / mags.len() as f64
}

/// Co-occurrence counts of 8-level gray pairs at offset (+1, 0).
pub fn glcm_counts(gray: &Image) -> [[u64; 8]; 8] {
    let mut m = [[0u64; 8]; 8];
    for y in 0..gray.height() {
        for x in 0..gray.width().saturating_sub(1) {
            let i = (gray.get(x, y, 0) >> 5) as usize;
            let j = (gray.get(x + 1, y, 0) >> 5) as usize;
            m[i][j] += 1;
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlcmStats {
    pub contrast: f64,
    pub energy: f64,
    pub homogeneity: f64,
    pub correlation: f64,
}

/// Haralick statistics of a count matrix. Without pairs the matrix is
/// treated as a single diagonal cell; zero marginal spread gives correlation 0.
pub fn glcm_stats(counts: &[[u64; 8]; 8]) -> GlcmStats {
    let total: u64 = counts.iter().flatten().sum();
    if total == 0 {
        return GlcmStats {
            contrast: 0.0,
            energy: 1.0,
            homogeneity: 1.0,
            correlation: 0.0,
        };
    }
    let p = |i: usize, j: usize| counts[i][j] as f64 / total as f64;
    let (mut mi, mut mj) = (0.0, 0.0);
    for i in 0..8 {
        for j in 0..8 {
            mi += i as f64 * p(i, j);
            mj += j as f64 * p(i, j);
        }
    }
    let mut s = GlcmStats {
        contrast: 0.0,
        energy: 0.0,
        homogeneity: 0.0,
        correlation: 0.0,
    };
    let (mut vi, mut vj, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..8 {
        for j in 0..8 {
            let v = p(i, j);
            let d = (i as f64 - j as f64).powi(2);
            s.contrast += d * v;
            s.energy += v * v;
            s.homogeneity += v / (1.0 + d);
            vi += (i as f64 - mi).powi(2) * v;
            vj += (j as f64 - mj).powi(2) * v;
            cov += (i as f64 - mi) * (j as f64 - mj) * v;
        }
    }
    if vi > 0.0 && vj > 0.0 {
        s.correlation = cov / (vi * vj).sqrt();
    }
    s
}

const CELL: usize = 8;
const HOG_BINS: usize = 9;

/// Mean over blocks of the L2-normalised 9-bin orientation histograms.
///
/// Gradients use centred differences with replicated borders; orientations are
/// unsigned and hard-binned by magnitude. Blocks are 2x2 cells at a one-cell
/// stride; images too small for one block use a single block of all cells.
pub fn hog_summary(gray: &Image) -> Vec<f64> {
    let (w, h) = (gray.width(), gray.height());
    let cx = (w / CELL).max(1);
    let cy = (h / CELL).max(1);
    let (cw, ch) = (if w >= CELL { CELL } else { w }, if h >= CELL { CELL } else { h });
    let mut cells = vec![[0.0f64; HOG_BINS]; cx * cy];
    for y in 0..cy * ch {
        for x in 0..cx * cw {
            let (xi, yi) = (x as isize, y as isize);
            let gx = gray.get_clamped(xi + 1, yi, 0) as f64 - gray.get_clamped(xi - 1, yi, 0) as f64;
            let gy = gray.get_clamped(xi, yi + 1, 0) as f64 - gray.get_clamped(xi, yi - 1, 0) as f64;
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let bin = ((angle / 20.0) as usize).min(HOG_BINS - 1);
            cells[(y / ch) * cx + x / cw][bin] += mag;
        }
    }
    let blocks: Vec<Vec<usize>> = if cx >= 2 && cy >= 2 {
        (0..cy - 1)
            .flat_map(|by| {
                (0..cx - 1).map(move |bx| {
                    vec![
                        by * cx + bx,
                        by * cx + bx + 1,
                        (by + 1) * cx + bx,
                        (by + 1) * cx + bx + 1,
                    ]
                })
            })
            .collect()
    } else {
        vec![(0..cx * cy).collect()]
    };
    let mut summary = vec![0.0; HOG_BINS];
    let mut count = 0.0;
    for block in &blocks {
        let norm = block
            .iter()
            .flat_map(|&c| cells[c].iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        for &c in block {
            for (s, v) in summary.iter_mut().zip(&cells[c]) {
                *s += if norm > 0.0 { v / norm } else { 0.0 };
            }
            count += 1.0;
        }
    }
    summary.iter_mut().for_each(|s| *s /= count);
    summary
}

/// All image features in the order of [`image_feature_names`].
pub fn image_feature_values(img: &Image) -> Vec<f64> {
    let gray = img.to_gray();
    let m = moments(&gray_f64(&gray));
    let var_n = m.variance / (255.0 * 255.0);
    let mut v = vec![m.mean, m.variance, m.skewness, m.kurtosis, 1.0 - 1.0 / (1.0 + var_n)];
    v.extend(color_histogram(img));
    v.push(edge_density(&gray));
    let g = glcm_stats(&glcm_counts(&gray));
    v.extend([g.contrast, g.energy, g.homogeneity, g.correlation]);
    v.extend(hog_summary(&gray));
    v
}
