//! Fully enumerated conditional random field over an image's regions.

use serde::{Deserialize, Serialize};

use super::Region;
use crate::error::{Error, Result};

/// Region attributes that feed the unary indicator features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attribute {
    Small,
    Large,
    Wide,
    Tall,
    Bright,
    Dark,
    /// The region does not come from a detection.
    NoPrior,
    /// The detector assigned this class.
    Prior(usize),
}

/// Pairwise relations that feed the pairwise indicator features.
pub const PAIR_RELATIONS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfModel {
    pub labels: Vec<String>,
    /// Number of detector classes with a prior attribute.
    pub prior_classes: usize,
    /// Regions with a smaller box area (px²) are `Small`, others `Large`.
    pub size_threshold: f64,
    /// Mean intensity above which a region is `Bright`.
    pub bright_threshold: f64,
    /// `labels x attributes`, row-major.
    pub unary: Vec<f64>,
    /// `PAIR_RELATIONS x labels x labels`; relation 0 is adjacency, 1 is left-of.
    pub pairwise: Vec<f64>,
    /// Largest region count decoded by exact enumeration.
    pub enumeration_cap: usize,
}

impl CrfModel {
    pub fn zeros(labels: Vec<String>, prior_classes: usize) -> Self {
        let l = labels.len();
        let mut m = Self {
            labels,
            prior_classes,
            size_threshold: 150.0,
            bright_threshold: 128.0,
            unary: Vec::new(),
            pairwise: vec![0.0; PAIR_RELATIONS * l * l],
            enumeration_cap: 8,
        };
        m.unary = vec![0.0; l * m.attribute_count()];
        m
    }

    /// Detector classes map onto the first labels; the last label collects
    /// regions without a detection.
    pub fn with_class_prior(class_names: &[String], weight: f64) -> Self {
        let mut labels = class_names.to_vec();
        labels.push("object".to_string());
        let mut m = Self::zeros(labels, class_names.len());
        for k in 0..class_names.len() {
            let a = m.attribute_index(Attribute::Prior(k));
            m.set_unary(k, a, weight);
        }
        let other = class_names.len();
        let a = m.attribute_index(Attribute::NoPrior);
        m.set_unary(other, a, weight);
        m
    }

    pub fn attribute_count(&self) -> usize {
        7 + self.prior_classes
    }

    pub fn attribute_index(&self, a: Attribute) -> usize {
        match a {
            Attribute::Small => 0,
            Attribute::Large => 1,
            Attribute::Wide => 2,
            Attribute::Tall => 3,
            Attribute::Bright => 4,
            Attribute::Dark => 5,
            Attribute::NoPrior => 6,
            Attribute::Prior(k) => 7 + k,
        }
    }

    pub fn set_unary(&mut self, label: usize, attribute: usize, w: f64) {
        let a = self.attribute_count();
        self.unary[label * a + attribute] = w;
    }

    pub fn set_pairwise(&mut self, relation: usize, a: usize, b: usize, w: f64) {
        let l = self.labels.len();
        self.pairwise[(relation * l + a) * l + b] = w;
    }

    fn validate(&self) -> Result<()> {
        let l = self.labels.len();
        if l == 0 {
            return Err(Error::invalid("crf needs at least one label"));
        }
        if self.unary.len() != l * self.attribute_count() || self.pairwise.len() != PAIR_RELATIONS * l * l {
            return Err(Error::invalid("crf weight tables do not match the label set"));
        }
        if self.unary.iter().chain(&self.pairwise).any(|w| !w.is_finite()) {
            return Err(Error::invalid("crf weights must be finite"));
        }
        Ok(())
    }

    /// Binary attribute vector of one region.
    pub fn attributes(&self, r: &Region) -> Vec<f64> {
        let mut v = vec![0.0; self.attribute_count()];
        let area = r.bbox.area();
        v[self.attribute_index(if area < self.size_threshold {
            Attribute::Small
        } else {
            Attribute::Large
        })] = 1.0;
        if r.bbox.w > 1.2 * r.bbox.h {
            v[self.attribute_index(Attribute::Wide)] = 1.0;
        }
        if r.bbox.h > 1.2 * r.bbox.w {
            v[self.attribute_index(Attribute::Tall)] = 1.0;
        }
        let lum = if r.mean_intensity > self.bright_threshold {
            Attribute::Bright
        } else {
            Attribute::Dark
        };
        v[self.attribute_index(lum)] = 1.0;
        match r.class_prior {
            Some(k) if k < self.prior_classes => v[self.attribute_index(Attribute::Prior(k))] = 1.0,
            Some(_) => {}
            None => v[self.attribute_index(Attribute::NoPrior)] = 1.0,
        }
        v
    }
}

/// `[adjacent, left_of]` indicators for the ordered pair `(a, b)`.
pub fn pair_relations(a: &Region, b: &Region) -> [f64; PAIR_RELATIONS] {
    let gap_x = (a.bbox.x.max(b.bbox.x) - a.bbox.x1().min(b.bbox.x1())).max(0.0);
    let gap_y = (a.bbox.y.max(b.bbox.y) - a.bbox.y1().min(b.bbox.y1())).max(0.0);
    let adjacent = gap_x.max(gap_y) <= 2.0;
    let left_of = a.bbox.x1() <= b.bbox.x;
    [adjacent as u8 as f64, left_of as u8 as f64]
}

/// Global feature vector `F(Y, regions)`, laid out like `[unary | pairwise]`.
pub fn feature_vector(model: &CrfModel, regions: &[Region], labeling: &[usize]) -> Result<Vec<f64>> {
    model.validate()?;
    check_labeling(model, regions, labeling)?;
    let (l, a) = (model.labels.len(), model.attribute_count());
    let mut f = vec![0.0; model.unary.len() + model.pairwise.len()];
    for (r, &y) in regions.iter().zip(labeling) {
        for (k, v) in model.attributes(r).into_iter().enumerate() {
            f[y * a + k] += v;
        }
    }
    let off = model.unary.len();
    for i in 0..regions.len() {
        for j in 0..regions.len() {
            if i == j {
                continue;
            }
            let rel = pair_relations(&regions[i], &regions[j]);
            for (k, v) in rel.into_iter().enumerate() {
                // Adjacency is symmetric; count each unordered pair once.
                if k == 0 && i > j {
                    continue;
                }
                f[off + (k * l + labeling[i]) * l + labeling[j]] += v;
            }
        }
    }
    Ok(f)
}

fn check_labeling(model: &CrfModel, regions: &[Region], labeling: &[usize]) -> Result<()> {
    if labeling.len() != regions.len() {
        return Err(Error::invalid(format!(
            "labeling has {} entries for {} regions",
            labeling.len(),
            regions.len()
        )));
    }
    if let Some(&bad) = labeling.iter().find(|&&y| y >= model.labels.len()) {
        return Err(Error::invalid(format!("label {bad} outside the vocabulary")));
    }
    Ok(())
}

/// `sum_l w_l F_l(Y, regions)`.
pub fn crf_score(model: &CrfModel, regions: &[Region], labeling: &[usize]) -> Result<f64> {
    let f = feature_vector(model, regions, labeling)?;
    Ok(model
        .unary
        .iter()
        .chain(&model.pairwise)
        .zip(&f)
        .map(|(w, x)| w * x)
        .sum())
}

/// Per-region unary tables and per-pair pairwise tables for fast enumeration.
struct Potentials {
    labels: usize,
    unary: Vec<Vec<f64>>,
    pairs: Vec<(usize, usize, Vec<f64>)>,
}

impl Potentials {
    fn new(model: &CrfModel, regions: &[Region]) -> Self {
        let (l, a) = (model.labels.len(), model.attribute_count());
        let unary = regions
            .iter()
            .map(|r| {
                let attrs = model.attributes(r);
                (0..l)
                    .map(|y| attrs.iter().enumerate().map(|(k, v)| v * model.unary[y * a + k]).sum())
                    .collect()
            })
            .collect();
        let mut pairs = Vec::new();
        for i in 0..regions.len() {
            for j in 0..regions.len() {
                if i == j {
                    continue;
                }
                let rel = pair_relations(&regions[i], &regions[j]);
                let mut table = vec![0.0; l * l];
                let mut any = false;
                for (k, v) in rel.into_iter().enumerate() {
                    if v == 0.0 || (k == 0 && i > j) {
                        continue;
                    }
                    any = true;
                    for (t, w) in table.iter_mut().zip(&model.pairwise[k * l * l..(k + 1) * l * l]) {
                        *t += v * w;
                    }
                }
                if any {
                    pairs.push((i, j, table));
                }
            }
        }
        Self {
            labels: l,
            unary,
            pairs,
        }
    }

    fn score(&self, y: &[usize]) -> f64 {
        let u: f64 = self.unary.iter().zip(y).map(|(t, &yi)| t[yi]).sum();
        u + self
            .pairs
            .iter()
            .map(|(i, j, t)| t[y[*i] * self.labels + y[*j]])
            .sum::<f64>()
    }

    /// Visits every labeling in lexicographic order.
    fn for_each(&self, n: usize, mut f: impl FnMut(&[usize], f64)) {
        let mut y = vec![0usize; n];
        loop {
            f(&y, self.score(&y));
            let mut k = n;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                y[k] += 1;
                if y[k] < self.labels {
                    break;
                }
                y[k] = 0;
            }
        }
    }
}

fn check_cap(model: &CrfModel, regions: &[Region]) -> Result<()> {
    model.validate()?;
    if regions.len() > model.enumeration_cap {
        return Err(Error::OverLimit {
            what: "crf regions",
            count: regions.len(),
            cap: model.enumeration_cap,
        });
    }
    Ok(())
}

/// `log Z` by exact enumeration; `OverLimit` beyond the cap.
pub fn crf_normalize(model: &CrfModel, regions: &[Region]) -> Result<f64> {
    check_cap(model, regions)?;
    let pot = Potentials::new(model, regions);
    let mut scores = Vec::new();
    pot.for_each(regions.len(), |_, s| scores.push(s));
    Ok(log_sum_exp(&scores))
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Every labeling with its probability, in lexicographic order.
pub fn labeling_distribution(model: &CrfModel, regions: &[Region]) -> Result<Vec<(Vec<usize>, f64)>> {
    let log_z = crf_normalize(model, regions)?;
    let pot = Potentials::new(model, regions);
    let mut out = Vec::new();
    pot.for_each(regions.len(), |y, s| out.push((y.to_vec(), (s - log_z).exp())));
    Ok(out)
}

/// Most probable labeling; ties go to the lexicographically smallest.
/// Beyond the enumeration cap each region takes its best unary label.
pub fn decode(model: &CrfModel, regions: &[Region]) -> Result<Vec<usize>> {
    match check_cap(model, regions) {
        Ok(()) => {
            let pot = Potentials::new(model, regions);
            let mut best = (f64::NEG_INFINITY, vec![0; regions.len()]);
            pot.for_each(regions.len(), |y, s| {
                if s > best.0 {
                    best = (s, y.to_vec());
                }
            });
            Ok(best.1)
        }
        Err(Error::OverLimit { count, cap, .. }) => {
            log::debug!("{count} regions exceed the crf cap {cap}; decoding unaries independently");
            Ok(decode_unary(model, regions))
        }
        Err(e) => Err(e),
    }
}

pub fn decode_unary(model: &CrfModel, regions: &[Region]) -> Vec<usize> {
    let pot = Potentials::new(model, regions);
    pot.unary
        .iter()
        .map(|t| {
            let mut best = 0;
            for (k, &v) in t.iter().enumerate() {
                if v > t[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rect;

    fn region(x: f64, y: f64, w: f64, h: f64, prior: Option<usize>) -> Region {
        Region::new(Rect::new(x, y, w, h), 150.0, prior)
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    fn random_model(seed: u64, n_labels: usize) -> CrfModel {
        let mut m = CrfModel::zeros(labels(n_labels), 2);
        let mut s = seed;
        let mut next = || {
            s = s
                .wrapping_mul(6_364_136_223_846_793_005)
                .wrapping_add(1_442_695_040_888_963_407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        };
        m.unary.iter_mut().for_each(|w| *w = next());
        m.pairwise.iter_mut().for_each(|w| *w = next());
        m
    }

    fn three_regions() -> Vec<Region> {
        vec![
            region(0.0, 0.0, 10.0, 10.0, Some(0)),
            region(11.0, 0.0, 20.0, 8.0, Some(1)),
            region(12.0, 30.0, 4.0, 12.0, None),
        ]
    }

    #[test]
    fn zero_weights_score_zero() {
        let m = CrfModel::zeros(labels(3), 2);
        let r = three_regions();
        assert_eq!(crf_score(&m, &r, &[0, 2, 1]).unwrap(), 0.0);
        let one = vec![region(0.0, 0.0, 2.0, 2.0, None)];
        let m2 = CrfModel::zeros(labels(2), 0);
        assert!((crf_normalize(&m2, &one).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_active_unary() {
        let mut m = CrfModel::zeros(labels(2), 0);
        let a = m.attribute_index(Attribute::Small);
        m.set_unary(1, a, 2.0);
        let r = vec![region(0.0, 0.0, 3.0, 3.0, None)];
        assert_eq!(crf_score(&m, &r, &[1]).unwrap(), 2.0);
        assert_eq!(crf_score(&m, &r, &[0]).unwrap(), 0.0);
    }

    #[test]
    fn enumeration_tables_match_feature_sum() {
        let r = three_regions();
        for seed in 0..5 {
            let m = random_model(seed, 3);
            let pot = Potentials::new(&m, &r);
            pot.for_each(3, |y, s| {
                let direct = crf_score(&m, &r, y).unwrap();
                assert!((s - direct).abs() < 1e-12, "{y:?}: {s} vs {direct}");
            });
        }
    }

    #[test]
    fn distribution_sums_to_one_and_is_shift_invariant() {
        let r = three_regions();
        let m = random_model(9, 3);
        let d = labeling_distribution(&m, &r).unwrap();
        assert_eq!(d.len(), 27);
        assert!((d.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-12);
        // A constant on the always-active size attribute shifts every labeling.
        let mut shifted = m.clone();
        let (small, large) = (m.attribute_index(Attribute::Small), m.attribute_index(Attribute::Large));
        for y in 0..3 {
            let a = shifted.attribute_count();
            shifted.unary[y * a + small] += 0.7;
            shifted.unary[y * a + large] += 0.7;
        }
        let d2 = labeling_distribution(&shifted, &r).unwrap();
        for ((_, p), (_, q)) in d.iter().zip(&d2) {
            assert!((p - q).abs() < 1e-12);
        }
        assert_eq!(decode(&m, &r).unwrap(), decode(&shifted, &r).unwrap());
    }

    #[test]
    fn ties_take_label_zero() {
        let m = CrfModel::zeros(labels(2), 0);
        let r = vec![region(0.0, 0.0, 2.0, 2.0, None), region(5.0, 0.0, 2.0, 2.0, None)];
        assert_eq!(decode(&m, &r).unwrap(), vec![0, 0]);
    }

    #[test]
    fn class_prior_wins() {
        let names = labels(3);
        let m = CrfModel::with_class_prior(&names, 3.0);
        let r = three_regions();
        assert_eq!(decode(&m, &r).unwrap(), vec![0, 1, 3]);
    }

    #[test]
    fn over_cap_falls_back_to_unary() {
        let names = labels(3);
        let mut m = CrfModel::with_class_prior(&names, 3.0);
        m.enumeration_cap = 2;
        let r = three_regions();
        assert!(matches!(crf_normalize(&m, &r), Err(Error::OverLimit { .. })));
        assert_eq!(decode(&m, &r).unwrap(), vec![0, 1, 3]);
    }

    #[test]
    fn rejects_out_of_vocabulary_label() {
        let m = CrfModel::zeros(labels(2), 0);
        let r = vec![region(0.0, 0.0, 2.0, 2.0, None)];
        assert!(crf_score(&m, &r, &[2]).is_err());
    }
}
