//! Fossa optimisation for wrapper feature selection.
//!
//! Positions live in `[lb, ub]^u`; a feature is selected when its component
//! exceeds 0.5. Fitness is the validation error of a 1-nearest-neighbour
//! classifier restricted to the selected features, and is minimised.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoaConfig {
    pub population: usize,
    pub iterations: usize,
    pub lb: f64,
    pub ub: f64,
    pub seed: u64,
    /// Share of samples held out for validation.
    pub val_fraction: f64,
}

impl Default for FoaConfig {
    fn default() -> Self {
        Self {
            population: 20,
            iterations: 50,
            lb: 0.0,
            ub: 1.0,
            seed: 42,
            val_fraction: 1.0 / 3.0,
        }
    }
}

impl FoaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::invalid("population must be at least 2"));
        }
        if self.iterations < 1 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if !(self.lb <= self.ub) || !self.lb.is_finite() || !self.ub.is_finite() {
            return Err(Error::invalid(format!("invalid bounds [{}, {}]", self.lb, self.ub)));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(Error::invalid("val_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub bits: Vec<bool>,
}

impl FeatureMask {
    /// Thresholds at 0.5; an empty selection keeps the largest component.
    pub fn from_position(position: &[f64]) -> Self {
        let mut bits: Vec<bool> = position.iter().map(|&p| p > 0.5).collect();
        if !bits.iter().any(|&b| b) && !position.is_empty() {
            let mut best = 0;
            for (i, &p) in position.iter().enumerate() {
                if p > position[best] {
                    best = i;
                }
            }
            bits[best] = true;
        }
        Self { bits }
    }

    pub fn selected(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fossa {
    pub position: Vec<f64>,
    pub fitness: f64,
}

/// Train/validation matrices, z-scored with training statistics.
#[derive(Clone, Debug)]
pub struct FitnessData {
    dims: usize,
    train_x: Vec<Vec<f64>>,
    train_y: Vec<usize>,
    val_x: Vec<Vec<f64>>,
    val_y: Vec<usize>,
}

impl FitnessData {
    pub fn new(train_x: Vec<Vec<f64>>, train_y: Vec<usize>, val_x: Vec<Vec<f64>>, val_y: Vec<usize>) -> Result<Self> {
        let dims = train_x.first().map_or(0, Vec::len);
        if train_x.len() != train_y.len() || val_x.len() != val_y.len() {
            return Err(Error::invalid("feature and label counts differ"));
        }
        if train_x.iter().chain(&val_x).any(|r| r.len() != dims) || dims == 0 {
            return Err(Error::invalid("feature rows must share a nonzero width"));
        }
        if val_x.is_empty() {
            return Err(Error::invalid("validation split is empty"));
        }
        let mut classes = train_y.clone();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::invalid("training labels need at least two classes"));
        }
        let n = train_x.len() as f64;
        let mut mean = vec![0.0; dims];
        let mut sd = vec![0.0; dims];
        for r in &train_x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        for r in &train_x {
            for ((s, v), m) in sd.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let sd: Vec<f64> = sd.iter().map(|s| if *s > 0.0 { s.sqrt() } else { 1.0 }).collect();
        let z = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.into_iter()
                .map(|r| r.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect())
                .collect()
        };
        Ok(Self {
            dims,
            train_x: z(train_x),
            train_y,
            val_x: z(val_x),
            val_y,
        })
    }

    /// Seeded shuffle, then the first `val_fraction` of samples validate.
    pub fn split(features: &[Vec<f64>], labels: &[usize], val_fraction: f64, seed: u64) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} rows for {} labels",
                features.len(),
                labels.len()
            )));
        }
        if features.len() < 3 {
            return Err(Error::invalid("need at least three samples to split"));
        }
        let mut idx: Vec<usize> = (0..features.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((features.len() as f64 * val_fraction).round() as usize).clamp(1, features.len() - 2);
        let (val, train) = idx.split_at(n_val);
        let pick = |ids: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
            (
                ids.iter().map(|&i| features[i].clone()).collect(),
                ids.iter().map(|&i| labels[i]).collect(),
            )
        };
        let (tx, ty) = pick(train);
        let (vx, vy) = pick(val);
        Self::new(tx, ty, vx, vy)
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// `1 - accuracy` of 1-NN on the validation rows; ties go to the
    /// earliest training row.
    pub fn error(&self, mask: &FeatureMask) -> Result<f64> {
        if mask.bits.len() != self.dims {
            return Err(Error::invalid(format!(
                "mask has {} bits for {} features",
                mask.bits.len(),
                self.dims
            )));
        }
        let sel = mask.selected();
        if sel.is_empty() {
            return Err(Error::invalid("empty feature mask"));
        }
        let mut wrong = 0usize;
        for (v, &vy) in self.val_x.iter().zip(&self.val_y) {
            let mut best = (f64::INFINITY, 0usize);
            for (t, &ty) in self.train_x.iter().zip(&self.train_y) {
                let d: f64 = sel.iter().map(|&i| (v[i] - t[i]).powi(2)).sum();
                if d < best.0 {
                    best = (d, ty);
                }
            }
            wrong += (best.1 != vy) as usize;
        }
        Ok(wrong as f64 / self.val_y.len() as f64)
    }
}

/// Memoised fitness keyed by the binary mask.
struct Evaluator<'a> {
    data: &'a FitnessData,
    cache: HashMap<Vec<bool>, f64>,
    evaluations: usize,
}

impl<'a> Evaluator<'a> {
    fn new(data: &'a FitnessData) -> Self {
        Self {
            data,
            cache: HashMap::new(),
            evaluations: 0,
        }
    }

    fn eval(&mut self, position: &[f64]) -> Result<f64> {
        self.evaluations += 1;
        let mask = FeatureMask::from_position(position);
        if let Some(&e) = self.cache.get(&mask.bits) {
            return Ok(e);
        }
        let e = self.data.error(&mask)?;
        self.cache.insert(mask.bits, e);
        Ok(e)
    }
}

/// One ChaCha stream per fossa.
pub fn fossa_rngs(seed: u64, population: usize) -> Vec<ChaCha8Rng> {
    (0..population)
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k as u64 + 1);
            r
        })
        .collect()
}

/// `z = lb + (ub - lb) * phi` per dimension.
pub fn initialize(cfg: &FoaConfig, dims: usize, rngs: &mut [ChaCha8Rng]) -> Vec<Vec<f64>> {
    rngs.iter_mut()
        .map(|r| {
            (0..dims)
                .map(|_| cfg.lb + (cfg.ub - cfg.lb) * r.random::<f64>())
                .collect()
        })
        .collect()
}

/// `z + phi * (lemur - I * z)`, clamped.
pub fn explore_component(z: f64, lemur: f64, phi: f64, i: f64, lb: f64, ub: f64) -> f64 {
    (z + phi * (lemur - i * z)).clamp(lb, ub)
}

/// `z + (1 - 2 phi) * (ub - lb) / t`, clamped.
pub fn exploit_component(z: f64, phi: f64, t: usize, lb: f64, ub: f64) -> f64 {
    (z + (1.0 - 2.0 * phi) * (ub - lb) / t as f64).clamp(lb, ub)
}

/// Per-dimension draws of `phi` in [0,1] and `I` in {1,2}.
pub fn exploration_candidate(current: &[f64], lemur: &[f64], cfg: &FoaConfig, rng: &mut impl Rng) -> Vec<f64> {
    current
        .iter()
        .zip(lemur)
        .map(|(&z, &l)| {
            let phi: f64 = rng.random();
            let i = rng.random_range(1..=2) as f64;
            explore_component(z, l, phi, i, cfg.lb, cfg.ub)
        })
        .collect()
}

/// Per-dimension draws of `phi` in [0,1].
pub fn exploitation_candidate(current: &[f64], t: usize, cfg: &FoaConfig, rng: &mut impl Rng) -> Vec<f64> {
    current
        .iter()
        .map(|&z| exploit_component(z, rng.random(), t, cfg.lb, cfg.ub))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoaResult {
    pub mask: FeatureMask,
    pub best_error: f64,
    /// Best error after each iteration.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

pub fn select_features(cfg: &FoaConfig, data: &FitnessData) -> Result<FoaResult> {
    cfg.validate()?;
    let dims = data.dims();
    let mut rngs = fossa_rngs(cfg.seed, cfg.population);
    let mut eval = Evaluator::new(data);
    let mut pop: Vec<Fossa> = initialize(cfg, dims, &mut rngs)
        .into_iter()
        .map(|position| {
            let fitness = eval.eval(&position)?;
            Ok(Fossa { position, fitness })
        })
        .collect::<Result<_>>()?;
    let best_of = |pop: &[Fossa]| -> usize {
        let mut b = 0;
        for (k, f) in pop.iter().enumerate() {
            if f.fitness < pop[b].fitness {
                b = k;
            }
        }
        b
    };
    let mut trace = Vec::with_capacity(cfg.iterations);
    for t in 1..=cfg.iterations {
        for k in 0..pop.len() {
            let rng = &mut rngs[k];
            let lemurs: Vec<usize> = (0..pop.len()).filter(|&j| pop[j].fitness < pop[k].fitness).collect();
            if let Some(&j) = lemurs.choose(rng) {
                let cand = exploration_candidate(&pop[k].position, &pop[j].position, cfg, rng);
                let f = eval.eval(&cand)?;
                if f < pop[k].fitness {
                    pop[k] = Fossa {
                        position: cand,
                        fitness: f,
                    };
                }
            }
            let cand = exploitation_candidate(&pop[k].position, t, cfg, rng);
            let f = eval.eval(&cand)?;
            if f < pop[k].fitness {
                pop[k] = Fossa {
                    position: cand,
                    fitness: f,
                };
            }
        }
        trace.push(pop[best_of(&pop)].fitness);
    }
    let best = &pop[best_of(&pop)];
    Ok(FoaResult {
        mask: FeatureMask::from_position(&best.position),
        best_error: best.fitness,
        trace,
        evaluations: eval.evaluations,
    })
}

/// Best error among `n` uniformly random repaired masks.
pub fn random_search(data: &FitnessData, n: usize, seed: u64) -> Result<(FeatureMask, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(FeatureMask, f64)> = None;
    for _ in 0..n {
        let pos: Vec<f64> = (0..data.dims()).map(|_| rng.random()).collect();
        let mask = FeatureMask::from_position(&pos);
        let e = data.error(&mask)?;
        if best.as_ref().is_none_or(|(_, b)| e < *b) {
            best = Some((mask, e));
        }
    }
    best.ok_or(Error::EmptyInput("random search needs at least one mask"))
}

/// Mask file: feature names, bits and the chosen names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub names: Vec<String>,
    pub bits: Vec<bool>,
    pub selected: Vec<String>,
    pub best_error: f64,
}

impl MaskFile {
    pub fn new(names: &[String], result: &FoaResult) -> Self {
        Self {
            names: names.to_vec(),
            bits: result.mask.bits.clone(),
            selected: result.mask.selected().iter().map(|&i| names[i].clone()).collect(),
            best_error: result.best_error,
        }
    }

    pub fn mask(&self) -> FeatureMask {
        FeatureMask {
            bits: self.bits.clone(),
        }
    }
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[f64]) -> Result<()> {
    let mut s = String::from("iteration,best_error\n");
    for (i, e) in trace.iter().enumerate() {
        s.push_str(&format!("{},{e:?}\n", i + 1));
    }
    crate::io::write_string(path, &s)
}
