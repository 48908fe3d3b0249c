//! Decoder transformer that captions images and answers closed-vocabulary
//! questions. Text positions attend causally to themselves and, through
//! cross-attention, to a prefix of projected image slots.

mod model;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax, softmax_in_place};
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::imgproc::Image;

pub use model::{train, CaptionModel, Example, FeatureStats, ForwardOutput, Mixup, TrainConfig, TrainReport};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Maximum number of text positions.
    pub context: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub mixup_beta: f64,
    pub lambda_scl: f64,
    pub eps: f64,
    /// Object slots in the image prefix, after one global slot.
    pub max_objects: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks: 2,
            context: 32,
            ffn: 128,
            dropout: 0.1,
            mixup_beta: 0.2,
            lambda_scl: 1.0,
            eps: 1e-5,
            max_objects: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid("d_model must be a positive multiple of heads"));
        }
        if self.context < 2 {
            return Err(Error::invalid("context must be at least 2"));
        }
        if self.ffn == 0 || self.blocks == 0 {
            return Err(Error::invalid("ffn and blocks must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if !(self.mixup_beta > 0.0) || !(self.lambda_scl >= 0.0) || !(self.eps >= 0.0) {
            return Err(Error::invalid(
                "mixup_beta must be positive, lambda_scl and eps nonnegative",
            ));
        }
        Ok(())
    }

    pub fn image_slots(&self) -> usize {
        1 + self.max_objects
    }
}

/// Word list whose first entries are the special tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by corpus words in first-occurrence order.
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut v = Self::from_words(SPECIALS.iter().map(|s| s.to_string()).collect()).expect("specials are unique");
        for t in texts {
            for w in crate::textkw::words(t.as_ref()) {
                if !v.index.contains_key(&w) {
                    v.index.insert(w.clone(), v.words.len());
                    v.words.push(w);
                }
            }
        }
        v
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words.iter().zip(SPECIALS).any(|(w, s)| w != s) {
            return Err(Error::Validation(
                "vocabulary must start with the special tokens".into(),
            ));
        }
        let index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != words.len() {
            return Err(Error::Validation("duplicate vocabulary word".into()));
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, w: &str) -> Option<usize> {
        self.index.get(w).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Token ids; out-of-vocabulary words map to the zero-embedding PAD.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        crate::textkw::words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(PAD))
            .collect()
    }

    /// Words of `ids` up to the first EOS, without specials.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= SPECIALS.len())
            .map(|&i| self.words[i].clone())
            .collect()
    }
}

/// One detected object as seen by the captioner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSlot {
    pub class_probs: Vec<f64>,
    /// Centre and size as fractions of the image: `[cx, cy, w, h]`.
    pub bbox: [f64; 4],
    /// Mean of `(channel - luma) / 255` over the crop.
    pub hue: [f64; 3],
    pub score: f64,
}

impl ObjectSlot {
    pub fn from_detection(d: &Detection, crop: &Image, width: usize, height: usize) -> Self {
        let (cx, cy) = d.rect.center();
        Self {
            class_probs: d.class_probs.clone(),
            bbox: [
                cx / width as f64,
                cy / height as f64,
                d.rect.w / width as f64,
                d.rect.h / height as f64,
            ],
            hue: crop_hue(crop),
            score: d.score,
        }
    }

    /// `[present, class_probs.., bbox.., 4 * hue.., score]`.
    pub fn encode(&self) -> Vec<f64> {
        let mut v = vec![1.0];
        v.extend(&self.class_probs);
        v.extend(self.bbox);
        v.extend(self.hue.iter().map(|h| 4.0 * h));
        v.push(self.score);
        v
    }
}

pub fn object_slot_dim(classes: usize) -> usize {
    classes + 9
}

pub fn crop_hue(crop: &Image) -> [f64; 3] {
    if crop.is_gray() {
        return [0.0; 3];
    }
    let mut acc = [0.0; 3];
    let n = (crop.width() * crop.height()) as f64;
    for y in 0..crop.height() {
        for x in 0..crop.width() {
            let p = [crop.get(x, y, 0), crop.get(x, y, 1), crop.get(x, y, 2)];
            let l = crate::imgproc::luma(p[0], p[1], p[2]) as f64;
            for c in 0..3 {
                acc[c] += (p[c] as f64 - l) / 255.0 / n;
            }
        }
    }
    acc
}

/// Everything the captioner reads from one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageArtifacts {
    /// Selected image-level feature values, unstandardised.
    pub global: Vec<f64>,
    /// Objects ordered left to right.
    pub objects: Vec<ObjectSlot>,
}

impl ImageArtifacts {
    /// Keeps the `max_objects` highest-scoring detections, left to right.
    pub fn new(global: Vec<f64>, mut objects: Vec<ObjectSlot>, max_objects: usize) -> Self {
        objects.sort_by(|a, b| b.score.total_cmp(&a.score));
        objects.truncate(max_objects);
        objects.sort_by(|a, b| a.bbox[0].total_cmp(&b.bbox[0]));
        Self { global, objects }
    }
}

/// Layer normalisation of one vector.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    let inv = if inv.is_finite() { inv } else { 0.0 };
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

/// Row-major dense matrix.
pub type Rows = Vec<Vec<f64>>;

/// Scaled dot-product attention of one head; returns outputs and the
/// attention matrix. `causal` lets query `i` see keys `0..=i` only.
pub fn attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], causal: bool) -> Result<(Rows, Rows)> {
    if k.is_empty() || k.len() != v.len() {
        return Err(Error::invalid("attention needs equally many keys and values"));
    }
    let dk = k[0].len();
    if q.iter().chain(k).any(|r| r.len() != dk) || v.iter().any(|r| r.len() != v[0].len()) {
        return Err(Error::invalid("attention dimension mismatch"));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut weights = Vec::with_capacity(q.len());
    let mut out = Vec::with_capacity(q.len());
    for (i, qi) in q.iter().enumerate() {
        let visible = if causal { (i + 1).min(k.len()) } else { k.len() };
        let mut w: Vec<f64> = k[..visible]
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        softmax_in_place(&mut w);
        w.resize(k.len(), 0.0);
        let mut o = vec![0.0; v[0].len()];
        for (wj, vj) in w.iter().zip(v) {
            for (oo, x) in o.iter_mut().zip(vj) {
                *oo += wj * x;
            }
        }
        weights.push(w);
        out.push(o);
    }
    Ok((out, weights))
}

/// Convex blend `u a + (1 - u) b` of two equally shaped arrays.
pub fn mixup(a: &[f64], b: &[f64], u: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid("mixup operands differ in shape"));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid("mixup coefficient must lie in [0, 1]"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| u * x + (1.0 - u) * y).collect())
}

pub fn one_hot(k: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mean over the batch of `|g - t|^2 + |t3 - t|^2`.
pub fn scl_loss(generated: &[Vec<f64>], target: &[Vec<f64>], target3: &[Vec<f64>]) -> Result<f64> {
    let n = generated.len();
    if n == 0 || target.len() != n || target3.len() != n {
        return Err(Error::invalid("scl_loss needs equally many nonempty representations"));
    }
    let mut total = 0.0;
    for ((g, t), t3) in generated.iter().zip(target).zip(target3) {
        if g.len() != t.len() || t3.len() != t.len() {
            return Err(Error::invalid("scl_loss representation dims differ"));
        }
        total += sq_dist(g, t) + sq_dist(t3, t);
    }
    Ok(total / n as f64)
}

/// Candidate answer classes with their semantic prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypes {
    pub names: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl ClassPrototypes {
    pub fn new(names: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != vectors.len() {
            return Err(Error::invalid("one prototype per class"));
        }
        let mut seen = std::collections::HashSet::new();
        if !names.iter().all(|n| seen.insert(n)) {
            return Err(Error::invalid("duplicate class name"));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("prototypes must be finite"));
        }
        Ok(Self { names, vectors })
    }

    /// Prototypes from the word vectors of the class names.
    pub fn from_encoder(enc: &crate::textkw::Encoder, names: &[String]) -> Result<Self> {
        let vectors = names.iter().map(|n| enc.word_vector(n).to_vec()).collect();
        Self::new(names.to_vec(), vectors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// `score_k = log p_k - lambda |g - proto_k|^2`, where classes without a
/// model log-probability (`None`) use the log-uniform `-ln K`.
pub fn zsl_scores(log_probs: &[Option<f64>], g: &[f64], protos: &ClassPrototypes, lambda: f64) -> Result<Vec<f64>> {
    if protos.is_empty() {
        return Err(Error::invalid("zero-shot prediction needs at least one class"));
    }
    if log_probs.len() != protos.len() {
        return Err(Error::invalid("one log-probability slot per class"));
    }
    let uniform = -(protos.len() as f64).ln();
    protos
        .vectors
        .iter()
        .zip(log_probs)
        .map(|(p, lp)| {
            if p.len() != g.len() {
                return Err(Error::invalid("prototype and representation dims differ"));
            }
            Ok(lp.unwrap_or(uniform) - lambda * sq_dist(g, p))
        })
        .collect()
}

/// Index of the best class; ties keep the earliest.
pub fn zsl_predict(log_probs: &[Option<f64>], g: &[f64], protos: &ClassPrototypes, lambda: f64) -> Result<usize> {
    let s = zsl_scores(log_probs, g, protos, lambda)?;
    Ok(s.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        )
        .0)
}

/// Log-probabilities restricted to the candidate ids present in the head.
pub fn restricted_log_probs(logits: &[f64], ids: &[Option<usize>]) -> Vec<Option<f64>> {
    let present: Vec<f64> = ids.iter().flatten().map(|&i| logits[i]).collect();
    if present.is_empty() {
        return vec![None; ids.len()];
    }
    let ls = log_softmax(&present);
    let mut it = ls.into_iter();
    ids.iter()
        .map(|id| id.map(|_| it.next().expect("one per id")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[1.0, 2.0, 3.0], &[1.0; 3], &[0.0; 3], 0.0);
        let e = (1.5f64).sqrt();
        for (o, t) in out.iter().zip([-e, 0.0, e]) {
            assert!((o - t).abs() < 1e-12, "{out:?}");
        }
        assert!((out[2] - 1.22474).abs() < 1e-5);
        assert_eq!(layer_norm(&[4.0; 5], &[1.0; 5], &[0.0; 5], 1e-5), vec![0.0; 5]);
        let x: Vec<f64> = (0..16).map(|i| ((i * 37) % 11) as f64 - 3.3).collect();
        let y = layer_norm(&x, &[1.0; 16], &[0.0; 16], 1e-5);
        let m = y.iter().sum::<f64>() / 16.0;
        let v = y.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-3);
    }

    #[test]
    fn attention_examples() {
        let q = vec![vec![0.3, -1.0], vec![2.0, 0.5]];
        let (o, _) = attention(&q, &[vec![1.0, 1.0]], &[vec![7.0, -2.0, 0.5]], false).unwrap();
        assert!(o.iter().all(|r| r == &vec![7.0, -2.0, 0.5]));
        let k = vec![vec![0.4, 0.1]; 3];
        let v = vec![vec![1.0], vec![2.0], vec![6.0]];
        let (o, w) = attention(&q, &k, &v, false).unwrap();
        assert!(o.iter().all(|r| (r[0] - 3.0).abs() < 1e-12));
        assert!(w.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        let (_, w) = attention(&q, &k, &v, true).unwrap();
        assert_eq!(w[0], vec![1.0, 0.0, 0.0]);
        assert!(attention(&q, &[vec![1.0]], &[vec![1.0]], false).is_err());
    }

    #[test]
    fn mixup_examples() {
        let a = [1.0, -2.0, 3.0];
        let b = [5.0, 0.0, -1.0];
        assert_eq!(mixup(&a, &b, 1.0).unwrap(), a.to_vec());
        assert_eq!(mixup(&a, &b, 0.5).unwrap(), vec![3.0, -1.0, 1.0]);
        let l = mixup(&one_hot(0, 4), &one_hot(2, 4), 0.3).unwrap();
        assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(mixup(&a, &b[..2], 0.5).is_err());
        for u in [0.0, 0.2, 0.77, 1.0] {
            let m = mixup(&a, &b, u).unwrap();
            for ((x, y), z) in a.iter().zip(&b).zip(&m) {
                assert!(*z >= x.min(*y) - 1e-15 && *z <= x.max(*y) + 1e-15);
            }
        }
    }

    #[test]
    fn scl_examples() {
        let t = vec![vec![0.5, -1.0, 2.0]; 2];
        assert_eq!(scl_loss(&t, &t, &t).unwrap(), 0.0);
        let g: Vec<Vec<f64>> = t.iter().map(|v| vec![v[0] + 1.0, v[1], v[2]]).collect();
        assert!((scl_loss(&g, &t, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(scl_loss(&g, &t, &t[..1]).is_err());
        assert!(scl_loss(&[vec![1.0]], &t[..1], &t[..1]).is_err());
    }

    #[test]
    fn zsl_examples() {
        let protos = ClassPrototypes::new(
            vec!["red".into(), "green".into(), "blue".into()],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]],
        )
        .unwrap();
        let lp = [Some(-0.2), Some(-1.8), None];
        let g = [0.1, 0.9];
        assert_eq!(zsl_predict(&lp, &g, &protos, 0.0).unwrap(), 0);
        let seen = [Some(-0.5), Some(-1.5), Some(-2.5)];
        let shifted: Vec<Option<f64>> = seen.iter().map(|v| v.map(|x| x + 4.0)).collect();
        for g in [[0.1, 0.9], [1.0, 0.2], [-0.8, -1.1]] {
            assert_eq!(
                zsl_predict(&seen, &g, &protos, 1.0).unwrap(),
                zsl_predict(&shifted, &g, &protos, 1.0).unwrap()
            );
        }
        let g = [0.1, 0.9];
        assert_eq!(zsl_predict(&seen, &g, &protos, 1.0).unwrap(), 1);
        // Unseen class whose prototype equals g: its distance gap to "red"
        // is |g - red|^2 = 5, the log-prob gap is ln 3 - 0.2 < 5.
        let g = [-1.0, -1.0];
        assert_eq!(zsl_predict(&lp, &g, &protos, 1.0).unwrap(), 2);
        let one = ClassPrototypes::new(vec!["x".into()], vec![vec![3.0, 3.0]]).unwrap();
        assert_eq!(zsl_predict(&[None], &g, &one, 1.0).unwrap(), 0);
        let empty = ClassPrototypes::new(vec![], vec![]).unwrap();
        assert!(zsl_predict(&[], &g, &empty, 1.0).is_err());
    }

    #[test]
    fn restricted_log_probs_skip_missing() {
        let lp = restricted_log_probs(&[0.0, 1.0, 2.0], &[Some(1), None, Some(2)]);
        assert!(lp[1].is_none());
        let total = lp[0].unwrap().exp() + lp[2].unwrap().exp();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vocab_roundtrip() {
        let v = Vocab::build(&["a red circle", "what color is the circle"]);
        assert_eq!(v.word(3), "a");
        assert_eq!(v.encode("a circle zebra"), vec![3, 5, PAD]);
        assert_eq!(v.decode(&[3, 4, EOS, 5]), vec!["a", "red"]);
        assert!(Vocab::from_words(vec!["x".into()]).is_err());
    }
}
