use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// One-vs-rest counts for every class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
    pub samples: u64,
}

impl ConfusionCounts {
    /// Builds counts from parallel `(predicted, actual)` labels in `0..classes`.
    pub fn from_labels(predicted: &[usize], actual: &[usize], classes: usize) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} labels",
                predicted.len(),
                actual.len()
            )));
        }
        if let Some(&bad) = predicted.iter().chain(actual).find(|&&c| c >= classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
        }
        let n = actual.len() as u64;
        let mut per_class = vec![ClassCounts::default(); classes];
        for (&p, &a) in predicted.iter().zip(actual) {
            if p == a {
                per_class[a].tp += 1;
            } else {
                per_class[p].fp += 1;
                per_class[a].fn_ += 1;
            }
        }
        for c in &mut per_class {
            c.tn = n - c.tp - c.fp - c.fn_;
        }
        Ok(Self { per_class, samples: n })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub fpr: f64,
    pub fnr: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Macro averages over classes; accuracy is the fraction of correct samples.
pub fn classification_metrics(counts: &ConfusionCounts) -> Result<ClassificationMetrics> {
    if counts.samples == 0 || counts.per_class.is_empty() {
        return Err(Error::EmptyInput("confusion counts"));
    }
    let k = counts.per_class.len() as f64;
    let mut m = ClassificationMetrics {
        accuracy: ratio(counts.per_class.iter().map(|c| c.tp).sum(), counts.samples),
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        specificity: 0.0,
        fpr: 0.0,
        fnr: 0.0,
    };
    for c in &counts.per_class {
        let p = ratio(c.tp, c.tp + c.fp);
        let r = ratio(c.tp, c.tp + c.fn_);
        m.precision += p / k;
        m.recall += r / k;
        m.f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 } / k;
        m.specificity += ratio(c.tn, c.tn + c.fp) / k;
        m.fpr += ratio(c.fp, c.tn + c.fp) / k;
        m.fnr += ratio(c.fn_, c.tp + c.fn_) / k;
    }
    Ok(m)
}
