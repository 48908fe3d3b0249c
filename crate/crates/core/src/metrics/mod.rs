//! Evaluation metrics: pixel error, detection AP, macro classification
//! scores, BLEU, METEOR and wall-clock timing.

mod classification;
mod detection;
mod text;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use classification::{classification_metrics, ClassCounts, ClassificationMetrics, ConfusionCounts};
pub use detection::{average_precision, detection_metrics, DetectionMetrics, GroundTruthBox, ScoredBox};
pub use text::{bleu, meteor, BleuScore};

use crate::error::{Error, Result};
use crate::imgproc::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageErrors {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
}

pub fn image_errors(a: &Image, b: &Image) -> Result<ImageErrors> {
    if (a.width(), a.height(), a.channels()) != (b.width(), b.height(), b.channels()) {
        return Err(Error::invalid(format!(
            "image dimensions differ: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    let n = a.data().len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x as f64 - y as f64;
        abs += d.abs();
        sq += d * d;
    }
    let mse = sq / n;
    Ok(ImageErrors {
        mae: abs / n,
        mse,
        rmse: mse.sqrt(),
    })
}

/// Peak signal-to-noise ratio in dB for 8-bit data; infinite for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let e = image_errors(a, b)?;
    Ok(10.0 * (255.0f64 * 255.0 / e.mse).log10())
}

/// Monotonic stopwatch.
#[derive(Clone, Copy, Debug)]
pub struct Timer(Instant);

impl Timer {
    pub fn start() -> Self {
        Self(Instant::now())
    }

    /// Elapsed seconds, truncated to whole microseconds.
    pub fn elapsed_secs(&self) -> f64 {
        self.0.elapsed().as_micros() as f64 * 1e-6
    }
}

/// Runs `op` and returns its result with the elapsed seconds.
pub fn timed<R>(op: impl FnOnce() -> R) -> (R, f64) {
    let t = Timer::start();
    let r = op();
    (r, t.elapsed_secs())
}

/// One evaluation run; absent measurements serialize as `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub specificity: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub bleu1: Option<f64>,
    pub bleu2: Option<f64>,
    pub bleu3: Option<f64>,
    pub bleu4: Option<f64>,
    pub meteor: Option<f64>,
    pub map: Option<f64>,
    pub avp: BTreeMap<String, f64>,
    pub iou: Option<f64>,
    pub mae: Option<f64>,
    pub mse: Option<f64>,
    pub rmse: Option<f64>,
    /// Mean graph generation time in seconds.
    pub ggt: Option<f64>,
}

impl EvalReport {
    pub fn set_classification(&mut self, m: &ClassificationMetrics) {
        self.accuracy = Some(m.accuracy);
        self.precision = Some(m.precision);
        self.recall = Some(m.recall);
        self.f1 = Some(m.f1);
        self.specificity = Some(m.specificity);
        self.fpr = Some(m.fpr);
        self.fnr = Some(m.fnr);
    }

    pub fn set_detection(&mut self, m: &DetectionMetrics, class_names: &[String]) {
        self.map = Some(m.map);
        self.iou = Some(m.mean_iou);
        self.avp = m
            .avp
            .iter()
            .map(|(&c, &ap)| {
                let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
                (name, ap)
            })
            .collect();
    }

    pub fn set_image_errors(&mut self, e: &ImageErrors) {
        self.mae = Some(e.mae);
        self.mse = Some(e.mse);
        self.rmse = Some(e.rmse);
    }

    /// Corpus means of per-sentence BLEU-1..4 and METEOR.
    pub fn set_captions<S: AsRef<str>>(&mut self, pairs: &[(Vec<S>, Vec<S>)]) {
        if pairs.is_empty() {
            return;
        }
        let n = pairs.len() as f64;
        let mut b = [0.0; 4];
        let mut m = 0.0;
        for (cand, reference) in pairs {
            let c: Vec<&str> = cand.iter().map(AsRef::as_ref).collect();
            let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
            for (k, slot) in b.iter_mut().enumerate() {
                *slot += bleu(&c, &r, k + 1).score;
            }
            m += meteor(&c, &r);
        }
        self.bleu1 = Some(b[0] / n);
        self.bleu2 = Some(b[1] / n);
        self.bleu3 = Some(b[2] / n);
        self.bleu4 = Some(b[3] / n);
        self.meteor = Some(m / n);
    }
}
