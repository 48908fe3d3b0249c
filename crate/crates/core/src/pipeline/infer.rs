use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::analysis::{analyze, image_artifacts, select_columns, ImageAnalysis};
use super::{FileRecord, Layout, PipelineConfig, Split, Timings};
use crate::captioner::{CaptionModel, ClassPrototypes, ImageArtifacts};
use crate::dataset::Dataset;
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::foa::MaskFile;
use crate::imgproc::Image;
use crate::kgraph::CrfModel;
use crate::metrics::{
    bleu, classification_metrics, detection_metrics, meteor, ConfusionCounts, EvalReport, GroundTruthBox, ScoredBox,
};
use crate::textkw::Encoder;

/// Frozen models of a training run.
pub struct Predictor {
    pub layout: Layout,
    pub cfg: PipelineConfig,
    pub detector: DetectorModel,
    pub crf: CrfModel,
    pub mask: MaskFile,
    pub encoder: Encoder,
    pub model: CaptionModel,
    selected: Vec<usize>,
}

impl Predictor {
    /// Accepts a run directory or the `model.xmq` inside one.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let root = if path.is_file() {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        } else {
            path.to_path_buf()
        };
        let layout = Layout::new(root);
        let model_path = layout.model();
        if !model_path.is_file() {
            return Err(Error::Validation(format!(
                "no trained model at {}; run `xmq train --config <config.json> --out {}` first",
                model_path.display(),
                layout.root.display()
            )));
        }
        let cfg: PipelineConfig = crate::io::read_json(layout.config())?;
        let mask: MaskFile = crate::io::read_json(layout.mask())?;
        let selected = mask.mask().selected();
        Ok(Self {
            detector: DetectorModel::load(layout.detector())?,
            crf: crate::io::read_json(layout.crf())?,
            encoder: Encoder::load(layout.encoder())?,
            model: CaptionModel::load(&model_path)?,
            mask,
            selected,
            cfg,
            layout,
        })
    }

    /// Files the predictor depends on, with their hashes.
    pub fn model_files(&self) -> Result<Vec<FileRecord>> {
        [
            self.layout.config(),
            self.layout.detector(),
            self.layout.crf(),
            self.layout.mask(),
            self.layout.encoder(),
            self.layout.model(),
        ]
        .iter()
        .map(|p| {
            Ok(FileRecord {
                path: p.display().to_string(),
                sha256: crate::io::sha256_file(p)?,
            })
        })
        .collect()
    }

    pub fn analyze(&self, img: &Image) -> Result<(ImageAnalysis, ImageArtifacts)> {
        let a = analyze(img, &self.detector, &self.crf, &self.cfg.analysis())?;
        let global = select_columns(&a.global, &self.selected);
        let art = image_artifacts(img, &a.detections, global, self.cfg.captioner.max_objects)?;
        Ok((a, art))
    }

    /// Trained answer classes plus every held-out class, the latter
    /// represented by encoder word vectors.
    pub fn prototypes(&self) -> Result<ClassPrototypes> {
        let mut p = self.model.answer_prototypes();
        for name in &self.cfg.held_out_answers {
            if p.names.contains(name) {
                continue;
            }
            if !self.encoder.contains(name) {
                warn!("held-out class {name:?} is unknown to the text encoder");
            }
            p.names.push(name.clone());
            p.vectors.push(self.encoder.word_vector(name).to_vec());
        }
        ClassPrototypes::new(p.names, p.vectors)
    }

    pub fn caption(&self, art: &ImageArtifacts) -> Result<String> {
        Ok(self.model.generate_caption(art)?.join(" "))
    }

    pub fn answer(&self, art: &ImageArtifacts, question: &str, protos: &ClassPrototypes) -> Result<String> {
        self.model.answer_vqa(art, question, protos)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "text", rename_all = "kebab-case")]
pub enum Prediction {
    Caption(String),
    Answer(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub image: String,
    pub question: Option<String>,
    pub prediction: Prediction,
    /// Models used, then every intermediate written for this image.
    pub provenance: Vec<FileRecord>,
}

/// Full test-time flow on one image; intermediates and `result.json` go
/// to `out_dir`. A question switches to VQA mode.
pub fn run_inference(
    run_dir: impl AsRef<Path>,
    image_path: impl AsRef<Path>,
    question: Option<&str>,
    out_dir: impl AsRef<Path>,
) -> Result<InferenceRecord> {
    let p = Predictor::load(run_dir)?;
    let image_path = image_path.as_ref();
    let out = out_dir.as_ref();
    let img = Image::load(image_path)?;
    let (a, art) = p
        .analyze(&img)
        .map_err(|e| e.in_stage("inference", image_path.display().to_string()))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let mut put = |name: &str| {
        let path = out.join(name);
        written.push(path.clone());
        path
    };
    a.preprocessed.save(put("preprocessed.png"))?;
    crate::io::write_json(put("detections.json"), &a.detections)?;
    a.skeleton.save(put("skeleton.png"))?;
    for (k, s) in a.object_skeletons.iter().enumerate() {
        s.save(put(&format!("det{k}_skeleton.png")))?;
    }
    a.graph.save(put("graph.json"))?;
    let mut table = FeatureTable::new(crate::features::schema());
    for f in &a.object_features {
        table.push(f)?;
    }
    table.write_csv(put("features.csv"))?;
    crate::io::write_json(put("artifacts.json"), &art)?;
    let prediction = match question {
        Some(q) => Prediction::Answer(p.answer(&art, q, &p.prototypes()?)?),
        None => Prediction::Caption(p.caption(&art)?),
    };
    let mut provenance = vec![FileRecord {
        path: image_path.display().to_string(),
        sha256: crate::io::sha256_file(image_path)?,
    }];
    provenance.extend(p.model_files()?);
    for w in &written {
        provenance.push(FileRecord {
            path: w.display().to_string(),
            sha256: crate::io::sha256_file(w)?,
        });
    }
    let record = InferenceRecord {
        image: image_path.display().to_string(),
        question: question.map(str::to_string),
        prediction,
        provenance,
    };
    crate::io::write_json(out.join("result.json"), &record)?;
    Ok(record)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionSample {
    pub image_id: u64,
    pub generated: String,
    pub reference: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub report: EvalReport,
    pub images: usize,
    pub questions: usize,
    /// Accuracy over every held-out question.
    pub vqa_accuracy: Option<f64>,
    /// Accuracy over questions whose answer is a held-out class.
    pub zero_shot_accuracy: Option<f64>,
    pub zero_shot_questions: usize,
    /// `1 / |answer classes|`.
    pub chance_floor: f64,
    pub captions: Vec<CaptionSample>,
}

/// Evaluates a run on its test split through the full inference flow.
/// `dataset` defaults to reloading the configured source.
pub fn evaluate_run(run_dir: impl AsRef<Path>, dataset: Option<&Dataset>) -> Result<EvalSummary> {
    let p = Predictor::load(run_dir.as_ref())?;
    let loaded;
    let ds = match dataset {
        Some(d) => d,
        None => {
            loaded = p.cfg.data.load()?;
            &loaded
        }
    };
    let split: Split = crate::io::read_json(p.layout.split())?;
    let protos = p.prototypes()?;
    let held = &p.cfg.held_out_answers;
    let mut s = EvalSummary {
        chance_floor: 1.0 / protos.len() as f64,
        ..Default::default()
    };
    let (mut b, mut met) = ([0.0; 4], 0.0);
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    let (mut predicted, mut actual) = (Vec::new(), Vec::new());
    let (mut correct, mut zsl_correct) = (0usize, 0usize);
    let mut timings = Timings::default();
    for id in &split.test {
        let sample = ds
            .samples
            .iter()
            .find(|x| x.record.id == *id)
            .ok_or_else(|| Error::Validation(format!("test image {id} is not in the dataset")))?;
        let (a, art) = p
            .analyze(&sample.image)
            .map_err(|e| e.in_stage("evaluate", &sample.record.file_name))?;
        timings.ggt.insert(*id, a.ggt);
        for d in &a.detections {
            preds.push(ScoredBox {
                image_id: *id,
                category_id: d.class_id,
                bbox: d.rect.to_array(),
                score: d.score,
            });
        }
        for (o, c) in sample.objects.iter().zip(sample.class_indices(&ds.categories)) {
            gts.push(GroundTruthBox {
                image_id: *id,
                category_id: c,
                bbox: o.bbox,
            });
        }
        if !sample.captions.is_empty() {
            let gen = p.caption(&art)?;
            let gw: Vec<&str> = gen.split_whitespace().collect();
            let mut best = ([0.0f64; 4], 0.0f64);
            for r in &sample.captions {
                let rw: Vec<&str> = r.caption.split_whitespace().collect();
                for (n, slot) in best.0.iter_mut().enumerate() {
                    *slot = slot.max(bleu(&gw, &rw, n + 1).score);
                }
                best.1 = best.1.max(meteor(&gw, &rw));
            }
            for n in 0..4 {
                b[n] += best.0[n];
            }
            met += best.1;
            s.captions.push(CaptionSample {
                image_id: *id,
                generated: gen,
                reference: sample.captions[0].caption.clone(),
            });
            s.images += 1;
        }
        for q in &sample.questions {
            let ans = p.answer(&art, &q.question, &protos)?;
            s.questions += 1;
            let ok = ans == q.answer;
            correct += ok as usize;
            if held.contains(&q.answer) {
                s.zero_shot_questions += 1;
                zsl_correct += ok as usize;
            }
            if let Some(gi) = protos.names.iter().position(|n| *n == q.answer) {
                predicted.push(
                    protos
                        .names
                        .iter()
                        .position(|n| *n == ans)
                        .expect("answers are classes"),
                );
                actual.push(gi);
            }
        }
    }
    let r = &mut s.report;
    if s.images > 0 {
        let n = s.images as f64;
        r.bleu1 = Some(b[0] / n);
        r.bleu2 = Some(b[1] / n);
        r.bleu3 = Some(b[2] / n);
        r.bleu4 = Some(b[3] / n);
        r.meteor = Some(met / n);
    }
    if !gts.is_empty() {
        r.set_detection(&detection_metrics(&preds, &gts, 0.5), &ds.category_names());
    }
    if !actual.is_empty() {
        let counts = ConfusionCounts::from_labels(&predicted, &actual, protos.len())?;
        r.set_classification(&classification_metrics(&counts)?);
    }
    r.ggt = timings.mean_ggt();
    if s.questions > 0 {
        s.vqa_accuracy = Some(correct as f64 / s.questions as f64);
    }
    if s.zero_shot_questions > 0 {
        s.zero_shot_accuracy = Some(zsl_correct as f64 / s.zero_shot_questions as f64);
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionPrediction {
    pub image_id: u64,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerPrediction {
    pub image_id: u64,
    pub question: String,
    pub answer: String,
}

/// Prediction file scored by [`evaluate_predictions`]; every part optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Predictions {
    pub captions: Vec<CaptionPrediction>,
    pub answers: Vec<AnswerPrediction>,
    pub detections: Vec<ScoredBox>,
}

/// Scores predictions against gold annotations. Captions and answers for
/// unknown images or questions are validation errors.
pub fn evaluate_predictions(pred: &Predictions, gold: &Dataset) -> Result<EvalReport> {
    let find = |id: u64| {
        gold.samples
            .iter()
            .find(|s| s.record.id == id)
            .ok_or_else(|| Error::Validation(format!("prediction references unknown image {id}")))
    };
    let mut r = EvalReport::default();
    if !pred.captions.is_empty() {
        let mut sums = [0.0; 5];
        for c in &pred.captions {
            let s = find(c.image_id)?;
            let gw: Vec<&str> = c.caption.split_whitespace().collect();
            let mut best = [0.0f64; 5];
            for rf in &s.captions {
                let rw: Vec<&str> = rf.caption.split_whitespace().collect();
                for n in 0..4 {
                    best[n] = best[n].max(bleu(&gw, &rw, n + 1).score);
                }
                best[4] = best[4].max(meteor(&gw, &rw));
            }
            for (s, b) in sums.iter_mut().zip(best) {
                *s += b;
            }
        }
        let n = pred.captions.len() as f64;
        r.bleu1 = Some(sums[0] / n);
        r.bleu2 = Some(sums[1] / n);
        r.bleu3 = Some(sums[2] / n);
        r.bleu4 = Some(sums[3] / n);
        r.meteor = Some(sums[4] / n);
    }
    if !pred.answers.is_empty() {
        fn index(a: &str, names: &mut Vec<String>) -> usize {
            names.iter().position(|c| c == a).unwrap_or_else(|| {
                names.push(a.to_string());
                names.len() - 1
            })
        }
        let mut names: Vec<String> = Vec::new();
        let (mut p, mut g) = (Vec::new(), Vec::new());
        for a in &pred.answers {
            let s = find(a.image_id)?;
            let q =
                s.questions.iter().find(|q| q.question == a.question).ok_or_else(|| {
                    Error::Validation(format!("image {} has no question {:?}", a.image_id, a.question))
                })?;
            g.push(index(&q.answer, &mut names));
            p.push(index(&a.answer, &mut names));
        }
        let counts = ConfusionCounts::from_labels(&p, &g, names.len())?;
        r.set_classification(&classification_metrics(&counts)?);
    }
    if !pred.detections.is_empty() {
        let mut gts = Vec::new();
        for s in &gold.samples {
            for (o, c) in s.objects.iter().zip(s.class_indices(&gold.categories)) {
                gts.push(GroundTruthBox {
                    image_id: s.record.id,
                    category_id: c,
                    bbox: o.bbox,
                });
            }
        }
        r.set_detection(&detection_metrics(&pred.detections, &gts, 0.5), &gold.category_names());
    }
    Ok(r)
}
