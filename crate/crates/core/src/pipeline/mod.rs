//! End-to-end orchestration: dataset ingestion, the eight training stages
//! with persisted artifacts and a hashed manifest, and test-time inference.

mod analysis;
mod infer;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use analysis::{
    analyze, image_artifacts, image_graph, image_skeleton, mean_row, object_row, object_skeleton, polarity_gray,
    rescale_detections, select_columns, AnalysisSettings, ImageAnalysis,
};
pub use infer::{
    evaluate_predictions, evaluate_run, run_inference, AnswerPrediction, CaptionPrediction, CaptionSample, EvalSummary,
    InferenceRecord, Prediction, Predictions, Predictor,
};

use crate::captioner::{self, CaptionModel, Example, FeatureStats, ModelConfig, TrainConfig, Vocab};
use crate::dataset::{generate_synthetic, ingest_coco_subset, split_indices, Dataset, Sample};
use crate::detector::{self, Detection, DetectorConfig, DetectorModel, DetectorTrainConfig, TrainingExample};
use crate::error::{Error, Result};
use crate::features::{read_labels_csv, schema, write_labels_csv, FeatureTable, FeatureVector};
use crate::foa::{select_features, write_trace_csv, FitnessData, FoaConfig, MaskFile};
use crate::geom::Rect;
use crate::imgproc::{preprocess, Image, PreprocessConfig};
use crate::kgraph::{CrfModel, KnowledgeGraph};
use crate::skeleton::{Mask, ThresholdPolicy};
use crate::textkw::{words, Encoder, EncoderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic {
        images: usize,
        seed: u64,
    },
    /// A directory holding `annotations.json` and `images/`.
    Directory {
        path: PathBuf,
        limit: Option<usize>,
    },
    Coco {
        annotations: PathBuf,
        images: PathBuf,
        limit: usize,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic { images, seed } => generate_synthetic(*images, *seed),
            DataSource::Directory { path, limit } => Dataset::load_dir(path, *limit),
            DataSource::Coco {
                annotations,
                images,
                limit,
            } => ingest_coco_subset(annotations, images, *limit),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Seeds the split and every stage.
    pub seed: u64,
    pub data: DataSource,
    pub out_dir: PathBuf,
    pub train_fraction: f64,
    pub preprocess: PreprocessConfig,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    pub threshold: ThresholdPolicy,
    /// Smallest skeleton component that becomes a graph region.
    pub min_skeleton_pixels: usize,
    pub crf_prior_weight: f64,
    pub foa: FoaConfig,
    /// Cap on labelled objects handed to feature selection.
    pub foa_max_rows: usize,
    pub encoder: EncoderConfig,
    pub captioner: ModelConfig,
    pub captioner_train: TrainConfig,
    /// Answer words withheld from captioner training entirely.
    pub held_out_answers: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataSource::Synthetic { images: 625, seed: 21 },
            out_dir: PathBuf::from("run"),
            train_fraction: 0.8,
            preprocess: PreprocessConfig::default(),
            detector: DetectorConfig::default(),
            detector_train: DetectorTrainConfig::default(),
            threshold: ThresholdPolicy::Otsu,
            min_skeleton_pixels: 4,
            crf_prior_weight: 2.0,
            foa: FoaConfig::default(),
            foa_max_rows: 300,
            encoder: EncoderConfig::default(),
            captioner: ModelConfig::default(),
            captioner_train: TrainConfig::default(),
            held_out_answers: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::read_json(path)
    }

    /// Copy whose stage seeds all derive from `seed`.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.detector_train.seed = self.seed;
        c.foa.seed = self.seed.wrapping_add(1);
        c.captioner_train.seed = self.seed.wrapping_add(2);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction must lie in (0, 1)"));
        }
        if self.preprocess.width != self.detector.input || self.preprocess.height != self.detector.input {
            return Err(Error::invalid("preprocessed images must match the detector input side"));
        }
        self.detector.validate()?;
        self.foa.validate()?;
        self.captioner.validate()?;
        if self.foa_max_rows < 4 {
            return Err(Error::invalid("foa_max_rows must be at least 4"));
        }
        Ok(())
    }

    fn analysis(&self) -> AnalysisSettings {
        AnalysisSettings {
            preprocess: self.preprocess.clone(),
            threshold: self.threshold,
            min_skeleton_pixels: self.min_skeleton_pixels,
            max_objects: self.captioner.max_objects,
        }
    }

    /// Hash of the configuration with the output directory blanked.
    fn fingerprint(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(crate::io::sha256_hex(&serde_json::to_vec(&c)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Preprocess,
    DetectTrain,
    Skeleton,
    KGraph,
    Features,
    Foa,
    TextKw,
    Captioner,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Preprocess,
        Stage::DetectTrain,
        Stage::Skeleton,
        Stage::KGraph,
        Stage::Features,
        Stage::Foa,
        Stage::TextKw,
        Stage::Captioner,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::DetectTrain => "detect-train",
            Stage::Skeleton => "skeleton",
            Stage::KGraph => "kgraph",
            Stage::Features => "features",
            Stage::Foa => "foa",
            Stage::TextKw => "textkw-train",
            Stage::Captioner => "captioner-train",
        }
    }
}

/// File locations inside a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
    pub fn preprocessed(&self, stem: &str) -> PathBuf {
        self.root.join("preprocess").join(format!("{stem}.png"))
    }
    pub fn detector(&self) -> PathBuf {
        self.root.join("detect").join("detector.xmq")
    }
    pub fn detector_trace(&self) -> PathBuf {
        self.root.join("detect").join("trace.csv")
    }
    pub fn detections(&self) -> PathBuf {
        self.root.join("detect").join("detections.json")
    }
    pub fn skeleton(&self, stem: &str) -> PathBuf {
        self.root.join("skeleton").join(format!("{stem}.png"))
    }
    pub fn detection_skeleton(&self, stem: &str, k: usize) -> PathBuf {
        self.root.join("skeleton").join(format!("{stem}_det{k}.png"))
    }
    pub fn object_skeleton(&self, stem: &str, k: usize) -> PathBuf {
        self.root.join("skeleton").join(format!("{stem}_obj{k}.png"))
    }
    pub fn crf(&self) -> PathBuf {
        self.root.join("kgraph").join("crf.json")
    }
    pub fn graph(&self, stem: &str) -> PathBuf {
        self.root.join("kgraph").join(format!("{stem}.json"))
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("features").join("features.csv")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("features").join("labels.csv")
    }
    pub fn label_names(&self) -> PathBuf {
        self.root.join("features").join("label_names.json")
    }
    pub fn image_features(&self) -> PathBuf {
        self.root.join("features").join("image_features.csv")
    }
    pub fn mask(&self) -> PathBuf {
        self.root.join("foa").join("mask.json")
    }
    pub fn foa_trace(&self) -> PathBuf {
        self.root.join("foa").join("trace.csv")
    }
    pub fn encoder(&self) -> PathBuf {
        self.root.join("textkw").join("encoder.xmqe")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.xmq")
    }
    pub fn captioner_report(&self) -> PathBuf {
        self.root.join("captioner").join("report.json")
    }

    fn relative(&self, p: &Path) -> String {
        let rel = p.strip_prefix(&self.root).unwrap_or(p);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }
}

/// Stable file stem of an image inside a run.
pub fn stem(sample: &Sample) -> String {
    format!("img{:06}", sample.record.id)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub outputs: Vec<FileRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_sha256: String,
    pub dataset_sha256: String,
    pub split_sha256: String,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::read_json(path)
    }
}

/// Re-hashes every recorded output; a mismatch or missing file fails with
/// the stale paths.
pub fn verify_manifest(run_dir: impl AsRef<Path>) -> Result<Manifest> {
    let layout = Layout::new(run_dir.as_ref());
    let manifest = Manifest::load(layout.manifest())?;
    let mut stale = Vec::new();
    for s in &manifest.stages {
        for f in &s.outputs {
            match crate::io::sha256_file(layout.root.join(&f.path)) {
                Ok(h) if h == f.sha256 => {}
                _ => stale.push(format!("{} ({})", f.path, s.stage)),
            }
        }
    }
    if stale.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::Validation(format!(
            "stale or missing artifacts: {}",
            stale.join(", ")
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

/// Detections of one image in original-image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: u64,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Seconds per stage, in run order.
    pub stages: BTreeMap<String, f64>,
    /// Graph generation time per image id.
    pub ggt: BTreeMap<u64, f64>,
}

impl Timings {
    pub fn mean_ggt(&self) -> Option<f64> {
        (!self.ggt.is_empty()).then(|| self.ggt.values().sum::<f64>() / self.ggt.len() as f64)
    }
}

/// Joint `"{color} {shape}"` label of an annotated object.
pub fn joint_label(sample: &Sample, k: usize, categories: &[String]) -> String {
    let o = &sample.objects[k];
    let idx = o.category_id as usize;
    let shape = categories
        .get(idx.wrapping_sub(1))
        .cloned()
        .unwrap_or_else(|| format!("class{idx}"));
    format!("{} {shape}", o.color.as_deref().unwrap_or("none"))
}

fn dataset_hash(ds: &Dataset) -> Result<String> {
    let mut h = Sha256::new();
    for s in &ds.samples {
        h.update(serde_json::to_vec(&(&s.record, &s.objects, &s.captions, &s.questions))?);
        h.update([s.image.width() as u8, s.image.height() as u8, s.image.channels() as u8]);
        h.update(s.image.data());
    }
    h.update(serde_json::to_vec(&ds.categories)?);
    Ok(hex::encode(h.finalize()))
}

/// The training run over one dataset.
pub struct Run<'a> {
    pub cfg: PipelineConfig,
    pub layout: Layout,
    pub dataset: &'a Dataset,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    timings: Timings,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &PipelineConfig, dataset: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if dataset.samples.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        let cfg = cfg.seeded();
        let (train, test) = split_indices(dataset.len(), cfg.train_fraction, cfg.seed)?;
        if train.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        Ok(Self {
            layout: Layout::new(&cfg.out_dir),
            cfg,
            dataset,
            train,
            test,
            timings: Timings::default(),
        })
    }

    fn classes(&self) -> Vec<String> {
        self.dataset.category_names()
    }

    fn samples(&self) -> impl Iterator<Item = &'a Sample> {
        self.dataset.samples.iter()
    }

    fn train_samples(&self) -> impl Iterator<Item = &'a Sample> + '_ {
        self.train.iter().map(|&i| &self.dataset.samples[i])
    }

    fn is_train(&self) -> Vec<bool> {
        let mut v = vec![false; self.dataset.len()];
        for &i in &self.train {
            v[i] = true;
        }
        v
    }

    /// Runs one stage, reading its inputs from earlier stage outputs.
    pub fn run_stage(&mut self, stage: Stage) -> Result<Vec<PathBuf>> {
        info!("stage {} starting", stage.name());
        let (out, secs) = crate::metrics::timed(|| match stage {
            Stage::Preprocess => self.preprocess(),
            Stage::DetectTrain => self.detect_train(),
            Stage::Skeleton => self.skeleton(),
            Stage::KGraph => self.kgraph(),
            Stage::Features => self.features(),
            Stage::Foa => self.foa(),
            Stage::TextKw => self.textkw(),
            Stage::Captioner => self.captioner(),
        });
        self.timings.stages.insert(stage.name().to_string(), secs);
        info!("stage {} finished in {secs:.2}s", stage.name());
        out.map_err(|e| e.in_stage(stage.name(), "run"))
    }

    fn preprocess(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for s in self.samples() {
            let p = self.layout.preprocessed(&stem(s));
            preprocess(&s.image, &self.cfg.preprocess)
                .and_then(|img| img.save(&p))
                .map_err(|e| e.in_stage("preprocess", &s.record.file_name))?;
            out.push(p);
        }
        Ok(out)
    }

    fn load_preprocessed(&self, s: &Sample, stage: &'static str) -> Result<Image> {
        let p = self.layout.preprocessed(&stem(s));
        Image::load(&p).map_err(|e| e.in_stage(stage, p.display().to_string()))
    }

    fn detect_train(&self) -> Result<Vec<PathBuf>> {
        const STAGE: &str = "detect-train";
        let mut data = Vec::with_capacity(self.train.len());
        for s in self.train_samples() {
            let image = self.load_preprocessed(s, STAGE)?;
            let kx = image.width() as f64 / s.image.width() as f64;
            let ky = image.height() as f64 / s.image.height() as f64;
            let idx = s.class_indices(&self.dataset.categories);
            let boxes = s
                .objects
                .iter()
                .zip(idx)
                .map(|(o, c)| {
                    (
                        Rect::new(o.bbox[0] * kx, o.bbox[1] * ky, o.bbox[2] * kx, o.bbox[3] * ky),
                        c,
                    )
                })
                .collect();
            data.push(TrainingExample { image, boxes });
        }
        let mut model = DetectorModel::init(self.cfg.detector.clone(), self.classes(), self.cfg.seed.wrapping_add(3))?;
        let trace = detector::train(&mut model, &data, &self.cfg.detector_train)?;
        model.round_to_f32();
        model.save(self.layout.detector())?;
        write_trace_csv(self.layout.detector_trace(), &trace)?;
        let mut all = Vec::with_capacity(self.dataset.len());
        for s in self.samples() {
            let pre = self.load_preprocessed(s, STAGE)?;
            let raw = model.detect(&pre).map_err(|e| e.in_stage(STAGE, &s.record.file_name))?;
            all.push(ImageDetections {
                image_id: s.record.id,
                detections: rescale_detections(&raw, (pre.width(), pre.height()), (s.image.width(), s.image.height())),
            });
        }
        crate::io::write_json(self.layout.detections(), &all)?;
        Ok(vec![
            self.layout.detector(),
            self.layout.detector_trace(),
            self.layout.detections(),
        ])
    }

    fn load_detections(&self, stage: &'static str) -> Result<Vec<ImageDetections>> {
        let p = self.layout.detections();
        let all: Vec<ImageDetections> =
            crate::io::read_json(&p).map_err(|e| e.in_stage(stage, p.display().to_string()))?;
        if all.len() != self.dataset.len() || all.iter().zip(self.samples()).any(|(d, s)| d.image_id != s.record.id) {
            return Err(Error::Validation("detections do not match the dataset".into())
                .in_stage(stage, p.display().to_string()));
        }
        Ok(all)
    }

    fn skeleton(&self) -> Result<Vec<PathBuf>> {
        const STAGE: &str = "skeleton";
        let dets = self.load_detections(STAGE)?;
        let train = self.is_train();
        let policy = self.cfg.threshold;
        let mut out = Vec::new();
        for (i, (s, d)) in self.samples().zip(&dets).enumerate() {
            let st = stem(s);
            let wrap = |e: Error| e.in_stage(STAGE, &s.record.file_name);
            let p = self.layout.skeleton(&st);
            image_skeleton(&s.image, policy)
                .and_then(|m| m.save(&p))
                .map_err(wrap)?;
            out.push(p);
            for (k, det) in d.detections.iter().enumerate() {
                let p = self.layout.detection_skeleton(&st, k);
                object_skeleton(&s.image, &det.rect, policy)
                    .and_then(|m| m.save(&p))
                    .map_err(wrap)?;
                out.push(p);
            }
            if train[i] {
                for (k, o) in s.objects.iter().enumerate() {
                    let p = self.layout.object_skeleton(&st, k);
                    object_skeleton(&s.image, &o.rect(), policy)
                        .and_then(|m| m.save(&p))
                        .map_err(wrap)?;
                    out.push(p);
                }
            }
        }
        Ok(out)
    }

    fn load_mask(&self, p: &Path, stage: &'static str) -> Result<Mask> {
        Mask::load(p).map_err(|e| e.in_stage(stage, p.display().to_string()))
    }

    fn kgraph(&mut self) -> Result<Vec<PathBuf>> {
        const STAGE: &str = "kgraph";
        let dets = self.load_detections(STAGE)?;
        let crf = CrfModel::with_class_prior(&self.classes(), self.cfg.crf_prior_weight);
        crate::io::write_json(self.layout.crf(), &crf)?;
        let mut out = vec![self.layout.crf()];
        for (s, d) in self.dataset.samples.iter().zip(&dets) {
            let st = stem(s);
            let skel = self.load_mask(&self.layout.skeleton(&st), STAGE)?;
            let (g, secs) = image_graph(&crf, &s.image, &d.detections, &skel, self.cfg.min_skeleton_pixels)
                .map_err(|e| e.in_stage(STAGE, &s.record.file_name))?;
            self.timings.ggt.insert(s.record.id, secs);
            let p = self.layout.graph(&st);
            g.save(&p)?;
            out.push(p);
        }
        Ok(out)
    }

    fn load_graph(&self, s: &Sample, stage: &'static str) -> Result<KnowledgeGraph> {
        let p = self.layout.graph(&stem(s));
        KnowledgeGraph::load(&p).map_err(|e| e.in_stage(stage, p.display().to_string()))
    }

    fn features(&self) -> Result<Vec<PathBuf>> {
        const STAGE: &str = "features";
        let dets = self.load_detections(STAGE)?;
        let train = self.is_train();
        let classes = self.classes();
        let names = schema();
        let mut objects = FeatureTable::new(names.clone());
        let mut images = FeatureTable::new(names.clone());
        let mut label_names: Vec<String> = Vec::new();
        let mut labels = Vec::new();
        for (i, (s, d)) in self.samples().zip(&dets).enumerate() {
            let st = stem(s);
            let graph = self.load_graph(s, STAGE)?;
            let wrap = |e: Error| e.in_stage(STAGE, &s.record.file_name);
            let mut rows: Vec<FeatureVector> = Vec::with_capacity(d.detections.len());
            for (k, det) in d.detections.iter().enumerate() {
                let skel = self.load_mask(&self.layout.detection_skeleton(&st, k), STAGE)?;
                rows.push(object_row(&s.image, &det.rect, &skel, &graph).map_err(wrap)?);
            }
            images.rows.push(mean_row(&rows));
            if train[i] {
                for (k, o) in s.objects.iter().enumerate() {
                    let skel = self.load_mask(&self.layout.object_skeleton(&st, k), STAGE)?;
                    objects.push(&object_row(&s.image, &o.rect(), &skel, &graph).map_err(wrap)?)?;
                    let name = joint_label(s, k, &classes);
                    let id = match label_names.iter().position(|n| *n == name) {
                        Some(id) => id,
                        None => {
                            label_names.push(name);
                            label_names.len() - 1
                        }
                    };
                    labels.push(id);
                }
            }
        }
        objects.write_csv(self.layout.features())?;
        write_labels_csv(self.layout.labels(), &labels)?;
        crate::io::write_json(self.layout.label_names(), &label_names)?;
        images.write_csv(self.layout.image_features())?;
        Ok(vec![
            self.layout.features(),
            self.layout.labels(),
            self.layout.label_names(),
            self.layout.image_features(),
        ])
    }

    fn foa(&self) -> Result<Vec<PathBuf>> {
        const STAGE: &str = "foa";
        let fp = self.layout.features();
        let table = FeatureTable::read_csv(&fp).map_err(|e| e.in_stage(STAGE, fp.display().to_string()))?;
        let lp = self.layout.labels();
        let labels = read_labels_csv(&lp).map_err(|e| e.in_stage(STAGE, lp.display().to_string()))?;
        if labels.len() != table.len() {
            return Err(Error::Validation("labels and feature rows differ in count".into()));
        }
        let mut idx: Vec<usize> = (0..table.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(5)));
        idx.truncate(self.cfg.foa_max_rows);
        idx.sort_unstable();
        let x: Vec<Vec<f64>> = idx.iter().map(|&i| table.rows[i].clone()).collect();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let data = FitnessData::split(&x, &y, self.cfg.foa.val_fraction, self.cfg.foa.seed)?;
        let result = select_features(&self.cfg.foa, &data)?;
        crate::io::write_json(self.layout.mask(), &MaskFile::new(&table.names, &result))?;
        write_trace_csv(self.layout.foa_trace(), &result.trace)?;
        Ok(vec![self.layout.mask(), self.layout.foa_trace()])
    }

    fn corpus(&self) -> Vec<String> {
        let mut c = Vec::new();
        for s in self.train_samples() {
            c.extend(s.captions.iter().map(|a| a.caption.clone()));
            c.extend(s.questions.iter().map(|q| format!("{} {}", q.question, q.answer)));
        }
        c
    }

    fn textkw(&self) -> Result<Vec<PathBuf>> {
        let enc = Encoder::train(&self.corpus(), &self.cfg.encoder)?;
        enc.save(self.layout.encoder())?;
        Ok(vec![self.layout.encoder()])
    }

    fn captioner(&self) -> Result<Vec<PathBuf>> {
        const STAGE: &str = "captioner-train";
        let ep = self.layout.encoder();
        let enc = Encoder::load(&ep).map_err(|e| e.in_stage(STAGE, ep.display().to_string()))?;
        let mp = self.layout.mask();
        let mask: MaskFile = crate::io::read_json(&mp).map_err(|e| e.in_stage(STAGE, mp.display().to_string()))?;
        let fp = self.layout.image_features();
        let table = FeatureTable::read_csv(&fp).map_err(|e| e.in_stage(STAGE, fp.display().to_string()))?;
        if table.len() != self.dataset.len() || table.names != mask.names {
            return Err(
                Error::Validation("image features do not match the dataset or mask".into())
                    .in_stage(STAGE, fp.display().to_string()),
            );
        }
        let dets = self.load_detections(STAGE)?;
        let selected = mask.mask().selected();
        let held: BTreeSet<&str> = self.cfg.held_out_answers.iter().map(String::as_str).collect();
        let mentions_held = |text: &str| words(text).iter().any(|w| held.contains(w.as_str()));

        let mut texts = Vec::new();
        let mut answers: Vec<String> = Vec::new();
        for s in self.train_samples() {
            for c in s.captions.iter().filter(|c| !mentions_held(&c.caption)) {
                texts.push(c.caption.clone());
            }
            for q in &s.questions {
                if !mentions_held(&q.question) && !mentions_held(&q.answer) {
                    texts.push(format!("{} {}", q.question, q.answer));
                    if !answers.contains(&q.answer) {
                        answers.push(q.answer.clone());
                    }
                }
            }
        }
        let globals: Vec<Vec<f64>> = self
            .train
            .iter()
            .map(|&i| select_columns(&table.rows[i], &selected))
            .collect();
        let stats = FeatureStats::fit(&globals)?;
        let mut model = CaptionModel::new(
            self.cfg.captioner.clone(),
            Vocab::build(&texts),
            answers,
            self.classes(),
            mask.selected.clone(),
            stats,
            &enc,
            self.cfg.seed.wrapping_add(4),
        )?;
        let mut examples: Vec<Example> = Vec::new();
        for (&i, global) in self.train.iter().zip(globals) {
            let s = &self.dataset.samples[i];
            let art = image_artifacts(&s.image, &dets[i].detections, global, self.cfg.captioner.max_objects)
                .map_err(|e| e.in_stage(STAGE, &s.record.file_name))?;
            for c in s.captions.iter().filter(|c| !mentions_held(&c.caption)) {
                examples.push(model.caption_example(art.clone(), &c.caption));
            }
            for q in &s.questions {
                if !mentions_held(&q.question) && !mentions_held(&q.answer) {
                    examples.push(model.qa_example(art.clone(), &q.question, &q.answer)?);
                }
            }
        }
        if examples.is_empty() {
            return Err(Error::EmptyInput("captioner training examples"));
        }
        let report = captioner::train(&mut model, &examples, &self.cfg.captioner_train)?;
        model.round_to_f32();
        model.save(self.layout.model())?;
        crate::io::write_json(self.layout.captioner_report(), &report)?;
        Ok(vec![self.layout.model(), self.layout.captioner_report()])
    }
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub manifest: Manifest,
    pub timings: Timings,
    pub run_dir: PathBuf,
}

/// Loads the dataset and runs every stage in order.
pub fn run_training(cfg: &PipelineConfig) -> Result<TrainOutcome> {
    let ds = cfg.data.load()?;
    run_training_on(cfg, &ds)
}

/// Runs every stage on an already loaded dataset, then writes the manifest.
pub fn run_training_on(cfg: &PipelineConfig, ds: &Dataset) -> Result<TrainOutcome> {
    let mut run = Run::new(cfg, ds)?;
    let layout = run.layout.clone();
    std::fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    crate::io::write_json(layout.config(), &run.cfg)?;
    let split = Split {
        train: run.train.iter().map(|&i| ds.samples[i].record.id).collect(),
        test: run.test.iter().map(|&i| ds.samples[i].record.id).collect(),
    };
    crate::io::write_json(layout.split(), &split)?;
    if run.test.is_empty() {
        warn!("test split is empty");
    }
    let mut stages = Vec::with_capacity(Stage::ALL.len());
    for stage in Stage::ALL {
        let files = run.run_stage(stage)?;
        let outputs = files
            .iter()
            .map(|p| {
                Ok(FileRecord {
                    path: layout.relative(p),
                    sha256: crate::io::sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        stages.push(StageRecord {
            stage: stage.name().to_string(),
            outputs,
        });
    }
    let manifest = Manifest {
        seed: run.cfg.seed,
        config_sha256: run.cfg.fingerprint()?,
        dataset_sha256: dataset_hash(ds)?,
        split_sha256: crate::io::sha256_file(layout.split())?,
        stages,
    };
    crate::io::write_json(layout.manifest(), &manifest)?;
    crate::io::write_json(layout.timings(), &run.timings)?;
    Ok(TrainOutcome {
        manifest,
        timings: run.timings,
        run_dir: layout.root,
    })
}
