//! Grid-cell single-stage detector with Easom box scaling and per-class
//! non-maximum suppression.
//!
//! The backbone is two stride-2 3x3 convolutions with Phish activations over
//! the mean-centred gray image. Each grid cell reads the backbone features of
//! its 3x3 cell neighbourhood through one shared affine head.

use std::f64::consts::PI;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::imgproc::{resize, Image};
use crate::metrics::ScoredBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub grid: usize,
    pub boxes_per_cell: usize,
    pub nms_iou: f64,
    pub score_floor: f64,
    pub easom_gain: f64,
    /// Side of the square network input.
    pub input: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            grid: 7,
            boxes_per_cell: 2,
            nms_iou: 0.5,
            score_floor: 0.25,
            easom_gain: 0.5,
            input: 56,
            conv1_channels: 8,
            conv2_channels: 16,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.boxes_per_cell == 0 {
            return Err(Error::invalid("grid and boxes_per_cell must be at least 1"));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::invalid("nms_iou must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.score_floor) || !(self.easom_gain >= 0.0) {
            return Err(Error::invalid(
                "score_floor must lie in [0, 1] and easom_gain be nonnegative",
            ));
        }
        if self.input == 0 || !self.input.is_multiple_of(4 * self.grid) {
            return Err(Error::invalid("input side must be a positive multiple of 4 * grid"));
        }
        if self.conv1_channels == 0 || self.conv2_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    fn map_side(&self) -> usize {
        self.input / 4
    }

    /// Backbone positions per cell side.
    fn cell_span(&self) -> usize {
        self.map_side() / self.grid
    }

    fn head_inputs(&self) -> usize {
        let w = 3 * self.cell_span();
        w * w * self.conv2_channels
    }

    fn head_outputs(&self, classes: usize) -> usize {
        self.boxes_per_cell * 5 + classes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 16,
            lr: 1e-3,
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            seed: 7,
        }
    }
}

/// Cell-relative box: centre in `[0,1]` of the owning cell, size as a
/// fraction of the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub h: f64,
    pub w: f64,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Absolute pixel box in the input image.
    pub rect: Rect,
    pub confidence: f64,
    pub class_probs: Vec<f64>,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellPrediction {
    pub boxes: Vec<BBox>,
    pub class_scores: Vec<f64>,
}

/// Raw predictions, row-major over cells.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPrediction {
    pub grid: usize,
    pub cells: Vec<CellPrediction>,
}

pub fn easom(i: f64, j: f64) -> f64 {
    -i.cos() * j.cos() * (-((i - PI).powi(2) + (j - PI).powi(2))).exp()
}

/// Scales `(h, w)` by `1 + gain |easom(2 pi h, 2 pi w)|`, clamped to `(0, 1]`.
pub fn apply_easom_scaling(b: BBox, cfg: &DetectorConfig) -> BBox {
    let s = 1.0 + cfg.easom_gain * easom(2.0 * PI * b.h, 2.0 * PI * b.w).abs();
    BBox {
        h: (b.h * s).min(1.0),
        w: (b.w * s).min(1.0),
        ..b
    }
}

pub fn class_probs(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::invalid("class scores must be nonempty"));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("class scores must be finite"));
    }
    let mut p = raw.to_vec();
    softmax_in_place(&mut p);
    Ok(p)
}

pub fn iou(a: &Rect, b: &Rect) -> Result<f64> {
    a.iou(b)
}

/// Drops detections below the score floor, then keeps each detection (by
/// descending score, stable) whose IOU with every kept same-class detection
/// is below the threshold.
pub fn nms(dets: &[Detection], cfg: &DetectorConfig) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= cfg.score_floor).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let clear = kept
            .iter()
            .all(|&k| dets[k].class_id != dets[i].class_id || dets[k].rect.iou_or_zero(&dets[i].rect) < cfg.nms_iou);
        if clear {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    pub cfg: DetectorConfig,
    pub classes: Vec<String>,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

struct Indices {
    conv1: Vec<Option<usize>>,
    conv2: Vec<Option<usize>>,
    head: Vec<Option<usize>>,
}

/// Patch indices of a 3x3, stride-2, pad-1 convolution over a
/// `side x side x ch` map stored as positions x channels.
fn conv_indices(side: usize, ch: usize) -> Vec<Option<usize>> {
    let out = side.div_ceil(2);
    let mut idx = Vec::with_capacity(out * out * 9 * ch);
    for oy in 0..out {
        for ox in 0..out {
            for ky in 0..3 {
                for kx in 0..3 {
                    let y = (2 * oy + ky) as isize - 1;
                    let x = (2 * ox + kx) as isize - 1;
                    let inside = y >= 0 && x >= 0 && (y as usize) < side && (x as usize) < side;
                    for c in 0..ch {
                        idx.push(inside.then(|| (y as usize * side + x as usize) * ch + c));
                    }
                }
            }
        }
    }
    idx
}

fn head_indices(cfg: &DetectorConfig) -> Vec<Option<usize>> {
    let (map, span, ch) = (cfg.map_side(), cfg.cell_span(), cfg.conv2_channels);
    let win = 3 * span;
    let mut idx = Vec::with_capacity(cfg.grid * cfg.grid * win * win * ch);
    for gy in 0..cfg.grid {
        for gx in 0..cfg.grid {
            for wy in 0..win {
                for wx in 0..win {
                    let y = (gy * span + wy) as isize - span as isize;
                    let x = (gx * span + wx) as isize - span as isize;
                    let inside = y >= 0 && x >= 0 && (y as usize) < map && (x as usize) < map;
                    for c in 0..ch {
                        idx.push(inside.then(|| (y as usize * map + x as usize) * ch + c));
                    }
                }
            }
        }
    }
    idx
}

fn sample_normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(rows, cols, std, rng)
}

/// Mean-centred unit-range gray input as a `(side*side) x 1` tensor.
fn input_tensor(img: &Image, side: usize) -> Result<Tensor> {
    let g = img.to_gray();
    let g = if g.width() == side && g.height() == side {
        g
    } else {
        resize(&g, side, side)?
    };
    let data: Vec<f64> = g.data().iter().map(|&v| v as f64 / 255.0).collect();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    Ok(Tensor::from_vec(
        side * side,
        1,
        data.into_iter().map(|v| v - mean).collect(),
    ))
}

struct Forward {
    boxes: Var,
    logits: Var,
}

impl DetectorModel {
    pub fn zeros(cfg: DetectorConfig, classes: Vec<String>) -> Result<Self> {
        cfg.validate()?;
        if classes.is_empty() {
            return Err(Error::invalid("detector needs at least one class"));
        }
        let (c1, c2) = (cfg.conv1_channels, cfg.conv2_channels);
        let (hin, hout) = (cfg.head_inputs(), cfg.head_outputs(classes.len()));
        Ok(Self {
            conv1_w: Tensor::zeros(9, c1),
            conv1_b: Tensor::zeros(1, c1),
            conv2_w: Tensor::zeros(9 * c1, c2),
            conv2_b: Tensor::zeros(1, c2),
            head_w: Tensor::zeros(hin, hout),
            head_b: Tensor::zeros(1, hout),
            cfg,
            classes,
        })
    }

    /// He-scaled random backbone, small random head.
    pub fn init(cfg: DetectorConfig, classes: Vec<String>, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(cfg, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2) = (m.cfg.conv1_channels, m.cfg.conv2_channels);
        m.conv1_w = sample_normal(9, c1, (2.0 / 9.0f64).sqrt(), &mut rng);
        m.conv2_w = sample_normal(9 * c1, c2, (2.0 / (9 * c1) as f64).sqrt(), &mut rng);
        let (hin, hout) = m.head_w.shape();
        m.head_w = sample_normal(hin, hout, 0.1 / (hin as f64).sqrt(), &mut rng);
        // Confidence starts at the object prior so the squared-error signal
        // of object cells is not lost in a saturated sigmoid.
        let prior: f64 = CONFIDENCE_PRIOR;
        for b in 0..m.cfg.boxes_per_cell {
            m.head_b.data[5 * b + 4] = (prior / (1.0 - prior)).ln();
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn indices(&self) -> Indices {
        let s = self.cfg.input;
        Indices {
            conv1: conv_indices(s, 1),
            conv2: conv_indices(s / 2, self.cfg.conv1_channels),
            head: head_indices(&self.cfg),
        }
    }

    fn params(&self) -> [&Tensor; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    /// Returns the sigmoid box block (cells x 5B) and class logits.
    fn forward<'a>(&'a self, g: &mut Graph<'a>, p: &[Var; 6], x: Tensor, idx: &Indices) -> Forward {
        let s = self.cfg.input;
        let c1 = self.cfg.conv1_channels;
        let s1 = s.div_ceil(2);
        let s2 = s1.div_ceil(2);
        let cells = self.cfg.grid * self.cfg.grid;
        let x = g.constant(x);
        let cols1 = g.gather(x, s1 * s1, 9, idx.conv1.clone());
        let z1 = g.matmul(cols1, p[0]);
        let z1 = g.add_row(z1, p[1]);
        let a1 = g.phish(z1);
        let cols2 = g.gather(a1, s2 * s2, 9 * c1, idx.conv2.clone());
        let z2 = g.matmul(cols2, p[2]);
        let z2 = g.add_row(z2, p[3]);
        let a2 = g.phish(z2);
        let win = g.gather(a2, cells, self.cfg.head_inputs(), idx.head.clone());
        let out = g.matmul(win, p[4]);
        let out = g.add_row(out, p[5]);
        let nb = 5 * self.cfg.boxes_per_cell;
        let raw_boxes = g.slice_cols(out, 0, nb);
        let boxes = g.sigmoid(raw_boxes);
        let logits = g.slice_cols(out, nb, self.num_classes());
        Forward { boxes, logits }
    }

    pub fn predict_grid(&self, img: &Image) -> Result<GridPrediction> {
        let x = input_tensor(img, self.cfg.input)?;
        let idx = self.indices();
        self.predict_tensor(x, &idx)
    }

    fn predict_tensor(&self, x: Tensor, idx: &Indices) -> Result<GridPrediction> {
        let mut g = Graph::new();
        let p = self.params().map(|t| g.constant(t.clone()));
        let f = self.forward(&mut g, &p, x, idx);
        let (bv, lv) = (g.value(f.boxes), g.value(f.logits));
        let cells = (0..bv.rows)
            .map(|c| CellPrediction {
                boxes: bv
                    .row(c)
                    .chunks_exact(5)
                    .map(|b| BBox {
                        cx: b[0],
                        cy: b[1],
                        w: b[2],
                        h: b[3],
                        confidence: b[4],
                    })
                    .collect(),
                class_scores: lv.row(c).to_vec(),
            })
            .collect();
        Ok(GridPrediction {
            grid: self.cfg.grid,
            cells,
        })
    }

    /// All scored boxes before suppression, in `width x height` pixels.
    pub fn decode(&self, pred: &GridPrediction, width: usize, height: usize) -> Result<Vec<Detection>> {
        let q = pred.grid as f64;
        let mut dets = Vec::new();
        for (c, cell) in pred.cells.iter().enumerate() {
            let (gy, gx) = ((c / pred.grid) as f64, (c % pred.grid) as f64);
            let probs = class_probs(&cell.class_scores)?;
            let (class_id, &pmax) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("nonempty");
            for b in &cell.boxes {
                let b = apply_easom_scaling(*b, &self.cfg);
                let cx = (gx + b.cx) / q * width as f64;
                let cy = (gy + b.cy) / q * height as f64;
                let (w, h) = (b.w * width as f64, b.h * height as f64);
                dets.push(Detection {
                    rect: Rect::new(cx - w / 2.0, cy - h / 2.0, w, h),
                    confidence: b.confidence,
                    class_probs: probs.clone(),
                    class_id,
                    score: b.confidence * pmax,
                });
            }
        }
        Ok(dets)
    }

    pub fn detect(&self, img: &Image) -> Result<Vec<Detection>> {
        let pred = self.predict_grid(img)?;
        let dets = self.decode(&pred, img.width(), img.height())?;
        Ok(nms(&dets, &self.cfg))
    }

    /// Detections with the image region under each box.
    pub fn detect_with_crops(&self, img: &Image) -> Result<Vec<(Detection, Image)>> {
        self.detect(img)?
            .into_iter()
            .map(|d| {
                let c = crop_rect(img, &d.rect)?;
                Ok((d, c))
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(
            "detector",
            serde_json::json!({ "config": self.cfg, "classes": self.classes }),
        );
        for (name, t) in PARAM_NAMES.iter().zip(self.params()) {
            c.push(*name, t);
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("detector")?;
        let cfg: DetectorConfig = serde_json::from_value(c.config["config"].clone())?;
        let classes: Vec<String> = serde_json::from_value(c.config["classes"].clone())?;
        let mut m = Self::zeros(cfg, classes)?;
        for (name, slot) in PARAM_NAMES.iter().zip(m.params_mut()) {
            let (r, k) = slot.shape();
            *slot = c.tensor_shaped(name, r, k)?;
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Rounds every weight through `f32`, matching a save/load cycle.
    pub fn round_to_f32(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::round_to_f32);
    }
}

const CONFIDENCE_PRIOR: f64 = 0.05;

const PARAM_NAMES: [&str; 6] = ["conv1.w", "conv1.b", "conv2.w", "conv2.b", "head.w", "head.b"];

/// Integer-aligned crop covering `r`, clamped to the image.
pub fn crop_rect(img: &Image, r: &Rect) -> Result<Image> {
    let x0 = r.x.floor().clamp(0.0, (img.width() - 1) as f64) as usize;
    let y0 = r.y.floor().clamp(0.0, (img.height() - 1) as f64) as usize;
    let x1 = (r.x1().ceil() as usize).clamp(x0 + 1, img.width());
    let y1 = (r.y1().ceil() as usize).clamp(y0 + 1, img.height());
    img.crop(x0, y0, x1, y1)
}

/// One training image with boxes in its own pixel coordinates.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub image: Image,
    pub boxes: Vec<(Rect, usize)>,
}

struct Targets {
    box_target: Tensor,
    box_weight: Tensor,
    class_target: Tensor,
    class_weight: Vec<f64>,
}

fn build_targets(model: &DetectorModel, boxes: &Tensor, ex: &TrainingExample, tc: &DetectorTrainConfig) -> Targets {
    let cfg = &model.cfg;
    let (q, nb, k) = (cfg.grid, cfg.boxes_per_cell, model.num_classes());
    let cells = q * q;
    let (w, h) = (ex.image.width() as f64, ex.image.height() as f64);
    let mut box_target = Tensor::zeros(cells, 5 * nb);
    let mut box_weight = Tensor::zeros(cells, 5 * nb);
    let mut class_target = Tensor::zeros(cells, k);
    let mut class_weight = vec![0.0; cells];
    for c in 0..cells {
        for b in 0..nb {
            *box_weight.at_mut(c, 5 * b + 4) = tc.lambda_noobj.sqrt();
        }
    }
    for (rect, class) in &ex.boxes {
        let (cx, cy) = rect.center();
        let (nx, ny) = ((cx / w).clamp(0.0, 1.0 - 1e-9), (cy / h).clamp(0.0, 1.0 - 1e-9));
        let (gx, gy) = ((nx * q as f64) as usize, (ny * q as f64) as usize);
        let cell = gy * q + gx;
        let target = [
            nx * q as f64 - gx as f64,
            ny * q as f64 - gy as f64,
            rect.w / w,
            rect.h / h,
        ];
        let gt = Rect::new(nx - rect.w / w / 2.0, ny - rect.h / h / 2.0, rect.w / w, rect.h / h);
        let best = (0..nb)
            .map(|b| {
                let p = &boxes.row(cell)[5 * b..5 * b + 5];
                let pc = ((gx as f64 + p[0]) / q as f64, (gy as f64 + p[1]) / q as f64);
                let pr = Rect::new(pc.0 - p[2] / 2.0, pc.1 - p[3] / 2.0, p[2], p[3]);
                (b, gt.iou_or_zero(&pr))
            })
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
            .0;
        for (j, t) in target.iter().enumerate() {
            *box_target.at_mut(cell, 5 * best + j) = *t;
            *box_weight.at_mut(cell, 5 * best + j) = tc.lambda_coord.sqrt();
        }
        *box_target.at_mut(cell, 5 * best + 4) = 1.0;
        *box_weight.at_mut(cell, 5 * best + 4) = 1.0;
        *class_target.at_mut(cell, *class) = 1.0;
        class_weight[cell] = 1.0;
    }
    Targets {
        box_target,
        box_weight,
        class_target,
        class_weight,
    }
}

fn loss_and_grads(
    model: &DetectorModel,
    ex: &TrainingExample,
    idx: &Indices,
    tc: &DetectorTrainConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let x = input_tensor(&ex.image, model.cfg.input)?;
    let mut g = Graph::new();
    let p = model.params().map(|t| g.param(t));
    let f = model.forward(&mut g, &p, x, idx);
    let t = build_targets(model, g.value(f.boxes), ex, tc);
    let tb = g.constant(t.box_target);
    let wb = g.constant(t.box_weight);
    let diff = g.sub(f.boxes, tb);
    let weighted = g.mul(diff, wb);
    let box_loss = g.sum_sq(weighted);
    let cls_loss = g.soft_cross_entropy(f.logits, t.class_target, t.class_weight);
    let loss = g.add(box_loss, cls_loss);
    let value = g.value(loss).data[0];
    let mut grads = g.backward(loss);
    let gs = p
        .iter()
        .zip(model.params())
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.rows, t.cols)))
        .collect();
    Ok((value, gs))
}

/// Per-image training loss of `model` on `ex`.
pub fn example_loss(model: &DetectorModel, ex: &TrainingExample, tc: &DetectorTrainConfig) -> Result<f64> {
    Ok(loss_and_grads(model, ex, &model.indices(), tc)?.0)
}

/// Adam on the mean per-image loss of shuffled minibatches; returns the
/// mean loss of every epoch.
pub fn train(model: &mut DetectorModel, data: &[TrainingExample], tc: &DetectorTrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("detector training set"));
    }
    if tc.batch == 0 || !(tc.lr > 0.0) {
        return Err(Error::invalid("batch must be positive and lr > 0"));
    }
    let idx = model.indices();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut m: Vec<Tensor> = model.params().iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
    let mut v = m.clone();
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut step = 0i32;
    let mut trace = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch) {
            let mut acc: Vec<Tensor> = model.params().iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
            for &i in chunk {
                let (l, gs) = loss_and_grads(model, &data[i], &idx, tc)?;
                if !l.is_finite() {
                    return Err(Error::Diverged(format!("detector loss {l} at epoch {epoch}")));
                }
                total += l;
                acc.iter_mut().zip(&gs).for_each(|(a, g)| a.add_assign(g));
            }
            step += 1;
            let n = chunk.len() as f64;
            let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            for (k, param) in model.params_mut().into_iter().enumerate() {
                for j in 0..param.data.len() {
                    let g = acc[k].data[j] / n;
                    m[k].data[j] = b1 * m[k].data[j] + (1.0 - b1) * g;
                    v[k].data[j] = b2 * v[k].data[j] + (1.0 - b2) * g * g;
                    param.data[j] -= tc.lr * (m[k].data[j] / c1) / ((v[k].data[j] / c2).sqrt() + eps);
                }
            }
        }
        let mean = total / data.len() as f64;
        info!("detector epoch {epoch}: loss {mean:.4}");
        trace.push(mean);
    }
    Ok(trace)
}

/// COCO-style result records; `category_ids[k]` is the id of class `k`.
pub fn to_coco(image_id: u64, dets: &[Detection], category_ids: &[usize]) -> Vec<ScoredBox> {
    dets.iter()
        .map(|d| ScoredBox {
            image_id,
            category_id: category_ids.get(d.class_id).copied().unwrap_or(d.class_id),
            bbox: d.rect.to_array(),
            score: d.score,
        })
        .collect()
}
