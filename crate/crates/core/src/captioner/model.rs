use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{
    object_slot_dim, restricted_log_probs, zsl_predict, ClassPrototypes, ImageArtifacts, ModelConfig, Vocab, BOS, EOS,
    PAD,
};
use crate::autograd::{Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::textkw::Encoder;

/// Per-feature standardisation fitted on training images.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Zero-variance features keep unit scale.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::EmptyInput("feature rows"));
        };
        let k = first.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("feature rows differ in length"));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..k)
            .map(|j| {
                let sd = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum Mixup {
    Off,
    /// Coefficient drawn from `Beta(mixup_beta, mixup_beta)`.
    Beta,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip: f64,
    pub seed: u64,
    pub mixup: Mixup,
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 16,
            lr: 0.05,
            momentum: 0.9,
            clip: 1.0,
            seed: 42,
            mixup: Mixup::Beta,
            dropout: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean weighted token cross-entropy per epoch.
    pub ce: Vec<f64>,
    /// Mean semantic-consistency loss per epoch.
    pub scl: Vec<f64>,
}

/// A teacher-forced training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub artifacts: ImageArtifacts,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    /// Loss weight of every target position.
    pub weight: Vec<f64>,
    /// Text positions pooled into the generated representation.
    pub pool_len: usize,
    /// Semantic target of the whole sequence.
    pub proto: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// One row of vocabulary logits per text position.
    pub logits: Tensor,
    /// Pooled, projected representation of the text positions.
    pub generated: Vec<f64>,
}

impl ForwardOutput {
    pub fn probs(&self) -> Tensor {
        let mut p = self.logits.clone();
        for r in 0..p.rows {
            crate::autograd::softmax_in_place(&mut p.data[r * p.cols..(r + 1) * p.cols]);
        }
        p
    }
}

const TOK: usize = 0;
const POS: usize = 1;
const SLOT: usize = 2;
const PG: usize = 3;
const BG: usize = 4;
const PO: usize = 5;
const BO: usize = 6;
const LNF_G: usize = 7;
const LNF_B: usize = 8;
const OUT_W: usize = 9;
const OUT_B: usize = 10;
const PROTO_W: usize = 11;
const GLOBAL_PARAMS: usize = 12;
const BLOCK_NAMES: [&str; 16] = [
    "ln1.g", "ln1.b", "sa.q", "sa.k", "sa.v", "ln2.g", "ln2.b", "ca.q", "ca.k", "ca.v", "ln3.g", "ln3.b", "ffn.w1",
    "ffn.b1", "ffn.w2", "ffn.b2",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    /// Answer classes seen in training, all in the vocabulary.
    pub answers: Vec<String>,
    /// Detector classes, fixing the object-slot width.
    pub classes: Vec<String>,
    pub global_names: Vec<String>,
    pub stats: FeatureStats,
    /// Frozen word vector of every vocabulary entry.
    pub word_vectors: Tensor,
    pub params: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab: Vec<String>,
    answers: Vec<String>,
    classes: Vec<String>,
    global_names: Vec<String>,
    stats: FeatureStats,
}

fn layout(cfg: &ModelConfig, vocab: usize, global: usize, object: usize, proto: usize) -> Vec<(String, usize, usize)> {
    let d = cfg.d_model;
    let mut l: Vec<(String, usize, usize)> = vec![
        ("tok".into(), vocab, d),
        ("pos".into(), cfg.context, d),
        ("slot".into(), cfg.image_slots(), d),
        ("img.global.w".into(), global, d),
        ("img.global.b".into(), 1, d),
        ("img.object.w".into(), object, d),
        ("img.object.b".into(), 1, d),
        ("lnf.g".into(), 1, d),
        ("lnf.b".into(), 1, d),
        ("out.w".into(), d, vocab),
        ("out.b".into(), 1, vocab),
        ("proto.w".into(), d, proto),
    ];
    for b in 0..cfg.blocks {
        for name in BLOCK_NAMES {
            let (r, c) = match name {
                "ffn.w1" => (d, cfg.ffn),
                "ffn.b1" => (1, cfg.ffn),
                "ffn.w2" => (cfg.ffn, d),
                "ffn.b2" => (1, d),
                n if n.ends_with(".g") || n.ends_with(".b") => (1, d),
                _ => (d, d),
            };
            l.push((format!("block{b}.{name}"), r, c));
        }
    }
    l
}

struct Trainable<'r> {
    rng: &'r mut ChaCha8Rng,
    rate: f64,
}

impl<'r> Trainable<'r> {
    fn mask(&mut self, rows: usize, cols: usize) -> Tensor {
        let keep = 1.0 - self.rate;
        let data = (0..rows * cols)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::from_vec(rows, cols, data)
    }
}

impl CaptionModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: ModelConfig,
        vocab: Vocab,
        answers: Vec<String>,
        classes: Vec<String>,
        global_names: Vec<String>,
        stats: FeatureStats,
        enc: &Encoder,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(a) = answers.iter().find(|a| vocab.id(a).is_none()) {
            return Err(Error::invalid(format!("answer {a:?} is not in the vocabulary")));
        }
        if stats.mean.len() != global_names.len() || stats.std.len() != global_names.len() {
            return Err(Error::invalid(
                "feature statistics do not match the global feature names",
            ));
        }
        let de = enc.dim();
        let mut wv = Tensor::zeros(vocab.len(), de);
        for (i, w) in vocab.words().iter().enumerate().skip(super::SPECIALS.len()) {
            wv.data[i * de..(i + 1) * de].copy_from_slice(enc.word_vector(w));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lay = layout(
            &cfg,
            vocab.len(),
            global_names.len(),
            object_slot_dim(classes.len()),
            de,
        );
        let params = lay
            .iter()
            .map(|(name, r, c)| {
                if name.ends_with(".g") {
                    Tensor::filled(*r, *c, 1.0)
                } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                    Tensor::zeros(*r, *c)
                } else if name == "out.w" {
                    Tensor::randn(*r, *c, 0.02, &mut rng)
                } else if matches!(name.as_str(), "tok" | "pos" | "slot") {
                    Tensor::randn(*r, *c, 0.1, &mut rng)
                } else {
                    Tensor::randn(*r, *c, 1.0 / (*r.max(&1) as f64).sqrt(), &mut rng)
                }
            })
            .collect::<Vec<_>>();
        let mut m = Self {
            cfg,
            vocab,
            answers,
            classes,
            global_names,
            stats,
            word_vectors: wv,
            params,
        };
        m.zero_pad_row();
        Ok(m)
    }

    fn zero_pad_row(&mut self) {
        let d = self.cfg.d_model;
        self.params[TOK].data[PAD * d..(PAD + 1) * d].fill(0.0);
    }

    pub fn proto_dim(&self) -> usize {
        self.word_vectors.cols
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn block(&self, b: usize, k: usize) -> usize {
        GLOBAL_PARAMS + b * BLOCK_NAMES.len() + k
    }

    /// Mean word vector of the content words in `ids`; zeros when empty.
    pub fn sequence_proto(&self, ids: &[usize]) -> Vec<f64> {
        let de = self.proto_dim();
        let words: Vec<usize> = ids.iter().copied().filter(|&i| i >= super::SPECIALS.len()).collect();
        let mut out = vec![0.0; de];
        for &i in &words {
            for (o, v) in out.iter_mut().zip(self.word_vectors.row(i)) {
                *o += v / words.len() as f64;
            }
        }
        out
    }

    fn truncate(&self, mut ids: Vec<usize>, what: &str) -> Vec<usize> {
        if ids.len() > self.cfg.context {
            warn!("{what} has {} tokens, truncated to {}", ids.len(), self.cfg.context);
            ids.truncate(self.cfg.context);
        }
        ids
    }

    /// `BOS caption` predicting `caption EOS`.
    pub fn caption_example(&self, artifacts: ImageArtifacts, caption: &str) -> Example {
        let words = self.vocab.encode(caption);
        let mut input = vec![BOS];
        input.extend(&words);
        let mut target = words.clone();
        target.push(EOS);
        let input = self.truncate(input, "caption");
        target.truncate(input.len());
        Example {
            artifacts,
            weight: vec![1.0; input.len()],
            pool_len: input.len(),
            proto: self.sequence_proto(&words),
            input,
            target,
        }
    }

    /// `BOS question` predicting the answer at the last question position;
    /// only that position carries loss.
    pub fn qa_example(&self, artifacts: ImageArtifacts, question: &str, answer: &str) -> Result<Example> {
        let aid = self
            .vocab
            .id(answer)
            .ok_or_else(|| Error::invalid(format!("answer {answer:?} is not in the vocabulary")))?;
        let mut input = vec![BOS];
        input.extend(self.vocab.encode(question));
        let input = self.truncate(input, "question");
        let n = input.len();
        let mut target = vec![PAD; n];
        target[n - 1] = aid;
        let mut weight = vec![0.0; n];
        weight[n - 1] = 1.0;
        Ok(Example {
            artifacts,
            input,
            target,
            weight,
            pool_len: n,
            proto: self.word_vectors.row(aid).to_vec(),
        })
    }

    fn image_rows(&self, art: &ImageArtifacts) -> Result<(Tensor, Tensor)> {
        if art.global.len() != self.global_names.len() {
            return Err(Error::invalid(format!(
                "expected {} global features, got {}",
                self.global_names.len(),
                art.global.len()
            )));
        }
        let global = Tensor::row_vector(self.stats.apply(&art.global));
        let od = object_slot_dim(self.classes.len());
        let mut objs = Tensor::zeros(self.cfg.max_objects, od);
        for (i, o) in art.objects.iter().take(self.cfg.max_objects).enumerate() {
            let e = o.encode();
            if e.len() != od {
                return Err(Error::invalid("object slot width does not match the detector classes"));
            }
            objs.data[i * od..(i + 1) * od].copy_from_slice(&e);
        }
        Ok((global, objs))
    }

    /// Image prefix followed by token plus position embeddings.
    fn embed<'a>(
        &'a self,
        g: &mut Graph<'a>,
        p: &[Var],
        art: &ImageArtifacts,
        tokens: &[usize],
        drop: Option<&mut Trainable>,
    ) -> Result<Var> {
        let (global, objs) = self.image_rows(art)?;
        let gv = g.constant(global);
        let gw = g.matmul(gv, p[PG]);
        let gs = g.add_row(gw, p[BG]);
        let ov = g.constant(objs);
        let ow = g.matmul(ov, p[PO]);
        let os = g.add_row(ow, p[BO]);
        let prefix = g.concat_rows(&[gs, os]);
        let prefix = g.add(prefix, p[SLOT]);
        let tok = g.select_rows(p[TOK], tokens);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.select_rows(p[POS], &positions);
        let text = g.add(tok, pos);
        let stream = g.concat_rows(&[prefix, text]);
        Ok(match drop {
            Some(t) if t.rate > 0.0 => {
                let (r, c) = g.shape(stream);
                let m = g.constant(t.mask(r, c));
                g.mul(stream, m)
            }
            _ => stream,
        })
    }

    fn layer_norm(&self, g: &mut Graph<'_>, x: Var, gain: Var, bias: Var) -> Var {
        let n = g.normalize_rows(x, self.cfg.eps);
        let s = g.mul_row(n, gain);
        g.add_row(s, bias)
    }

    fn attend(&self, g: &mut Graph<'_>, q: Var, kv: Var, w: [Var; 3], causal: bool) -> Var {
        let qp = g.matmul(q, w[0]);
        let kp = g.matmul(kv, w[1]);
        let vp = g.matmul(kv, w[2]);
        let (nq, nk) = (g.shape(qp).0, g.shape(kp).0);
        let dh = self.cfg.d_model / self.cfg.heads;
        let mask = causal.then(|| (0..nq * nk).map(|i| i % nk <= i / nk).collect::<Vec<bool>>());
        let heads: Vec<Var> = (0..self.cfg.heads)
            .map(|h| {
                let qh = g.slice_cols(qp, h * dh, dh);
                let kh = g.slice_cols(kp, h * dh, dh);
                let vh = g.slice_cols(vp, h * dh, dh);
                let s = g.matmul_t(qh, kh);
                let s = g.scale(s, 1.0 / (dh as f64).sqrt());
                let a = g.softmax_rows(s, mask.clone());
                g.matmul(a, vh)
            })
            .collect();
        if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        }
    }

    /// Decoder blocks and final norm over a full embedded stream.
    fn decode<'a>(&'a self, g: &mut Graph<'a>, p: &[Var], stream: Var, mut drop: Option<&mut Trainable>) -> Var {
        let slots: Vec<usize> = (0..self.cfg.image_slots()).collect();
        let image = g.select_rows(stream, &slots);
        let mut x = stream;
        for b in 0..self.cfg.blocks {
            let k = |i| p[self.block(b, i)];
            let h1 = self.layer_norm(g, x, k(0), k(1));
            let sa = self.attend(g, h1, h1, [k(2), k(3), k(4)], true);
            let r1 = g.add(x, sa);
            let x1 = self.layer_norm(g, r1, k(5), k(6));
            let ca = self.attend(g, x1, image, [k(7), k(8), k(9)], false);
            let r2 = g.add(x1, ca);
            let x2 = self.layer_norm(g, r2, k(10), k(11));
            let f = g.matmul(x2, k(12));
            let f = g.add_row(f, k(13));
            let f = g.phish(f);
            let f = g.matmul(f, k(14));
            let mut f = g.add_row(f, k(15));
            if let Some(t) = drop.as_deref_mut() {
                if t.rate > 0.0 {
                    let (r, c) = g.shape(f);
                    let m = g.constant(t.mask(r, c));
                    f = g.mul(f, m);
                }
            }
            x = g.add(x2, f);
        }
        self.layer_norm(g, x, p[LNF_G], p[LNF_B])
    }

    /// Vocabulary logits of the text rows and the pooled representation of
    /// the first `pool_len` text rows.
    fn head<'a>(&'a self, g: &mut Graph<'a>, p: &[Var], hidden: Var, text_len: usize, pool_len: usize) -> (Var, Var) {
        let s = self.cfg.image_slots();
        let rows: Vec<usize> = (s..s + text_len).collect();
        let text = g.select_rows(hidden, &rows);
        let logits = g.matmul(text, p[OUT_W]);
        let logits = g.add_row(logits, p[OUT_B]);
        let pool_rows: Vec<usize> = (s..s + pool_len.clamp(1, text_len)).collect();
        let pooled = g.select_rows(hidden, &pool_rows);
        let pooled = g.mean_rows(pooled);
        let generated = g.matmul(pooled, p[PROTO_W]);
        (logits, generated)
    }

    /// Evaluation-mode embedded stream (no dropout).
    pub fn embed_inputs(&self, art: &ImageArtifacts, tokens: &[usize]) -> Result<Tensor> {
        let tokens = self.truncate(tokens.to_vec(), "input");
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|t| g.param(t)).collect();
        let v = self.embed(&mut g, &p, art, &tokens, None)?;
        Ok(g.value(v).clone())
    }

    /// Evaluation-mode forward pass; pools over all text positions.
    pub fn forward(&self, art: &ImageArtifacts, tokens: &[usize]) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        let tokens = self.truncate(tokens.to_vec(), "input");
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|t| g.param(t)).collect();
        let stream = self.embed(&mut g, &p, art, &tokens, None)?;
        let hidden = self.decode(&mut g, &p, stream, None);
        let (logits, generated) = self.head(&mut g, &p, hidden, tokens.len(), tokens.len());
        Ok(ForwardOutput {
            logits: g.value(logits).clone(),
            generated: g.value(generated).data.clone(),
        })
    }

    /// Greedy decoding from BOS until EOS or the context limit.
    pub fn generate_ids(&self, art: &ImageArtifacts) -> Result<Vec<usize>> {
        let mut tokens = vec![BOS];
        while tokens.len() < self.cfg.context {
            let out = self.forward(art, &tokens)?;
            let last = out.logits.row(out.logits.rows - 1);
            let next = (EOS..last.len())
                .fold((EOS, f64::NEG_INFINITY), |acc, i| {
                    if last[i] > acc.1 {
                        (i, last[i])
                    } else {
                        acc
                    }
                })
                .0;
            if next == EOS {
                break;
            }
            tokens.push(next);
        }
        Ok(tokens[1..].to_vec())
    }

    pub fn generate_caption(&self, art: &ImageArtifacts) -> Result<Vec<String>> {
        Ok(self.vocab.decode(&self.generate_ids(art)?))
    }

    /// Prototypes of the trained answer classes from the frozen word vectors.
    pub fn answer_prototypes(&self) -> ClassPrototypes {
        let vectors = self
            .answers
            .iter()
            .map(|a| {
                self.word_vectors
                    .row(self.vocab.id(a).expect("answers are in vocabulary"))
                    .to_vec()
            })
            .collect();
        ClassPrototypes::new(self.answers.clone(), vectors).expect("answers are unique")
    }

    /// Model log-probabilities over `protos` (restricted to trained answer
    /// classes) and the generated representation for a question.
    pub fn answer_scores_inputs(
        &self,
        art: &ImageArtifacts,
        question: &str,
        protos: &ClassPrototypes,
    ) -> Result<(Vec<Option<f64>>, Vec<f64>)> {
        let mut tokens = vec![BOS];
        tokens.extend(self.vocab.encode(question));
        let out = self.forward(art, &tokens)?;
        let last = out.logits.row(out.logits.rows - 1);
        let ids: Vec<Option<usize>> = protos
            .names
            .iter()
            .map(|n| {
                if self.answers.contains(n) {
                    self.vocab.id(n)
                } else {
                    None
                }
            })
            .collect();
        Ok((restricted_log_probs(last, &ids), out.generated))
    }

    pub fn answer_vqa(&self, art: &ImageArtifacts, question: &str, protos: &ClassPrototypes) -> Result<String> {
        let (lp, g) = self.answer_scores_inputs(art, question, protos)?;
        let k = zsl_predict(&lp, &g, protos, self.cfg.lambda_scl)?;
        Ok(protos.names[k].clone())
    }

    /// Batch objective recorded on `g`: summed weighted cross-entropy over
    /// the total target weight plus lambda times the batch-mean semantic
    /// loss. Returns the loss node, its cross-entropy part and the mean
    /// semantic loss including the constant generated-token term.
    fn batch_loss<'a>(
        &'a self,
        g: &mut Graph<'a>,
        p: &[Var],
        batch: &[&Example],
        mix: &[Option<(usize, f64)>],
        mut drop: Option<&mut Trainable>,
    ) -> Result<(Var, f64, f64)> {
        let t_len = batch
            .iter()
            .map(|e| e.input.len())
            .max()
            .unwrap_or(1)
            .min(self.cfg.context);
        let v = self.vocab.len();
        let mut streams = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for e in batch {
            let mut tokens = e.input.clone();
            tokens.resize(t_len, PAD);
            streams.push(self.embed(g, p, &e.artifacts, &tokens, drop.as_deref_mut())?);
            let mut y = Tensor::zeros(t_len, v);
            for (t, (&id, &w)) in e.target.iter().zip(&e.weight).enumerate().take(t_len) {
                *y.at_mut(t, id) = w;
            }
            labels.push(y);
        }
        let mut ces = Vec::with_capacity(batch.len());
        let mut scls = Vec::with_capacity(batch.len());
        let (mut weight, mut aux_sum) = (0.0, 0.0);
        for (i, e) in batch.iter().enumerate() {
            let (stream, y, proto) = match mix[i] {
                Some((j, u)) => {
                    let a = g.scale(streams[i], u);
                    let b = g.scale(streams[j], 1.0 - u);
                    let y: Vec<f64> = labels[i]
                        .data
                        .iter()
                        .zip(&labels[j].data)
                        .map(|(a, b)| u * a + (1.0 - u) * b)
                        .collect();
                    let proto: Vec<f64> = e
                        .proto
                        .iter()
                        .zip(&batch[j].proto)
                        .map(|(a, b)| u * a + (1.0 - u) * b)
                        .collect();
                    (g.add(a, b), Tensor::from_vec(t_len, v, y), proto)
                }
                None => (streams[i], labels[i].clone(), e.proto.clone()),
            };
            weight += y.data.iter().sum::<f64>();
            let hidden = self.decode(g, p, stream, drop.as_deref_mut());
            let (logits, generated) = self.head(g, p, hidden, t_len, e.pool_len);
            ces.push(g.soft_cross_entropy(logits, y, vec![1.0; t_len]));
            let target = g.constant(Tensor::row_vector(proto.clone()));
            let diff = g.sub(generated, target);
            scls.push(g.sum_sq(diff));
            let lv = g.value(logits);
            let produced: Vec<usize> = (0..e.pool_len.min(t_len))
                .map(|r| {
                    let row = lv.row(r);
                    (0..v).fold(0, |b, k| if row[k] > row[b] { k } else { b })
                })
                .collect();
            aux_sum += self
                .sequence_proto(&produced)
                .iter()
                .zip(&proto)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
        }
        let b = batch.len() as f64;
        let ce = if ces.len() == 1 { ces[0] } else { g.concat_rows(&ces) };
        let ce = g.sum_all(ce);
        let ce = g.scale(ce, 1.0 / weight.max(1e-12));
        let scl = if scls.len() == 1 { scls[0] } else { g.concat_rows(&scls) };
        let scl = g.sum_all(scl);
        let scl_value = (g.value(scl).data[0] + aux_sum) / b;
        let scl = g.scale(scl, self.cfg.lambda_scl / b);
        let loss = g.add(ce, scl);
        Ok((loss, g.value(ce).data[0], scl_value))
    }

    /// Mean weighted token cross-entropy of `data` in evaluation mode.
    pub fn mean_ce(&self, data: &[Example]) -> Result<f64> {
        let (mut ce, mut w) = (0.0, 0.0);
        for e in data {
            let out = self.forward(&e.artifacts, &e.input)?;
            for (t, (&id, &wt)) in e.target.iter().zip(&e.weight).enumerate() {
                let ls = crate::autograd::log_softmax(out.logits.row(t));
                ce -= wt * ls[id];
                w += wt;
            }
        }
        Ok(if w > 0.0 { ce / w } else { 0.0 })
    }

    /// Training objective of one batch with dropout off, with its
    /// per-parameter gradients.
    pub fn loss_and_grads(&self, batch: &[&Example], mix: &[Option<(usize, f64)>]) -> Result<(f64, Vec<Tensor>)> {
        self.step_grads(batch, mix, None).map(|(l, _, _, gr)| (l, gr))
    }

    /// Loss, cross-entropy part, semantic part and gradients.
    fn step_grads(
        &self,
        batch: &[&Example],
        mix: &[Option<(usize, f64)>],
        drop: Option<&mut Trainable>,
    ) -> Result<(f64, f64, f64, Vec<Tensor>)> {
        if batch.is_empty() || mix.len() != batch.len() {
            return Err(Error::invalid("batch and mix plan must be nonempty and aligned"));
        }
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|t| g.param(t)).collect();
        let (loss, ce, scl) = self.batch_loss(&mut g, &p, batch, mix, drop)?;
        let value = g.value(loss).data[0];
        let mut grads = g.backward(loss);
        let gs = p
            .iter()
            .zip(&self.params)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.rows, t.cols)))
            .collect();
        Ok((value, ce, scl, gs))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Meta {
            config: self.cfg.clone(),
            vocab: self.vocab.words().to_vec(),
            answers: self.answers.clone(),
            classes: self.classes.clone(),
            global_names: self.global_names.clone(),
            stats: self.stats.clone(),
        };
        let mut c = Checkpoint::new("captioner", serde_json::to_value(meta)?);
        let lay = layout(
            &self.cfg,
            self.vocab.len(),
            self.global_names.len(),
            object_slot_dim(self.classes.len()),
            self.proto_dim(),
        );
        for ((name, _, _), t) in lay.iter().zip(&self.params) {
            c.push(name.clone(), t);
        }
        c.push("word_vectors", &self.word_vectors);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("captioner")?;
        let meta: Meta = serde_json::from_value(c.config.clone())?;
        meta.config.validate()?;
        let vocab = Vocab::from_words(meta.vocab)?;
        let wv = c.tensor("word_vectors")?;
        if wv.rows != vocab.len() {
            return Err(Error::Validation(
                "word vector table does not match the vocabulary".into(),
            ));
        }
        let lay = layout(
            &meta.config,
            vocab.len(),
            meta.global_names.len(),
            object_slot_dim(meta.classes.len()),
            wv.cols,
        );
        let params = lay
            .iter()
            .map(|(name, r, k)| c.tensor_shaped(name, *r, *k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: meta.config,
            vocab,
            answers: meta.answers,
            classes: meta.classes,
            global_names: meta.global_names,
            stats: meta.stats,
            word_vectors: wv,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn round_to_f32(&mut self) {
        self.params.iter_mut().for_each(Tensor::round_to_f32);
        self.word_vectors.round_to_f32();
    }
}

fn mix_plan(n: usize, mode: Mixup, beta: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Option<(usize, f64)>>> {
    let dist = match mode {
        Mixup::Beta => Some(Beta::new(beta, beta).map_err(|e| Error::invalid(format!("mixup beta: {e}")))?),
        _ => None,
    };
    (0..n)
        .map(|i| {
            let j = (i + 1) % n;
            Ok(match mode {
                Mixup::Off => None,
                Mixup::Fixed(u) => {
                    if !(0.0..=1.0).contains(&u) {
                        return Err(Error::invalid("fixed mixup coefficient must lie in [0, 1]"));
                    }
                    Some((j, u))
                }
                Mixup::Beta => Some((j, dist.as_ref().expect("beta mode").sample(rng))),
            })
        })
        .collect()
}

/// SGD with momentum and global-norm clipping on shuffled minibatches.
pub fn train(model: &mut CaptionModel, data: &[Example], tc: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyInput("captioner training set"));
    }
    if tc.batch == 0 || !(tc.lr > 0.0) || !(tc.clip > 0.0) || !(0.0..1.0).contains(&tc.momentum) {
        return Err(Error::invalid(
            "batch, lr and clip must be positive and momentum in [0, 1)",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut mix_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    mix_rng.set_stream(1);
    let mut velocity: Vec<Tensor> = model.params.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let d = model.cfg.d_model;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut scl_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(tc.batch) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let mix = mix_plan(batch.len(), tc.mixup, model.cfg.mixup_beta, &mut mix_rng)?;
            let rate = if tc.dropout { model.cfg.dropout } else { 0.0 };
            let mut drop = Trainable { rng: &mut rng, rate };
            let (loss, ce, scl, mut grads) = model.step_grads(&batch, &mix, Some(&mut drop))?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged(format!(
                    "captioner loss {loss} at epoch {epoch}, batch {batches}"
                )));
            }
            grads[TOK].data[PAD * d..(PAD + 1) * d].fill(0.0);
            let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
            let scale = if norm > tc.clip { tc.clip / norm } else { 1.0 };
            for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grads) {
                for k in 0..p.data.len() {
                    v.data[k] = tc.momentum * v.data[k] + scale * g.data[k];
                    p.data[k] -= tc.lr * v.data[k];
                }
            }
            ce_sum += ce;
            scl_sum += scl;
            batches += 1;
        }
        let (ce, scl) = (ce_sum / batches as f64, scl_sum / batches as f64);
        info!("captioner epoch {epoch}: loss {ce:.4} scl {scl:.4}");
        report.ce.push(ce);
        report.scl.push(scl);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::ObjectSlot;
    use super::*;
    use crate::textkw::EncoderConfig;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            blocks: 1,
            context: 8,
            ffn: 12,
            max_objects: 2,
            ..ModelConfig::default()
        }
    }

    const CORPUS: [&str; 4] = [
        "a red circle",
        "a blue square",
        "what color is the circle",
        "red blue green",
    ];

    fn tiny_model(cfg: ModelConfig, seed: u64) -> CaptionModel {
        let enc = Encoder::train(&CORPUS, &EncoderConfig { dim: 4, window: 2 }).unwrap();
        let vocab = Vocab::build(&CORPUS);
        let stats = FeatureStats::fit(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        CaptionModel::new(
            cfg,
            vocab,
            vec!["red".into(), "blue".into()],
            vec!["circle".into(), "square".into()],
            vec!["f0".into(), "f1".into()],
            stats,
            &enc,
            seed,
        )
        .unwrap()
    }

    fn art(shift: f64) -> ImageArtifacts {
        let slot = ObjectSlot {
            class_probs: vec![0.7, 0.3],
            bbox: [0.3 + shift, 0.5, 0.2, 0.2],
            hue: [0.2, -0.1, -0.1],
            score: 0.9,
        };
        ImageArtifacts::new(vec![1.0 + shift, 2.0], vec![slot], 2)
    }

    fn examples(m: &CaptionModel) -> Vec<Example> {
        vec![
            m.caption_example(art(0.0), "a red circle"),
            m.caption_example(art(0.2), "a blue square"),
            m.qa_example(art(0.1), "what color is the circle", "red").unwrap(),
        ]
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = tiny_model(tiny_cfg(), 3);
        let data = examples(&m);
        let batch: Vec<&Example> = data.iter().collect();
        let mix = vec![Some((1, 0.3)), Some((2, 0.6)), None];
        let (_, grads) = m.loss_and_grads(&batch, &mix).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for pi in 0..m.params.len() {
            let n = m.params[pi].len();
            for k in (0..n).step_by(n / 5 + 1) {
                if pi == TOK && k < m.cfg.d_model {
                    continue;
                }
                let orig = m.params[pi].data[k];
                m.params[pi].data[k] = orig + h;
                let up = m.loss_and_grads(&batch, &mix).unwrap().0;
                m.params[pi].data[k] = orig - h;
                let down = m.loss_and_grads(&batch, &mix).unwrap().0;
                m.params[pi].data[k] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = grads[pi].data[k];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn initial_loss_is_near_log_vocab() {
        let cfg = ModelConfig {
            lambda_scl: 0.0,
            ..tiny_cfg()
        };
        let m = tiny_model(cfg, 5);
        let data = examples(&m);
        let ce = m.mean_ce(&data).unwrap();
        let ln_v = (m.vocab.len() as f64).ln();
        assert!((ce - ln_v).abs() <= 0.05 * ln_v, "ce {ce} vs ln V {ln_v}");
    }

    #[test]
    fn training_is_deterministic_and_fixed_unit_mixup_is_off() {
        let tc = TrainConfig {
            epochs: 3,
            batch: 2,
            ..TrainConfig::default()
        };
        let run = |mix: Mixup| {
            let mut m = tiny_model(tiny_cfg(), 9);
            let data = examples(&m);
            let r = train(
                &mut m,
                &data,
                &TrainConfig {
                    mixup: mix,
                    ..tc.clone()
                },
            )
            .unwrap();
            (m.params, r)
        };
        assert_eq!(run(Mixup::Beta), run(Mixup::Beta));
        assert_eq!(run(Mixup::Fixed(1.0)), run(Mixup::Off));
        assert_ne!(run(Mixup::Fixed(0.5)).0, run(Mixup::Off).0);
    }

    #[test]
    fn training_fits_a_small_set() {
        let mut m = tiny_model(tiny_cfg(), 1);
        let data = examples(&m);
        let before = m.mean_ce(&data).unwrap();
        let tc = TrainConfig {
            epochs: 150,
            batch: 3,
            mixup: Mixup::Off,
            dropout: false,
            ..TrainConfig::default()
        };
        let report = train(&mut m, &data, &tc).unwrap();
        assert_eq!(report.ce.len(), 150);
        let after = m.mean_ce(&data).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
        assert_eq!(m.generate_caption(&data[0].artifacts).unwrap(), ["a", "red", "circle"]);
        let protos = m.answer_prototypes();
        assert_eq!(
            m.answer_vqa(&data[2].artifacts, "what color is the circle", &protos)
                .unwrap(),
            "red"
        );
    }

    #[test]
    fn embedding_of_pad_is_the_position_row() {
        let m = tiny_model(tiny_cfg(), 2);
        let e = m.embed_inputs(&art(0.0), &[PAD, PAD]).unwrap();
        let s = m.cfg.image_slots();
        for t in 0..2 {
            assert_eq!(e.row(s + t), m.params[POS].row(t));
        }
        assert!(m
            .embed_inputs(&ImageArtifacts::new(vec![1.0], vec![], 2), &[BOS])
            .is_err());
    }

    #[test]
    fn over_long_inputs_are_truncated() {
        let m = tiny_model(tiny_cfg(), 2);
        let e = m.caption_example(art(0.0), "a red circle a blue square a red circle");
        assert_eq!(e.input.len(), m.cfg.context);
        assert_eq!(e.target.len(), m.cfg.context);
        assert_eq!(m.forward(&e.artifacts, &[BOS; 20]).unwrap().logits.rows, m.cfg.context);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let mut m = tiny_model(tiny_cfg(), 4);
        m.round_to_f32();
        let back = CaptionModel::from_checkpoint(
            &Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, m);
        assert_eq!(
            back.forward(&art(0.0), &[BOS, 3]).unwrap(),
            m.forward(&art(0.0), &[BOS, 3]).unwrap()
        );
        let mut other = Checkpoint::new("detector", serde_json::Value::Null);
        other.push("x", &Tensor::zeros(1, 1));
        assert!(CaptionModel::from_checkpoint(&other).is_err());
    }

    #[test]
    fn invalid_training_inputs_are_rejected() {
        let mut m = tiny_model(tiny_cfg(), 4);
        assert!(train(&mut m, &[], &TrainConfig::default()).is_err());
        let data = examples(&m);
        assert!(train(
            &mut m,
            &data,
            &TrainConfig {
                batch: 0,
                ..TrainConfig::default()
            }
        )
        .is_err());
        assert!(train(
            &mut m,
            &data,
            &TrainConfig {
                mixup: Mixup::Fixed(1.5),
                ..TrainConfig::default()
            }
        )
        .is_err());
        assert!(m.qa_example(art(0.0), "what color", "purple").is_err());
    }
}
