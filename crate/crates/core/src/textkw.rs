//! Corpus word embeddings and keyword ranking with an orthographic
//! (Damerau–Levenshtein) re-ranking term.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub position: usize,
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<Token> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(position, s)| Token {
            surface: s.to_lowercase(),
            position,
        })
        .collect()
}

pub fn words(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.surface).collect()
}

pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "is", "are", "was", "to", "in", "on", "at", "and", "or", "what", "which", "how", "it",
    "this", "that", "with", "for", "by",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    /// Co-occurrence window on each side of a word.
    pub window: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { dim: 64, window: 5 }
    }
}

/// Word vectors learned from positive PMI co-occurrence and truncated SVD.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    table: Vec<f64>,
    mean: Vec<f64>,
}

impl Encoder {
    fn from_parts(vocab: Vec<String>, dim: usize, table: Vec<f64>) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::EmptyInput("encoder vocabulary"));
        }
        if table.len() != vocab.len() * dim || table.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "encoder table must be finite and match vocabulary x dim",
            ));
        }
        let index: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != vocab.len() {
            return Err(Error::invalid("duplicate vocabulary word"));
        }
        let mut mean = vec![0.0; dim];
        for row in table.chunks_exact(dim.max(1)).take(vocab.len()) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / vocab.len() as f64;
            }
        }
        Ok(Self {
            vocab,
            index,
            dim,
            table,
            mean,
        })
    }

    /// Trains on documents; the vocabulary keeps first-occurrence order.
    ///
    /// Rows are `U_k sqrt(S_k)` of the PPMI matrix, each singular vector
    /// signed so its largest-magnitude entry is positive. Columns beyond the
    /// matrix rank are zero.
    pub fn train<S: AsRef<str>>(corpus: &[S], cfg: &EncoderConfig) -> Result<Self> {
        if cfg.dim == 0 || cfg.window == 0 {
            return Err(Error::invalid("encoder dim and window must be positive"));
        }
        let docs: Vec<Vec<String>> = corpus.iter().map(|d| words(d.as_ref())).collect();
        let mut vocab = Vec::new();
        let mut index = HashMap::new();
        for w in docs.iter().flatten() {
            if !index.contains_key(w) {
                index.insert(w.clone(), vocab.len());
                vocab.push(w.clone());
            }
        }
        if vocab.is_empty() {
            return Err(Error::EmptyInput("training corpus"));
        }
        let v = vocab.len();
        let mut counts = DMatrix::<f64>::zeros(v, v);
        for doc in &docs {
            for (i, w) in doc.iter().enumerate() {
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window).min(doc.len() - 1);
                for j in lo..=hi {
                    if j != i {
                        counts[(index[w], index[&doc[j]])] += 1.0;
                    }
                }
            }
        }
        let total: f64 = counts.sum();
        let row_sums: Vec<f64> = (0..v).map(|i| counts.row(i).sum()).collect();
        let mut ppmi = DMatrix::<f64>::zeros(v, v);
        if total > 0.0 {
            for i in 0..v {
                for j in 0..v {
                    let c = counts[(i, j)];
                    if c > 0.0 {
                        let pmi = (c * total / (row_sums[i] * row_sums[j])).ln();
                        ppmi[(i, j)] = pmi.max(0.0);
                    }
                }
            }
        }
        let svd = ppmi.svd(true, false);
        let u = svd.u.expect("left singular vectors requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .total_cmp(&svd.singular_values[a])
                .then(a.cmp(&b))
        });
        let mut table = vec![0.0; v * cfg.dim];
        for (k, &col) in order.iter().take(cfg.dim).enumerate() {
            let s = svd.singular_values[col];
            if s <= 1e-12 {
                continue;
            }
            let c = u.column(col);
            let pivot = c
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for i in 0..v {
                table[i * cfg.dim + k] = sign * c[i] * s.sqrt();
            }
        }
        Self::from_parts(vocab, cfg.dim, table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn mean_vector(&self) -> &[f64] {
        &self.mean
    }

    /// Vector of one word; out-of-vocabulary words map to the mean vector.
    pub fn word_vector(&self, word: &str) -> &[f64] {
        match self.index.get(word) {
            Some(&i) => &self.table[i * self.dim..(i + 1) * self.dim],
            None => &self.mean,
        }
    }

    /// Mean of word vectors.
    pub fn embed_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<f64>> {
        if words.is_empty() {
            return Err(Error::EmptyInput("token list"));
        }
        let mut out = vec![0.0; self.dim];
        for w in words {
            for (o, v) in out.iter_mut().zip(self.word_vector(w.as_ref())) {
                *o += v;
            }
        }
        let n = words.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(out)
    }

    pub fn embed_document(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        let w: Vec<&str> = tokens.iter().map(|t| t.surface.as_str()).collect();
        self.embed_words(&w)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"XMQE");
        b.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        b.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for w in &self.vocab {
            b.extend_from_slice(&(w.len() as u32).to_le_bytes());
            b.extend_from_slice(w.as_bytes());
        }
        for v in &self.table {
            b.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Validation(format!("encoder file: {m}"));
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated"))? != b"XMQE" {
            return Err(bad("bad magic"));
        }
        let n = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
        let dim = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
        let mut vocab = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
            let w = cur.take(len).ok_or_else(|| bad("truncated"))?;
            vocab.push(String::from_utf8(w.to_vec()).map_err(|_| bad("word is not utf-8"))?);
        }
        let mut table = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            let raw = cur.take(4).ok_or_else(|| bad("truncated table"))?;
            table.push(f32::from_le_bytes(raw.try_into().expect("four bytes")) as f64);
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Self::from_parts(vocab, dim, table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&crate::io::read_bytes(path)?).map_err(|e| match e {
            Error::Validation(m) => Error::format(path, m),
            other => other,
        })
    }

    /// Rounds the table through `f32`, matching a save/load cycle.
    pub fn round_trip_precision(self) -> Self {
        let table = self.table.iter().map(|&v| v as f32 as f64).collect();
        Self::from_parts(self.vocab, self.dim, table).expect("rounded tables stay finite")
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
    }
}

/// Unique unigrams and bigrams free of stopwords, in first-occurrence order.
pub fn candidates(tokens: &[Token], stoplist: &[&str]) -> Vec<String> {
    let stop: HashSet<&str> = stoplist.iter().copied().collect();
    let keep: Vec<Option<&str>> = tokens
        .iter()
        .map(|t| Some(t.surface.as_str()).filter(|s| !stop.contains(s)))
        .collect();
    let unigrams = keep.iter().flatten().map(|s| s.to_string());
    let bigrams = keep.windows(2).filter_map(|w| match (w[0], w[1]) {
        (Some(a), Some(b)) => Some(format!("{a} {b}")),
        _ => None,
    });
    let mut seen = HashSet::new();
    // Unigrams first, then bigrams, each in first-occurrence order.
    unigrams.chain(bigrams).filter(|c| seen.insert(c.clone())).collect()
}

/// Optimal string alignment distance with unit costs, over Unicode scalars.
pub fn dl_distance(s: &str, t: &str) -> usize {
    let a: Vec<char> = s.chars().collect();
    let b: Vec<char> = t.chars().collect();
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = (a[i - 1] != b[j - 1]) as usize;
            let mut v = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
            if i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1] {
                v = v.min(d[i - 2][j - 2] + 1);
            }
            d[i][j] = v;
        }
    }
    d[n][m]
}

/// Smallest length-normalized distance from `candidate` to any token; 1 when
/// there are no tokens.
pub fn dl_norm(candidate: &str, tokens: &[Token]) -> f64 {
    let len = candidate.chars().count();
    tokens
        .iter()
        .map(|t| {
            let denom = len.max(t.surface.chars().count()).max(1) as f64;
            dl_distance(candidate, &t.surface) as f64 / denom
        })
        .fold(1.0, f64::min)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordResult {
    pub keyword: String,
    pub cosine: f64,
    pub dl_norm: f64,
    pub score: f64,
    pub vector: Vec<f64>,
}

/// Top `top_n` candidates by `0.7 cosine + 0.3 (1 - dl_norm)`; ties keep
/// candidate order.
pub fn rank_keywords(enc: &Encoder, text: &str, top_n: usize) -> Result<Vec<KeywordResult>> {
    if top_n == 0 {
        return Err(Error::invalid("top_n must be at least 1"));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let doc = enc.embed_document(&tokens)?;
    let mut results: Vec<KeywordResult> = candidates(&tokens, DEFAULT_STOPWORDS)
        .into_iter()
        .map(|kw| {
            let parts: Vec<&str> = kw.split(' ').collect();
            let vector = enc.embed_words(&parts).expect("candidates are nonempty");
            let cos = cosine(&vector, &doc);
            let dl_norm = dl_norm(&kw, &tokens);
            KeywordResult {
                score: 0.7 * cos + 0.3 * (1.0 - dl_norm),
                keyword: kw,
                cosine: cos,
                dl_norm,
                vector,
            }
        })
        .collect();
    results.sort_by(|a, b| b.score.total_cmp(&a.score));
    results.truncate(top_n);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<&'static str> {
        vec![
            "a red circle left of a blue square",
            "a green triangle left of a red circle",
            "a blue square",
            "what color is the circle",
            "how many shapes three",
        ]
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(words("A red circle."), vec!["a", "red", "circle"]);
        assert!(words("").is_empty());
        assert_eq!(words("don't stop"), vec!["don", "t", "stop"]);
        let t = tokenize("x y z");
        assert!(t.windows(2).all(|w| w[0].position < w[1].position));
    }

    #[test]
    fn candidate_rules() {
        let t = tokenize("a red circle");
        assert_eq!(candidates(&t, &["a"]), vec!["red", "circle", "red circle"]);
        assert!(candidates(&tokenize("a the"), &["a", "the"]).is_empty());
        assert_eq!(candidates(&tokenize("red red"), &[]), vec!["red", "red red"]);
    }

    #[test]
    fn dl_examples() {
        assert_eq!(dl_distance("abc", "abc"), 0);
        assert_eq!(dl_distance("ab", "ba"), 1);
        assert_eq!(dl_distance("kitten", "sitting"), 3);
        assert_eq!(dl_distance("", "abc"), 3);
        // Restricted variant: no substring is edited twice.
        assert_eq!(dl_distance("ca", "abc"), 3);
    }

    #[test]
    fn embedding_rules() {
        let enc = Encoder::train(&corpus(), &EncoderConfig::default()).unwrap();
        assert_eq!(enc.dim(), 64);
        let red = enc.word_vector("red").to_vec();
        assert_eq!(enc.embed_words(&["red"]).unwrap(), red);
        let blue = enc.word_vector("blue").to_vec();
        let avg: Vec<f64> = red.iter().zip(&blue).map(|(a, b)| (a + b) / 2.0).collect();
        let got = enc.embed_words(&["red", "blue"]).unwrap();
        assert!(got.iter().zip(&avg).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(enc.embed_words(&["zebra", "quux"]).unwrap(), enc.mean_vector());
        assert!(enc.embed_words::<&str>(&[]).is_err());
        assert!((cosine(&red, &red) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn training_is_deterministic_and_roundtrips() {
        let a = Encoder::train(&corpus(), &EncoderConfig::default()).unwrap();
        let b = Encoder::train(&corpus(), &EncoderConfig::default()).unwrap();
        assert_eq!(a, b);
        let back = Encoder::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a.clone().round_trip_precision());
        assert!(Encoder::from_bytes(b"XMQF").is_err());
        let mut truncated = a.to_bytes();
        truncated.pop();
        assert!(Encoder::from_bytes(&truncated).is_err());
    }

    #[test]
    fn single_word_ranks_first() {
        let enc = Encoder::train(&corpus(), &EncoderConfig::default()).unwrap();
        let r = rank_keywords(&enc, "circle", 5).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].keyword, "circle");
        assert!((r[0].cosine - 1.0).abs() < 1e-9);
        assert_eq!(r[0].dl_norm, 0.0);
        assert!((r[0].score - 1.0).abs() < 1e-9);
        assert!(rank_keywords(&enc, "", 3).unwrap().is_empty());
        assert_eq!(dl_norm("blue", &tokenize("bule")), 0.25);
        assert_eq!(dl_norm("red", &[]), 1.0);
        let all = rank_keywords(&enc, "red circle blue square", 100).unwrap();
        assert_eq!(all.len(), 7);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
    }
}
