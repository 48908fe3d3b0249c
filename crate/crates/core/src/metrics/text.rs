use std::collections::HashMap;
use std::hash::Hash;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    pub score: f64,
    /// Smoothed modified precision per order `1..=max_n`.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU with uniform weights over orders `1..=max_n`.
///
/// Orders above one use add-one smoothing on both the clipped match count
/// and the candidate n-gram total; an empty candidate scores 0.
pub fn bleu<T: Eq + Hash>(candidate: &[T], reference: &[T], max_n: usize) -> BleuScore {
    let zero = BleuScore {
        score: 0.0,
        precisions: vec![0.0; max_n],
        brevity_penalty: 0.0,
    };
    if candidate.is_empty() || max_n == 0 {
        return zero;
    }
    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        precisions.push(p);
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let brevity_penalty = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    if precisions[0] == 0.0 {
        return BleuScore {
            precisions,
            brevity_penalty,
            ..zero
        };
    }
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
    BleuScore {
        score: brevity_penalty * log_mean.exp(),
        precisions,
        brevity_penalty,
    }
}

/// Exact-match METEOR with alpha 0.9, gamma 0.5 and beta 3.
///
/// Each candidate token, left to right, aligns to the leftmost unused
/// identical reference token.
pub fn meteor<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    const ALPHA: f64 = 0.9;
    const GAMMA: f64 = 0.5;
    const BETA: i32 = 3;
    let mut used = vec![false; reference.len()];
    let mut alignment: Vec<(usize, usize)> = Vec::new();
    for (i, tok) in candidate.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *tok) {
            used[j] = true;
            alignment.push((i, j));
        }
    }
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (ALPHA * p + (1.0 - ALPHA) * r);
    let chunks = 1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let penalty = GAMMA * (chunks as f64 / m as f64).powi(BETA);
    fmean * (1.0 - penalty)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_identity_is_exactly_one() {
        let x = toks("a red circle left of a blue square");
        for n in 1..=4 {
            assert_eq!(bleu(&x, &x, n).score, 1.0);
        }
    }

    #[test]
    fn bleu_brevity_hand_case() {
        let s = bleu(&toks("the cat"), &toks("the cat sat"), 1);
        assert!((s.score - (-0.5f64).exp()).abs() < 1e-15);
        assert!((s.score - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn bleu_empty_and_disjoint() {
        let empty: Vec<&str> = vec![];
        assert_eq!(bleu(&empty, &toks("a b"), 4).score, 0.0);
        assert_eq!(bleu(&toks("x y"), &toks("a b"), 2).score, 0.0);
    }

    #[test]
    fn bleu_clips_repeated_tokens() {
        let s = bleu(&toks("the the the"), &toks("the cat"), 1);
        assert!((s.precisions[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn meteor_identity_four_tokens() {
        let x = toks("a b c d");
        assert!((meteor(&x, &x) - (1.0 - 0.5 / 64.0)).abs() < 1e-12);
        assert!((meteor(&x, &x) - 0.9922).abs() < 1e-4);
    }

    #[test]
    fn meteor_disjoint_and_asymmetric() {
        assert_eq!(meteor(&toks("x y"), &toks("a b")), 0.0);
        let a = toks("a b c");
        let b = toks("a b c d e f");
        assert!((meteor(&a, &b) - meteor(&b, &a)).abs() > 1e-3);
    }
}
