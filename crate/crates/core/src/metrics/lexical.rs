//! BLEU, Rouge-L and token F1 over token sequences.
//!
//! All three treat two empty sequences as identical (score 1) and an empty
//! sequence against a non-empty one as disjoint (score 0), except BLEU,
//! which is 0 for any empty hypothesis.

use std::collections::HashMap;

use crate::lm::Token;

fn ngram_counts(seq: &[Token], n: usize) -> HashMap<&[Token], usize> {
    let mut m = HashMap::new();
    if n == 0 || seq.len() < n {
        return m;
    }
    for w in seq.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Clipped n-gram matches and the hypothesis n-gram total.
fn clipped_matches(hyp: &[Token], reference: &[Token], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Modified n-gram precision: clipped matches over hypothesis n-grams,
/// zero when the hypothesis has no n-grams.
pub fn ngram_precision(hyp: &[Token], reference: &[Token], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    let (m, total) = clipped_matches(hyp, reference, n);
    if total == 0 {
        0.0
    } else {
        m as f64 / total as f64
    }
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    }
}

fn geometric_bleu(precisions: &[f64], bp: f64) -> f64 {
    if bp == 0.0 || precisions.contains(&0.0) {
        return 0.0;
    }
    let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
    bp * mean_log.exp()
}

/// Sentence BLEU-n: brevity penalty times the geometric mean of the
/// modified precisions of orders `1..=n`, unsmoothed.
pub fn bleu_n(hyp: &[Token], reference: &[Token], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be positive");
    if hyp.is_empty() {
        return 0.0;
    }
    let ps: Vec<f64> = (1..=n).map(|k| ngram_precision(hyp, reference, k)).collect();
    geometric_bleu(&ps, brevity_penalty(hyp.len(), reference.len()))
}

/// Corpus BLEU-n with match and length counts pooled over all pairs.
pub fn corpus_bleu(hyps: &[Vec<Token>], refs: &[Vec<Token>], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be positive");
    assert_eq!(hyps.len(), refs.len(), "corpus_bleu: length mismatch");
    let mut ps = Vec::with_capacity(n);
    for k in 1..=n {
        let (mut m, mut t) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let (a, b) = clipped_matches(h, r, k);
            m += a;
            t += b;
        }
        ps.push(if t == 0 { 0.0 } else { m as f64 / t as f64 });
    }
    let hl: usize = hyps.iter().map(Vec::len).sum();
    let rl: usize = refs.iter().map(Vec::len).sum();
    geometric_bleu(&ps, brevity_penalty(hl, rl))
}

fn lcs_len(a: &[Token], b: &[Token]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_overlap(overlap: usize, hyp_len: usize, ref_len: usize) -> Self {
        if hyp_len == 0 && ref_len == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let p = if hyp_len == 0 { 0.0 } else { overlap as f64 / hyp_len as f64 };
        let r = if ref_len == 0 { 0.0 } else { overlap as f64 / ref_len as f64 };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Self {
            precision: p,
            recall: r,
            f1,
        }
    }
}

/// Rouge-L from the longest common subsequence.
pub fn rouge_l(hyp: &[Token], reference: &[Token]) -> Prf {
    Prf::from_overlap(lcs_len(hyp, reference), hyp.len(), reference.len())
}

/// Unigram multiset overlap precision, recall and F1.
pub fn token_prf(hyp: &[Token], reference: &[Token]) -> Prf {
    let (overlap, _) = clipped_matches(hyp, reference, 1);
    Prf::from_overlap(overlap, hyp.len(), reference.len())
}

pub fn token_f1(hyp: &[Token], reference: &[Token]) -> f64 {
    token_prf(hyp, reference).f1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: Token = 0;
    const B: Token = 1;
    const C: Token = 2;
    const D: Token = 3;
    const X: Token = 4;
    const Y: Token = 5;

    #[test]
    fn bleu_hand_counts() {
        let hyp = [A, B, C, D];
        let reference = [A, B, D, C];
        assert_eq!(ngram_precision(&hyp, &reference, 1), 1.0);
        // Hypothesis bigrams ab, bc, cd against reference ab, bd, dc.
        assert!((ngram_precision(&hyp, &reference, 2) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(bleu_n(&hyp, &reference, 1), 1.0);
        assert!((bleu_n(&hyp, &reference, 2) - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        // No trigram matches.
        assert_eq!(bleu_n(&hyp, &reference, 3), 0.0);
    }

    #[test]
    fn bleu_identity_disjoint_and_brevity() {
        let s = [A, B, C, D];
        for n in 1..=4 {
            assert_eq!(bleu_n(&s, &s, n), 1.0);
        }
        assert_eq!(bleu_n(&[A, B], &[C, D], 1), 0.0);
        assert_eq!(bleu_n(&[], &[A], 1), 0.0);
        // |hyp| = 2, |ref| = 4 → BP = e^{1 - 2}.
        assert!((bleu_n(&[A, B], &s, 1) - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        let hyps = vec![vec![A, B, C, D], vec![A, X]];
        let refs = vec![vec![A, B, D, C], vec![A, Y]];
        // Unigrams 5/6, bigrams (1 + 0)/(3 + 1).
        let expect = ((5.0f64 / 6.0).ln() / 2.0 + (0.25f64).ln() / 2.0).exp();
        assert!((corpus_bleu(&hyps, &refs, 2) - expect).abs() < 1e-12);
    }

    #[test]
    fn rouge_hand_lcs() {
        let r = rouge_l(&[A, X, B, Y], &[A, B]);
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        let s = rouge_l(&[A, B], &[A, X, B, Y]);
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert_eq!(rouge_l(&[A, B], &[A, B]).f1, 1.0);
        assert_eq!(rouge_l(&[A, B], &[C, D]).f1, 0.0);
    }

    #[test]
    fn token_f1_hand_counts() {
        let p = token_prf(&[A, B, X, Y], &[A, B]);
        assert_eq!((p.precision, p.recall), (0.5, 1.0));
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1(&[A, A], &[A, A]), 1.0);
        assert_eq!(token_f1(&[A], &[B]), 0.0);
        // Multiset clipping: two a's against one.
        assert_eq!(token_prf(&[A, A], &[A]).precision, 0.5);
        assert_eq!(token_f1(&[], &[]), 1.0);
    }

    proptest! {
        #[test]
        fn scores_bounded_and_identity(
            h in prop::collection::vec(0u32..5, 0..8),
            r in prop::collection::vec(0u32..5, 0..8),
        ) {
            for n in 1..=4 {
                let b = bleu_n(&h, &r, n);
                prop_assert!((0.0..=1.0).contains(&b));
            }
            let rl = rouge_l(&h, &r);
            prop_assert!((0.0..=1.0).contains(&rl.f1));
            let sw = rouge_l(&r, &h);
            prop_assert_eq!(rl.precision, sw.recall);
            prop_assert_eq!(rl.recall, sw.precision);
            prop_assert!((0.0..=1.0).contains(&token_f1(&h, &r)));
            prop_assert_eq!(rouge_l(&h, &h).f1, 1.0);
            prop_assert_eq!(token_f1(&h, &h), 1.0);
            if !h.is_empty() {
                prop_assert_eq!(bleu_n(&h, &h, 1), 1.0);
            }
        }
    }
}
