use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sorted_desc, LmError, TabularLM, Token};

/// Temperature / nucleus sampling settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(temperature: f64, top_p: f64, seed: u64) -> Self {
        Self {
            temperature,
            top_p,
            seed,
        }
    }

    /// Settings used for victim responses: plain temperature-1 sampling.
    pub fn victim(seed: u64) -> Self {
        Self::new(1.0, 1.0, seed)
    }

    /// Settings used for the local model: temperature 0.8, top-p 0.98.
    pub fn local(seed: u64) -> Self {
        Self::new(0.8, 0.98, seed)
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(LmError::BadTemperature(self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LmError::BadTopP(self.top_p));
        }
        Ok(())
    }
}

/// The smallest probability-sorted prefix whose mass reaches `top_p`,
/// renormalized. Sorting is by probability descending, then id ascending.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<(Token, f64)> {
    let sorted = sorted_desc(probs);
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for (t, p) in sorted {
        kept.push((t, p));
        mass += p;
        if mass >= top_p {
            break;
        }
    }
    for e in kept.iter_mut() {
        e.1 /= mass;
    }
    kept
}

pub(crate) fn draw_nucleus<R: Rng + ?Sized>(probs: &[f64], top_p: f64, rng: &mut R) -> Token {
    if top_p >= 1.0 {
        return draw(probs, rng);
    }
    let kept = nucleus(probs, top_p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(t, p) in &kept {
        acc += p;
        if u < acc {
            return t;
        }
    }
    kept.last().map(|e| e.0).unwrap_or(0)
}

/// Inverse-CDF draw in id order. Falls back to the last positive entry when
/// rounding leaves `u` above the cumulative sum.
pub(crate) fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Token {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i as Token;
        }
    }
    last as Token
}

/// Samples a single response, seeding a fresh generator from `cfg.seed`.
pub fn sample_sequence(
    lm: &TabularLM,
    query: &[Token],
    cfg: &SamplerConfig,
) -> Result<Vec<Token>, LmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    lm.sample(query, cfg, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{ContextKey, Vocab};

    #[test]
    fn nucleus_tie_break_and_cut() {
        let kept = nucleus(&[0.25, 0.25, 0.5], 0.6);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].0, 2);
        assert_eq!(kept[1].0, 0);
        assert!((kept[0].1 - 0.5 / 0.75).abs() < 1e-15);
        let kept = nucleus(&[0.2, 0.5, 0.3], 0.01);
        assert_eq!(kept, vec![(1, 1.0)]);
    }

    #[test]
    fn tiny_top_p_is_argmax_decoding() {
        let queries = vec![vec![0], vec![1], vec![2]];
        let lm = TabularLM::randomized(Vocab::new(4).unwrap(), 1, 3, &queries, 1.0, 9).unwrap();
        let cfg = SamplerConfig::new(1.0, 0.01, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for q in &queries {
            let greedy = lm.greedy_response(q).unwrap();
            for _ in 0..5 {
                assert_eq!(lm.sample(q, &cfg, &mut rng).unwrap(), greedy);
            }
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let queries = vec![vec![0, 1]];
        let lm = TabularLM::randomized(Vocab::new(5).unwrap(), 2, 4, &queries, 1.0, 2).unwrap();
        let cfg = SamplerConfig::local(77);
        let a = sample_sequence(&lm, &queries[0], &cfg).unwrap();
        let b = sample_sequence(&lm, &queries[0], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_frequencies_match_distribution() {
        let mut lm = TabularLM::new(Vocab::new(4).unwrap(), 1, 1);
        let ctx = ContextKey::root(&[0]);
        lm.set_logits(&ctx, vec![0.3, -0.4, 1.1, 0.0]).unwrap();
        let exact = lm.next_token_dist(&ctx, 1.0).unwrap();
        let cfg = SamplerConfig::victim(0);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 100_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let y = lm.sample(&[0], &cfg, &mut rng).unwrap();
            let t = y.first().copied().unwrap_or(3);
            counts[t as usize] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let p = exact.probs[k];
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (c as f64 - n as f64 * p).abs() <= 3.0 * sigma,
                "token {k}: {c} vs {}",
                n as f64 * p
            );
        }
    }

    #[test]
    fn invalid_config() {
        assert!(SamplerConfig::new(0.0, 0.5, 0).validate().is_err());
        assert!(SamplerConfig::new(1.0, 0.0, 0).validate().is_err());
        assert!(SamplerConfig::new(1.0, 1.5, 0).validate().is_err());
        assert!(SamplerConfig::local(0).validate().is_ok());
    }
}
