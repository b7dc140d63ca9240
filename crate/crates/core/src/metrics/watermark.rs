//! Green-list watermark detection by a binomial z-test.

use libm::erfc;
use serde::{Deserialize, Serialize};

use crate::lm::Token;
use crate::victim::{green_set, WatermarkKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Tail {
    /// Large green counts are evidence of a watermark.
    #[default]
    Upper,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WatermarkVerdict {
    pub green: usize,
    pub total: usize,
    /// Null green rate `|green set| / V`.
    pub gamma: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Standard normal upper tail `1 - Φ(z)`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

impl WatermarkVerdict {
    /// Verdict from counts. With no scored tokens the test is uninformative:
    /// `z = 0` and `p = 1`.
    pub fn from_counts(green: usize, total: usize, gamma: f64, tail: Tail) -> Self {
        if total == 0 {
            return Self {
                green,
                total,
                gamma,
                z: 0.0,
                p_value: 1.0,
            };
        }
        let t = total as f64;
        let z = (green as f64 - gamma * t) / (t * gamma * (1.0 - gamma)).sqrt();
        let p_value = match tail {
            Tail::Upper => normal_sf(z),
            Tail::TwoSided => erfc(z.abs() / std::f64::consts::SQRT_2),
        };
        Self {
            green,
            total,
            gamma,
            z,
            p_value,
        }
    }
}

/// Green and scored token counts of one response. The green set at each
/// position is seeded by the previous token, the end token at the start.
/// End tokens are not scored.
pub fn green_counts(tokens: &[Token], key: &WatermarkKey, vocab_size: usize) -> (usize, usize) {
    let end = (vocab_size - 1) as Token;
    let mut prev = end;
    let (mut green, mut total) = (0, 0);
    for &t in tokens {
        if t == end {
            prev = end;
            continue;
        }
        total += 1;
        if green_set(key, prev, vocab_size).binary_search(&t).is_ok() {
            green += 1;
        }
        prev = t;
    }
    (green, total)
}

pub fn wm_scan(tokens: &[Token], key: &WatermarkKey, vocab_size: usize, tail: Tail) -> WatermarkVerdict {
    let (g, t) = green_counts(tokens, key, vocab_size);
    WatermarkVerdict::from_counts(g, t, key.effective_fraction(vocab_size), tail)
}

/// Pooled test over many responses, each scored from a fresh start.
pub fn wm_scan_corpus(
    responses: &[Vec<Token>],
    key: &WatermarkKey,
    vocab_size: usize,
    tail: Tail,
) -> WatermarkVerdict {
    let (mut g, mut t) = (0, 0);
    for r in responses {
        let (a, b) = green_counts(r, key, vocab_size);
        g += a;
        t += b;
    }
    WatermarkVerdict::from_counts(g, t, key.effective_fraction(vocab_size), tail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn null_center_and_arithmetic() {
        let v = WatermarkVerdict::from_counts(50, 100, 0.5, Tail::Upper);
        assert_eq!(v.z, 0.0);
        assert!((v.p_value - 0.5).abs() < 1e-15);
        let v = WatermarkVerdict::from_counts(100, 100, 0.5, Tail::Upper);
        assert!((v.z - 10.0).abs() < 1e-12);
        let two = WatermarkVerdict::from_counts(0, 100, 0.5, Tail::TwoSided);
        assert!((two.p_value - 2.0 * normal_sf(10.0)).abs() < 1e-30);
    }

    #[test]
    fn normal_tail_reference_values() {
        // Φ(1.959963984540054) = 0.975.
        assert!((normal_sf(1.959963984540054) - 0.025).abs() < 1e-12);
        assert!((normal_sf(-1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((normal_sf(3.0) - 0.001_349_898_031_630_094_6).abs() < 1e-12);
    }

    #[test]
    fn z_invariant_under_proportional_extension() {
        // Scaling both counts by k scales z by sqrt(k); keeping the fraction
        // fixed at the null rate keeps z = 0.
        let a = WatermarkVerdict::from_counts(30, 40, 0.5, Tail::Upper);
        let b = WatermarkVerdict::from_counts(120, 160, 0.5, Tail::Upper);
        assert!((b.z - 2.0 * a.z).abs() < 1e-12);
        let c = WatermarkVerdict::from_counts(80, 160, 0.5, Tail::Upper);
        assert_eq!(c.z, 0.0);
    }

    #[test]
    fn null_false_positive_rate() {
        let key = WatermarkKey::new(17);
        let v = 16;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let trials = 1000;
        let mut hits = 0;
        for _ in 0..trials {
            let text: Vec<Token> = (0..200).map(|_| rng.random_range(0..(v - 1) as Token)).collect();
            if wm_scan(&text, &key, v, Tail::Upper).p_value < 0.05 {
                hits += 1;
            }
        }
        let rate = hits as f64 / trials as f64;
        let sigma = (0.05f64 * 0.95 / trials as f64).sqrt();
        assert!((rate - 0.05).abs() <= 3.0 * sigma, "{rate}");
    }

    #[test]
    fn end_tokens_reset_and_are_skipped() {
        let key = WatermarkKey::new(1);
        let (_, t) = green_counts(&[0, 1, 7, 2], &key, 8);
        assert_eq!(t, 3);
    }
}
