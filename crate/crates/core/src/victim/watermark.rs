//! Green-list watermark keyed on the previously emitted token.

use serde::{Deserialize, Serialize};

use crate::lm::Token;
use crate::seeding::splitmix64;

/// Restricted mass below this is treated as empty and triggers the
/// unrestricted fallback. Victim tables carry floor logits rather than exact
/// zeros, so an exact-zero test would never fire.
pub const MIN_GREEN_MASS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkKey {
    pub salt: u64,
    /// Fraction γ of the vocabulary placed in each green set.
    #[serde(default = "default_gamma")]
    pub green_fraction: f64,
    /// Probability δ that a step is restricted to the green set.
    #[serde(default = "default_delta")]
    pub enforce_prob: f64,
}

fn default_gamma() -> f64 {
    0.5
}

fn default_delta() -> f64 {
    0.9
}

impl WatermarkKey {
    pub fn new(salt: u64) -> Self {
        Self {
            salt,
            green_fraction: default_gamma(),
            enforce_prob: default_delta(),
        }
    }

    pub fn with_enforce_prob(mut self, delta: f64) -> Self {
        self.enforce_prob = delta;
        self
    }

    pub fn with_green_fraction(mut self, gamma: f64) -> Self {
        self.green_fraction = gamma;
        self
    }

    pub fn green_size(&self, vocab_size: usize) -> usize {
        (self.green_fraction * vocab_size as f64).round() as usize
    }

    /// Realized green fraction `|green| / V`, the null rate of the detector.
    pub fn effective_fraction(&self, vocab_size: usize) -> f64 {
        self.green_size(vocab_size) as f64 / vocab_size as f64
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), String> {
        if !(self.green_fraction > 0.0 && self.green_fraction < 1.0) {
            return Err(format!(
                "green_fraction must lie in (0, 1), got {}",
                self.green_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.enforce_prob) {
            return Err(format!(
                "enforce_prob must lie in [0, 1], got {}",
                self.enforce_prob
            ));
        }
        let k = self.green_size(vocab_size);
        if k < 1 || k >= vocab_size {
            return Err(format!(
                "green set size {k} must satisfy 1 <= size < V = {vocab_size}"
            ));
        }
        Ok(())
    }

    /// Membership mask of the green set seeded by `prev`.
    pub fn green_mask(&self, prev: Token, vocab_size: usize) -> Vec<bool> {
        let mut mask = vec![false; vocab_size];
        for t in green_set(self, prev, vocab_size) {
            mask[t as usize] = true;
        }
        mask
    }

    /// The sampling distribution of one step. When `enforce` is set the
    /// distribution is restricted to green tokens plus `end`; the flag in the
    /// result reports a fallback to the unrestricted distribution.
    pub fn step_distribution(
        &self,
        probs: &[f64],
        prev: Token,
        end: Token,
        enforce: bool,
    ) -> (Vec<f64>, bool) {
        if !enforce {
            return (probs.to_vec(), false);
        }
        let mask = self.green_mask(prev, probs.len());
        let restricted: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| if mask[i] || i == end as usize { p } else { 0.0 })
            .collect();
        let mass: f64 = restricted.iter().sum();
        if mass < MIN_GREEN_MASS {
            return (probs.to_vec(), true);
        }
        (restricted.into_iter().map(|p| p / mass).collect(), false)
    }
}

/// Counters collected while generating watermarked text.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatermarkTrace {
    /// Emitted non-end tokens.
    pub steps: usize,
    /// Emitted tokens whose step was restricted to the green set.
    pub enforced: usize,
    /// Enforced steps that fell back to the unrestricted distribution.
    pub fallbacks: usize,
}

/// The green set for the step following `prev`: a pseudo-random subset of
/// `round(γ·V)` ids drawn by a Fisher-Yates shuffle seeded with
/// `splitmix64(salt ^ prev)`. Returned in ascending id order.
pub fn green_set(key: &WatermarkKey, prev: Token, vocab_size: usize) -> Vec<Token> {
    let mut state = splitmix64(key.salt ^ prev as u64);
    let mut ids: Vec<Token> = (0..vocab_size as Token).collect();
    let k = key.green_size(vocab_size).min(vocab_size);
    // Partial shuffle: position i receives a uniform pick from ids[i..].
    for i in 0..k {
        state = splitmix64(state);
        let span = (vocab_size - i) as u64;
        let j = i + (((state as u128 * span as u128) >> 64) as usize);
        ids.swap(i, j);
    }
    let mut green = ids[..k].to_vec();
    green.sort_unstable();
    green
}
