//! Positive/negative ordering and cold-start replacement.

use serde::{Deserialize, Serialize};

use super::{ExtractionConfig, Tau1Scale, ThresholdPairing};
use crate::lm::Token;

/// Last period's candidate pair with its likelihood changes.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub positive: Vec<Token>,
    pub negative: Vec<Token>,
    pub delta_pos: f64,
    pub delta_neg: f64,
    /// Current `log P(y|x)` of each candidate.
    pub logp_pos: f64,
    pub logp_neg: f64,
    /// Number of scored steps of each candidate.
    pub steps_pos: usize,
    pub steps_neg: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub positive: Vec<Token>,
    pub negative: Vec<Token>,
    pub delta_pos: f64,
    pub delta_neg: f64,
    pub swapped: bool,
    pub replaced: bool,
}

/// The positive's probability on the configured scale.
fn scaled_prob(logp: f64, steps: usize, scale: Tau1Scale) -> f64 {
    match scale {
        Tau1Scale::Probability => logp.exp(),
        Tau1Scale::LogProbability => logp,
        Tau1Scale::PerTokenProbability => (logp / steps.max(1) as f64).exp(),
    }
}

/// Whether the positive sample is replaced by the victim response, given
/// its current log-probability and likelihood change.
pub fn replacement_condition(logp_pos: f64, steps_pos: usize, delta_pos: f64, cfg: &ExtractionConfig) -> bool {
    let p = scaled_prob(logp_pos, steps_pos, cfg.tau1_scale);
    match cfg.pairing {
        ThresholdPairing::ProbabilityFirst => p < cfg.tau1 && delta_pos < cfg.tau2,
        ThresholdPairing::DeltaFirst => !(delta_pos > cfg.tau1 && p > cfg.tau2),
    }
}

/// Orders the pair so that `Δ⁺ ≥ Δ⁻`, then substitutes `y_vic` for the
/// positive when the configured cold-start condition holds.
pub fn select_pos_neg(c: Candidates, victim_response: &[Token], cfg: &ExtractionConfig) -> Selection {
    let Candidates {
        mut positive,
        mut negative,
        mut delta_pos,
        mut delta_neg,
        mut logp_pos,
        logp_neg,
        mut steps_pos,
        steps_neg,
    } = c;
    let swapped = delta_pos < delta_neg;
    if swapped {
        std::mem::swap(&mut positive, &mut negative);
        std::mem::swap(&mut delta_pos, &mut delta_neg);
        logp_pos = logp_neg;
        steps_pos = steps_neg;
    }
    let replaced = replacement_condition(logp_pos, steps_pos, delta_pos, cfg);
    if replaced {
        positive = victim_response.to_vec();
    }
    Selection {
        positive,
        negative,
        delta_pos,
        delta_neg,
        swapped,
        replaced,
    }
}
