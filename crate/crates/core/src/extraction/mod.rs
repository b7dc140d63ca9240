//! Stealing trainers: maximum likelihood, knowledge distillation and LoRD.
//!
//! All three train a [`TabularLM`] by full-batch gradient descent on logits,
//! using closed-form gradients. LoRD alternates between sampling a fresh
//! candidate pair per query from the current model and scoring last
//! period's pair against the victim response; see [`select_pos_neg`] for the
//! swap and cold-start rules.

mod loss;
mod runlog;
mod select;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{LmError, SamplerConfig, TabularLM};
use crate::victim::VictimError;

pub use loss::{
    clip, clip_slope, kd_loss_and_grad, kd_targets_from_records, kd_targets_from_victim,
    lord_delta, lord_loss_and_grad, mle_loss_and_grad, sigmoid, soften, KdTargets, LordPair,
    LossBreakdown, WEIGHT_EPS,
};
pub use runlog::{PairTrace, PeriodRecord, RunLog};
pub use select::{replacement_condition, select_pos_neg, Candidates, Selection};
pub use train::{
    collect_records, kd_train, lord_train, mle_train, run_to_end, Hooks, Method, TrainState,
};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Victim(#[from] VictimError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("no victim distribution for context {0}")]
    MissingTarget(String),
    #[error("victim-weighted objective needs grey-box log-probabilities")]
    MissingVictimLogprob,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Which LoRD loss is minimized per pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossForm {
    /// Objective plus clipped regularizer.
    Sum,
    /// Sigmoid of the sum.
    Sigmoid,
    /// `(1 - λ₁)·objective + λ₁·clipped regularizer`.
    Lambda,
}

/// How the cold-start threshold τ₁ is compared with the positive sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Tau1Scale {
    /// `P(y⁺|x) < τ₁`, i.e. `log P < ln τ₁`.
    #[default]
    Probability,
    /// `log P(y⁺|x) < τ₁` taken literally.
    LogProbability,
    /// Geometric mean per-step probability `< τ₁`.
    PerTokenProbability,
}

/// Which quantity each threshold guards in the cold-start rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdPairing {
    /// Replace when `P(y⁺) < τ₁` and `Δ⁺ < τ₂`.
    #[default]
    ProbabilityFirst,
    /// Keep `y⁺` only when `Δ⁺ > τ₁` and `P(y⁺) > τ₂`; replace otherwise.
    DeltaFirst,
}

/// Distillation softening of the second KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KdSoftening {
    /// `softmax(logits / T)`; on a probability vector, `p^(1/T)` renormalized.
    #[default]
    Logits,
    /// `softmax(p / T)` applied to probabilities.
    Probabilities,
}

/// Where distillation targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KdTargetSource {
    /// Grey-box top-k lists, renormalized.
    #[default]
    TopK,
    /// Full victim next-token distributions (simulator only).
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// Number of training periods `N_t`.
    pub periods: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub tau1_scale: Tau1Scale,
    pub pairing: ThresholdPairing,
    pub lambda1: f64,
    /// Clip bound κ of the regularizer.
    pub kappa: f64,
    pub learning_rate: f64,
    /// Local sampler for LoRD candidates.
    pub sampler: SamplerConfig,
    pub loss_form: LossForm,
    /// Divide the objective by the stop-gradient gap
    /// `|log P_θ(y_vic) - log P_vic(y_vic)|` (needs grey-box records).
    pub victim_weighted_objective: bool,
    pub kd_temperature: f64,
    pub kd_softening: KdSoftening,
    pub kd_targets: KdTargetSource,
    pub seed: u64,
    /// Keep per-pair traces in the run log.
    pub trace_pairs: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            periods: 512,
            tau1: 0.8,
            tau2: -0.1,
            tau1_scale: Tau1Scale::default(),
            pairing: ThresholdPairing::default(),
            lambda1: 0.5,
            kappa: 1.0,
            learning_rate: 0.05,
            sampler: SamplerConfig::local(0),
            loss_form: LossForm::Lambda,
            victim_weighted_objective: false,
            kd_temperature: 2.0,
            kd_softening: KdSoftening::default(),
            kd_targets: KdTargetSource::default(),
            seed: 0,
            trace_pairs: false,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        let bad = |m: String| Err(ExtractionError::Config(m));
        if !(0.0..=1.0).contains(&self.lambda1) {
            return bad(format!("lambda1 must lie in [0, 1], got {}", self.lambda1));
        }
        if !(self.kappa > 0.0) {
            return bad(format!("kappa must be positive, got {}", self.kappa));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.kd_temperature >= 1.0) || !self.kd_temperature.is_finite() {
            return bad(format!("kd_temperature must be >= 1, got {}", self.kd_temperature));
        }
        if !self.tau1.is_finite() || !self.tau2.is_finite() {
            return bad("thresholds must be finite".into());
        }
        self.sampler.validate()?;
        Ok(())
    }
}

/// Starting point for a local model over the victim's shape.
pub fn fresh_local(victim: &TabularLM) -> TabularLM {
    TabularLM::new(
        victim.vocab().clone(),
        victim.max_query_len(),
        victim.max_response_len(),
    )
}
