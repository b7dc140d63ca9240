use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::extraction::{ExtractionConfig, Method};
use crate::lm::{SamplerConfig, DEFAULT_ENUMERATION_CAP};
use crate::metrics::Metric;
use crate::victim::{TaskSpec, WatermarkKey};

/// Largest query set a run will enumerate.
const MAX_QUERIES: u128 = 100_000;

/// Which queries evaluation samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    /// Every query of the task, including those never sent to the victim.
    #[default]
    All,
    /// Only the queries in the training budget.
    Train,
}

impl EvalSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::Train => "train",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metric: Metric,
    /// Responses drawn per evaluation query.
    pub samples_per_query: usize,
    pub split: EvalSplit,
    /// Local sampler for evaluation; the extraction sampler when absent.
    pub sampler: Option<SamplerConfig>,
    /// Base seed of evaluation sampling; the run seed is added.
    pub seed: u64,
    /// Record the metric in the run log every this many periods; 0 disables.
    pub eval_every: usize,
    /// Compare every reachable context with the victim.
    pub agreement: bool,
    pub enumeration_cap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: Metric::TokenF1,
            samples_per_query: 1,
            split: EvalSplit::All,
            sampler: None,
            seed: 1000,
            eval_every: 0,
            agreement: true,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

/// A complete, self-describing experiment.
///
/// Per run seed `s` the victim task and its sampler use `task.seed + s`,
/// the watermark salt is `salt + s`, extraction uses seed `s` and
/// evaluation samples with `eval.seed + s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskSpec,
    #[serde(default)]
    pub watermark: Option<WatermarkKey>,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub extraction: ExtractionConfig,
    /// Scale of random initial local logits; 0 starts from uniform.
    #[serde(default)]
    pub local_init_scale: f64,
    /// Training budgets; empty means every query in canonical order.
    #[serde(default)]
    pub query_budgets: Vec<usize>,
    /// λ₁ grid of the λ sweep.
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Query a served victim at this address instead of the in-process one.
    #[serde(default)]
    pub victim_addr: Option<String>,
    /// Save resumable state every this many periods; 0 only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_method() -> Method {
    Method::Lord
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn new(name: impl Into<String>, task: TaskSpec) -> Self {
        Self {
            name: name.into(),
            task,
            watermark: None,
            method: default_method(),
            extraction: ExtractionConfig::default(),
            local_init_scale: 0.0,
            query_budgets: Vec::new(),
            lambdas: Vec::new(),
            seeds: default_seeds(),
            eval: EvalConfig::default(),
            output_dir: None,
            victim_addr: None,
            checkpoint_every: 0,
        }
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn eval_sampler(&self) -> SamplerConfig {
        self.eval.sampler.unwrap_or(self.extraction.sampler)
    }

    /// Collects every problem rather than stopping at the first.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut errs = Vec::new();
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            errs.push(format!(
                "name: must be non-empty ASCII letters, digits, '-', '_' or '.', got {:?}",
                self.name
            ));
        }
        let task_ok = match self.task.validate() {
            Ok(()) => true,
            Err(e) => {
                errs.push(format!("task: {e}"));
                false
            }
        };
        let n_queries = self.task.query_count();
        if task_ok && n_queries > MAX_QUERIES {
            errs.push(format!("task: {n_queries} queries exceed the limit of {MAX_QUERIES}"));
        }
        if let Some(key) = &self.watermark {
            if let Err(e) = key.validate(self.task.vocab_size) {
                errs.push(format!("watermark: {e}"));
            }
        }
        if let Err(e) = self.extraction.validate() {
            errs.push(format!("extraction: {e}"));
        }
        if !(self.local_init_scale >= 0.0) || !self.local_init_scale.is_finite() {
            errs.push(format!(
                "local_init_scale: must be finite and >= 0, got {}",
                self.local_init_scale
            ));
        }
        for &b in &self.query_budgets {
            if b == 0 || (task_ok && b as u128 > n_queries) {
                errs.push(format!("query_budgets: {b} is outside 1..={n_queries}"));
            }
        }
        for &l in &self.lambdas {
            if !(0.0..=1.0).contains(&l) {
                errs.push(format!("lambdas: {l} is outside [0, 1]"));
            }
        }
        if self.seeds.is_empty() {
            errs.push("seeds: at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            errs.push("seeds: duplicate seeds".into());
        }
        if self.eval.samples_per_query == 0 {
            errs.push("eval.samples_per_query: must be at least 1".into());
        }
        if self.eval.enumeration_cap == 0 {
            errs.push("eval.enumeration_cap: must be at least 1".into());
        }
        if let Some(s) = &self.eval.sampler {
            if let Err(e) = s.validate() {
                errs.push(format!("eval.sampler: {e}"));
            }
        }
        if let Some(addr) = &self.victim_addr {
            if addr.trim().is_empty() {
                errs.push("victim_addr: empty address".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Invalid(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::victim::TaskFamily;

    fn base() -> ExperimentConfig {
        ExperimentConfig::new("t", TaskSpec::new(TaskFamily::Copy, 4, 1, 2))
    }

    #[test]
    fn json_round_trip() {
        let mut c = base();
        c.watermark = Some(WatermarkKey::new(3));
        c.query_budgets = vec![1, 2];
        c.lambdas = vec![0.0, 1.0];
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let c = ExperimentConfig::from_json(
            r#"{"name":"m","task":{"family":"copy","vocab_size":4,"query_len":1,"response_len":2,"determinism":1.0,"seed":0}}"#,
        )
        .unwrap();
        assert_eq!(c.method, Method::Lord);
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.extraction, ExtractionConfig::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&base().to_json()).unwrap();
        v["lambda"] = serde_json::json!(0.5);
        assert!(matches!(
            ExperimentConfig::from_json(&v.to_string()),
            Err(HarnessError::Json(_))
        ));
    }

    #[test]
    fn every_problem_is_reported() {
        let mut c = base();
        c.name = "a b".into();
        c.query_budgets = vec![0, 99];
        c.lambdas = vec![1.5];
        c.seeds = vec![];
        c.eval.samples_per_query = 0;
        c.extraction.kappa = -1.0;
        let Err(HarnessError::Invalid(errs)) = c.validate() else {
            panic!("expected invalid");
        };
        for field in ["name", "query_budgets", "lambdas", "seeds", "eval.samples_per_query", "extraction"] {
            assert!(errs.iter().any(|e| e.starts_with(field)), "{field}: {errs:?}");
        }
        assert_eq!(errs.iter().filter(|e| e.starts_with("query_budgets")).count(), 2);
    }

    #[test]
    fn zero_periods_are_valid() {
        let mut c = base();
        c.extraction.periods = 0;
        assert!(c.validate().is_ok());
    }
}
