//! Experiment configuration, single runs, sweeps and persisted artifacts.
//!
//! A run is a pure function of its [`ExperimentConfig`] and seed. Output
//! directories hold `config.json`, `runlog.jsonl`, `metrics.csv`, the final
//! `model.json` and resumable state under `checkpoints/`.

mod config;
mod run;
mod sweep;
mod verify;
mod viz;

use thiserror::Error;

use crate::extraction::ExtractionError;
use crate::lm::LmError;
use crate::metrics::MetricsError;
use crate::oracle::OracleError;
use crate::victim::VictimError;

pub use config::{EvalConfig, EvalSplit, ExperimentConfig};
pub use run::{
    evaluate_model, instance, run_cell, Cell, Evaluation, Instance, RunDir, RunOutput,
};
pub use sweep::{
    run_cells, run_lambda_sweep, run_query_budget_curve, write_sweep, CellSummary, SweepKind, SweepResult,
    SweepRow,
};
pub use verify::{
    consistency_suite, convergence_suite, gradient_suite, rlhf_suite, run_verify, ConsistencySuite,
    ConvergenceSuite, GradientSuite, RlhfSuite, SuiteOutcome, GRAD_REL_TOL, KINK_MARGIN,
};
pub use viz::{
    distribution_stats, emit_distribution_viz, response_contexts, write_viz_csv, DistStats, VizRow,
    VIZ_TOP_K,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Victim(#[from] VictimError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}
