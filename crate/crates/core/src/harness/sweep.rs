//! Grids of independent runs, executed in parallel and merged in grid order.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{run_cell, write_atomic, Cell, RunDir, RunOutput};
use super::HarnessError;
use crate::extraction::Method;
use crate::metrics::write_metrics_csv;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Budget,
    Lambda,
}

/// One run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run_id: String,
    pub method: Method,
    pub budget: Option<usize>,
    pub lambda1: Option<f64>,
    pub seed: u64,
    pub score: f64,
    pub fidelity: Option<f64>,
    pub performance_up: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    pub rouge_l_f1: f64,
    pub mean_kl: Option<f64>,
    pub mean_spearman: Option<f64>,
    pub victim_queries: usize,
}

impl SweepRow {
    fn from_run(r: &RunOutput) -> Self {
        let e = &r.evaluation;
        Self {
            run_id: r.run_id.clone(),
            method: r.cell.method,
            budget: r.cell.budget,
            lambda1: r.cell.lambda1,
            seed: r.cell.seed,
            score: e.score,
            fidelity: e.fidelity,
            performance_up: e.performance_up,
            z: e.z,
            p_value: e.p_value,
            rouge_l_f1: e.rouge_l_f1,
            mean_kl: e.mean_kl,
            mean_spearman: e.mean_spearman,
            victim_queries: r.victim_queries,
        }
    }

    /// Value of a summarized metric by name.
    pub fn value(&self, metric: &str) -> Option<f64> {
        match metric {
            "score" => Some(self.score),
            "fidelity" => self.fidelity,
            "performance-up" => self.performance_up,
            "z" => self.z,
            "p-value" => self.p_value,
            "rouge-l-f1" => Some(self.rouge_l_f1),
            "mean-kl" => self.mean_kl,
            "mean-spearman" => self.mean_spearman,
            _ => None,
        }
    }
}

const SUMMARIZED: [&str; 8] = [
    "score",
    "fidelity",
    "performance-up",
    "z",
    "p-value",
    "rouge-l-f1",
    "mean-kl",
    "mean-spearman",
];

/// Mean and sample standard deviation of one metric over the seeds of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub budget: Option<usize>,
    pub lambda1: Option<f64>,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Zero when `n == 1`.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<CellSummary>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

fn summarize(rows: &[SweepRow]) -> Vec<CellSummary> {
    let mut keys: Vec<(Method, Option<usize>, Option<f64>)> = Vec::new();
    for r in rows {
        let k = (r.method, r.budget, r.lambda1);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for (method, budget, lambda1) in keys {
        let group: Vec<&SweepRow> = rows
            .iter()
            .filter(|r| (r.method, r.budget, r.lambda1) == (method, budget, lambda1))
            .collect();
        for metric in SUMMARIZED {
            let vals: Option<Vec<f64>> = group.iter().map(|r| r.value(metric)).collect();
            if let Some(vals) = vals {
                let (mean, std) = mean_std(&vals);
                out.push(CellSummary {
                    method,
                    budget,
                    lambda1,
                    metric: metric.to_string(),
                    n: vals.len(),
                    mean,
                    std,
                });
            }
        }
    }
    out
}

impl SweepResult {
    fn from_runs(kind: SweepKind, runs: &[RunOutput]) -> Self {
        let rows: Vec<SweepRow> = runs.iter().map(SweepRow::from_run).collect();
        let summary = summarize(&rows);
        Self { kind, rows, summary }
    }

    pub fn cell(
        &self,
        method: Method,
        budget: Option<usize>,
        lambda1: Option<f64>,
        metric: &str,
    ) -> Option<&CellSummary> {
        self.summary.iter().find(|s| {
            s.method == method && s.budget == budget && s.lambda1 == lambda1 && s.metric == metric
        })
    }

    /// Per-seed values of one cell in seed order.
    pub fn values(&self, method: Method, budget: Option<usize>, lambda1: Option<f64>, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.budget == budget && r.lambda1 == lambda1)
            .filter_map(|r| r.value(metric))
            .collect()
    }
}

/// Runs every cell in a worker pool. Results keep the order of `cells`.
pub fn run_cells(
    cfg: &ExperimentConfig,
    cells: &[Cell],
    out: Option<&Path>,
    resume: bool,
) -> Result<Vec<RunOutput>, HarnessError> {
    cells
        .par_iter()
        .map(|c| {
            let dir = out.map(|o| RunDir::new(o.join(c.run_id(&cfg.name))));
            run_cell(cfg, c, dir.as_ref(), resume)
        })
        .collect()
}

/// Every budget and seed, MLE and LoRD from the same initial model and
/// victim. Training queries are nested across budgets.
pub fn run_query_budget_curve(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    resume: bool,
) -> Result<(SweepResult, Vec<RunOutput>), HarnessError> {
    cfg.validate()?;
    if cfg.query_budgets.is_empty() {
        return Err(HarnessError::Invalid(vec!["query_budgets: a budget sweep needs at least one budget".into()]));
    }
    let mut cells = Vec::new();
    for &b in &cfg.query_budgets {
        for &seed in &cfg.seeds {
            for method in [Method::Mle, Method::Lord] {
                cells.push(Cell {
                    budget: Some(b),
                    ..Cell::new(method, seed)
                });
            }
        }
    }
    finish(cfg, SweepKind::Budget, &cells, out, resume)
}

/// LoRD at every λ₁ and seed plus an MLE baseline per seed, all on the
/// full query set.
pub fn run_lambda_sweep(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    resume: bool,
) -> Result<(SweepResult, Vec<RunOutput>), HarnessError> {
    cfg.validate()?;
    if cfg.lambdas.is_empty() {
        return Err(HarnessError::Invalid(vec!["lambdas: a lambda sweep needs at least one value".into()]));
    }
    let mut cells = Vec::new();
    for &l in &cfg.lambdas {
        for &seed in &cfg.seeds {
            cells.push(Cell {
                lambda1: Some(l),
                ..Cell::new(Method::Lord, seed)
            });
        }
    }
    for &seed in &cfg.seeds {
        cells.push(Cell::new(Method::Mle, seed));
    }
    finish(cfg, SweepKind::Lambda, &cells, out, resume)
}

fn finish(
    cfg: &ExperimentConfig,
    kind: SweepKind,
    cells: &[Cell],
    out: Option<&Path>,
    resume: bool,
) -> Result<(SweepResult, Vec<RunOutput>), HarnessError> {
    let runs = run_cells(cfg, cells, out, resume)?;
    let result = SweepResult::from_runs(kind, &runs);
    if let Some(o) = out {
        write_sweep(o, cfg, &result, &runs)?;
    }
    Ok((result, runs))
}

/// Writes `config.json`, `sweep.csv`, `summary.csv` and the merged
/// `metrics.csv` under `out`.
pub fn write_sweep(
    out: &Path,
    cfg: &ExperimentConfig,
    result: &SweepResult,
    runs: &[RunOutput],
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("config.json"), cfg.to_json().as_bytes())?;
    let mut rows = csv::Writer::from_writer(Vec::new());
    for r in &result.rows {
        rows.serialize(r)?;
    }
    write_atomic(&out.join("sweep.csv"), &rows.into_inner().map_err(|e| e.into_error())?)?;
    let mut summary = csv::Writer::from_writer(Vec::new());
    for s in &result.summary {
        summary.serialize(s)?;
    }
    write_atomic(&out.join("summary.csv"), &summary.into_inner().map_err(|e| e.into_error())?)?;
    let metric_rows: Vec<_> = runs.iter().flat_map(RunOutput::metric_rows).collect();
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &metric_rows)?;
    write_atomic(&out.join("metrics.csv"), &buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::victim::{TaskFamily, TaskSpec, WatermarkKey};

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::new("sw", TaskSpec::new(TaskFamily::Copy, 4, 1, 2));
        c.extraction.periods = 5;
        c.seeds = vec![0, 1];
        c
    }

    #[test]
    fn lambda_grid_shape() {
        let mut c = small();
        c.watermark = Some(WatermarkKey::new(5).with_enforce_prob(1.0));
        c.lambdas = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let (r, _) = run_lambda_sweep(&c, None, false).unwrap();
        assert_eq!(r.rows.len(), 5 * 2 + 2);
        assert!(r.rows.iter().all(|row| row.z.is_some() && row.p_value.is_some()));
        assert_eq!(r.values(Method::Lord, None, Some(0.5), "z").len(), 2);
        assert!(r.cell(Method::Mle, None, None, "z").is_some());
    }

    #[test]
    fn budget_grid_pairs_methods() {
        let mut c = small();
        c.query_budgets = vec![1, 3];
        let (r, runs) = run_query_budget_curve(&c, None, false).unwrap();
        assert_eq!(r.rows.len(), 2 * 2 * 2);
        for pair in runs.chunks(2) {
            assert_eq!(pair[0].cell.seed, pair[1].cell.seed);
            assert_eq!(pair[0].victim_queries, pair[1].victim_queries);
        }
        let s = r.cell(Method::Lord, Some(3), None, "score").unwrap();
        assert_eq!(s.n, 2);
    }

    #[test]
    fn summary_uses_sample_std() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn empty_grid_is_invalid() {
        assert!(matches!(run_lambda_sweep(&small(), None, false), Err(HarnessError::Invalid(_))));
        assert!(matches!(run_query_budget_curve(&small(), None, false), Err(HarnessError::Invalid(_))));
    }
}
