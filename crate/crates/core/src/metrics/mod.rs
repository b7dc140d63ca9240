//! Evaluation metrics, fidelity ratios and watermark detection.

mod lexical;
mod watermark;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{LmError, SamplerConfig, TabularLM, Token};
use crate::seeding;
use crate::victim::{VictimError, VictimModel};

pub use lexical::{bleu_n, corpus_bleu, ngram_precision, rouge_l, token_f1, token_prf, Prf};
pub use watermark::{green_counts, normal_sf, wm_scan, wm_scan_corpus, Tail, WatermarkVerdict};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Victim(#[from] VictimError),
    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("length mismatch: {0}")]
    Mismatch(String),
}

/// A per-example similarity against a reference, higher is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Metric {
    Bleu(u8),
    RougeL,
    TokenF1,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Bleu(1),
        Metric::Bleu(2),
        Metric::Bleu(3),
        Metric::Bleu(4),
        Metric::RougeL,
        Metric::TokenF1,
    ];

    pub fn name(&self) -> String {
        match self {
            Metric::Bleu(n) => format!("bleu-{n}"),
            Metric::RougeL => "rouge-l".into(),
            Metric::TokenF1 => "token-f1".into(),
        }
    }

    pub fn higher_is_better(&self) -> bool {
        true
    }

    pub fn score(&self, hyp: &[Token], reference: &[Token]) -> f64 {
        match *self {
            Metric::Bleu(n) => bleu_n(hyp, reference, n as usize),
            Metric::RougeL => rouge_l(hyp, reference).f1,
            Metric::TokenF1 => token_f1(hyp, reference),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rouge-l" => Ok(Metric::RougeL),
            "token-f1" => Ok(Metric::TokenF1),
            _ => match s.strip_prefix("bleu-").and_then(|n| n.parse::<u8>().ok()) {
                Some(n @ 1..=4) => Ok(Metric::Bleu(n)),
                _ => Err(format!("unknown metric {s:?}")),
            },
        }
    }
}

impl From<Metric> for String {
    fn from(m: Metric) -> String {
        m.name()
    }
}

impl TryFrom<String> for Metric {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

/// Per-example scores of one metric with their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub higher_is_better: bool,
    pub per_example: Vec<f64>,
    /// Mean of the per-example scores.
    pub mean: f64,
    /// Corpus-level value with pooled n-gram counts (BLEU only).
    pub corpus: Option<f64>,
}

pub fn report(metric: Metric, hyps: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<MetricReport, MetricsError> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::Mismatch(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let per_example: Vec<f64> = hyps.iter().zip(refs).map(|(h, r)| metric.score(h, r)).collect();
    let mean = if per_example.is_empty() {
        0.0
    } else {
        per_example.iter().sum::<f64>() / per_example.len() as f64
    };
    let corpus = match metric {
        Metric::Bleu(n) => Some(corpus_bleu(hyps, refs, n as usize)),
        _ => None,
    };
    Ok(MetricReport {
        metric: metric.name(),
        higher_is_better: metric.higher_is_better(),
        per_example,
        mean,
        corpus,
    })
}

/// Generator for example `i` of an evaluation; every model sees the same
/// stream for the same example.
fn example_rng(seed: u64, i: usize) -> rand_chacha::ChaCha8Rng {
    seeding::rng(seed, &[seeding::label("eval"), i as u64])
}

/// Samples one response per query from a local model.
pub fn sample_responses(
    lm: &TabularLM,
    queries: &[Vec<Token>],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Vec<Token>>, MetricsError> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| Ok(lm.sample(q, sampler, &mut example_rng(seed, i))?))
        .collect()
}

/// Samples one response per query from the victim, watermarked if configured.
pub fn victim_responses(
    victim: &VictimModel,
    queries: &[Vec<Token>],
    seed: u64,
) -> Result<Vec<Vec<Token>>, MetricsError> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| Ok(victim.generate(q, &mut example_rng(seed, i))?))
        .collect()
}

/// Fidelity `F = ΣM(y_N, y) / ΣM(y_vic, y)` and performance-up
/// `P = ΣM(y_N, y) / ΣM(y_0, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub fidelity: f64,
    pub performance_up: f64,
    pub sum_extracted: f64,
    pub sum_victim: f64,
    pub sum_initial: f64,
}

pub fn fidelity_from_responses(
    metric: Metric,
    references: &[Vec<Token>],
    extracted: &[Vec<Token>],
    victim: &[Vec<Token>],
    initial: &[Vec<Token>],
) -> Result<FidelityReport, MetricsError> {
    let n = references.len();
    if extracted.len() != n || victim.len() != n || initial.len() != n {
        return Err(MetricsError::Mismatch("response sets differ in length".into()));
    }
    let sum = |ys: &[Vec<Token>]| -> f64 { ys.iter().zip(references).map(|(h, r)| metric.score(h, r)).sum() };
    let (sn, sv, s0) = (sum(extracted), sum(victim), sum(initial));
    if sv == 0.0 {
        return Err(MetricsError::UndefinedRatio(format!(
            "victim responses score 0 on {metric} over {n} examples"
        )));
    }
    if s0 == 0.0 {
        return Err(MetricsError::UndefinedRatio(format!(
            "initial model responses score 0 on {metric} over {n} examples"
        )));
    }
    Ok(FidelityReport {
        fidelity: sn / sv,
        performance_up: sn / s0,
        sum_extracted: sn,
        sum_victim: sv,
        sum_initial: s0,
    })
}

/// Samples from the three models with paired per-example seeds and
/// computes [`FidelityReport`] against `references`.
#[allow(clippy::too_many_arguments)]
pub fn fidelity_and_performance_up(
    metric: Metric,
    queries: &[Vec<Token>],
    references: &[Vec<Token>],
    initial: &TabularLM,
    extracted: &TabularLM,
    victim: &VictimModel,
    local_sampler: &SamplerConfig,
    seed: u64,
) -> Result<FidelityReport, MetricsError> {
    let yn = sample_responses(extracted, queries, local_sampler, seed)?;
    let y0 = sample_responses(initial, queries, local_sampler, seed)?;
    let yv = victim_responses(victim, queries, seed)?;
    fidelity_from_responses(metric, references, &yn, &yv, &y0)
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub metric: String,
    pub split: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(run_id: impl Into<String>, metric: impl Into<String>, split: impl Into<String>, value: f64) -> Self {
        Self {
            run_id: run_id.into(),
            metric: metric.into(),
            split: split.into(),
            value,
        }
    }
}

/// Writes rows as CSV with the header `run_id,metric,split,value`.
pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricRow]) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricRow>, MetricsError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::victim::{build_victim, TaskFamily, TaskSpec};

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
            let j = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Metric>(&j).unwrap(), m);
        }
        assert!("bleu-5".parse::<Metric>().is_err());
    }

    #[test]
    fn report_aggregates() {
        let hyps = vec![vec![0, 1], vec![2]];
        let refs = vec![vec![0, 1], vec![3]];
        let r = report(Metric::TokenF1, &hyps, &refs).unwrap();
        assert_eq!(r.per_example, vec![1.0, 0.0]);
        assert_eq!(r.mean, 0.5);
        assert!(r.corpus.is_none());
        let b = report(Metric::Bleu(1), &hyps, &refs).unwrap();
        assert!((b.corpus.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fidelity_identities() {
        let spec = TaskSpec::new(TaskFamily::MapLookup, 4, 1, 2).with_determinism(0.7).with_seed(2);
        let (victim, truth) = build_victim(&spec).unwrap();
        let qs = truth.queries();
        let refs: Vec<Vec<Token>> = qs.iter().map(|q| truth.reference(q).unwrap().to_vec()).collect();
        let init = crate::extraction::fresh_local(&victim.lm);
        let sampler = victim.sampler;
        // The victim evaluated as the extracted model, same sampler and seeds.
        let r = fidelity_and_performance_up(Metric::TokenF1, &qs, &refs, &init, &victim.lm, &victim, &sampler, 5)
            .unwrap();
        assert_eq!(r.fidelity, 1.0);
        let r = fidelity_and_performance_up(Metric::TokenF1, &qs, &refs, &init, &init, &victim, &sampler, 5).unwrap();
        assert_eq!(r.performance_up, 1.0);
    }

    #[test]
    fn fidelity_hand_ratio_and_zero_denominator() {
        let refs = vec![vec![0, 1], vec![2, 2]];
        let yv = vec![vec![0, 1], vec![2, 2]];
        let yn = vec![vec![0, 1], vec![2, 3]];
        let y0 = vec![vec![3, 3], vec![2, 3]];
        let r = fidelity_from_responses(Metric::TokenF1, &refs, &yn, &yv, &y0).unwrap();
        // ΣM: extracted 1 + 0.5, victim 2, initial 0.5.
        assert!((r.fidelity - 0.75).abs() < 1e-12);
        assert!((r.performance_up - 3.0).abs() < 1e-12);
        let zero = vec![vec![3], vec![3]];
        assert!(matches!(
            fidelity_from_responses(Metric::TokenF1, &refs, &yn, &zero, &y0),
            Err(MetricsError::UndefinedRatio(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            MetricRow::new("lord-s0", "token-f1", "test", 0.5),
            MetricRow::new("mle-s0", "wm-z", "test", -1.25),
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("run_id,metric,split,value\n"));
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), rows);
    }
}
