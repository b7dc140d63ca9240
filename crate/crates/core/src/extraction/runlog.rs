//! Append-only per-period training records, stored as JSON lines.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::ExtractionError;

/// One LoRD pair as scored in a period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTrace {
    pub query_index: usize,
    pub delta_pos: f64,
    pub delta_neg: f64,
    pub logp_pos: f64,
    pub steps_pos: usize,
    pub swapped: bool,
    pub replaced: bool,
    pub degenerate: bool,
    pub total: f64,
    #[serde(default)]
    pub sigmoid: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    /// 1-based period index.
    pub period: usize,
    /// Mean loss over the training set.
    pub loss: f64,
    #[serde(default)]
    pub objective: Option<f64>,
    #[serde(default)]
    pub regularizer: Option<f64>,
    #[serde(default)]
    pub delta_pos: Option<f64>,
    #[serde(default)]
    pub delta_neg: Option<f64>,
    #[serde(default)]
    pub swaps: usize,
    #[serde(default)]
    pub replacements: usize,
    #[serde(default)]
    pub degenerate_pairs: usize,
    /// Non-replaced pairs with `Δ⁺ < Δ⁻` after selection; always zero.
    #[serde(default)]
    pub ordering_violations: usize,
    #[serde(default)]
    pub sigmoid_min: Option<f64>,
    #[serde(default)]
    pub sigmoid_max: Option<f64>,
    pub grad_norm: f64,
    #[serde(default)]
    pub eval: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<PairTrace>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<PeriodRecord>,
}

impl RunLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, r: PeriodRecord) {
        self.records.push(r);
    }

    pub fn last(&self) -> Option<&PeriodRecord> {
        self.records.last()
    }

    pub fn extend(&mut self, other: RunLog) {
        self.records.extend(other.records);
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, ExtractionError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| ExtractionError::Checkpoint(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| ExtractionError::Checkpoint(format!("line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}
