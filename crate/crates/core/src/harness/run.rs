//! One training run: build the victim, query it, train, evaluate, persist.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{EvalSplit, ExperimentConfig};
use super::HarnessError;
use crate::extraction::{
    collect_records, fresh_local, run_to_end, ExtractionConfig, ExtractionError, Hooks, Method,
    PeriodRecord, RunLog, TrainState,
};
use crate::lm::{TabularLM, Token};
use crate::metrics::{
    rouge_l, sample_responses, victim_responses, wm_scan_corpus, write_metrics_csv, Metric,
    MetricRow, Tail,
};
use crate::oracle::exhaustive_agreement;
use crate::seeding;
use crate::victim::{
    CountingOracle, GroundTruth, QueryRecord, RemoteVictim, VictimDefinition, VictimModel,
    VictimOracle,
};

/// One point of an experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    /// Number of training queries; `None` uses every query.
    pub budget: Option<usize>,
    /// Overrides the configured λ₁.
    pub lambda1: Option<f64>,
    pub seed: u64,
}

impl Cell {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            budget: None,
            lambda1: None,
            seed,
        }
    }

    /// `name/method/b<budget>/l<λ₁>/s<seed>`, also the run's relative directory.
    pub fn run_id(&self, name: &str) -> String {
        let b = self.budget.map_or_else(|| "all".to_string(), |b| b.to_string());
        let l = self.lambda1.map_or_else(|| "cfg".to_string(), |l| l.to_string());
        format!("{name}/{}/b{b}/l{l}/s{}", self.method, self.seed)
    }

    pub fn extraction_config(&self, base: &ExtractionConfig) -> ExtractionConfig {
        let mut c = base.clone();
        c.seed = self.seed;
        if let Some(l) = self.lambda1 {
            c.lambda1 = l;
        }
        c
    }
}

/// Victim, ground truth and initial local model of one run seed.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub victim: VictimModel,
    pub truth: GroundTruth,
    /// Every query in canonical order.
    pub queries: Vec<Vec<Token>>,
    pub initial: TabularLM,
}

impl Instance {
    /// The first `budget` queries of a seeded shuffle, or all queries in
    /// canonical order. Budgets are nested: a smaller budget is a prefix of
    /// a larger one under the same seed.
    pub fn training_queries(&self, budget: Option<usize>) -> Vec<Vec<Token>> {
        match budget {
            None => self.queries.clone(),
            Some(b) => {
                let mut order = self.queries.clone();
                order.shuffle(&mut seeding::rng(self.seed, &[seeding::label("budget")]));
                order.truncate(b);
                order
            }
        }
    }
}

pub fn instance(cfg: &ExperimentConfig, seed: u64) -> Result<Instance, HarnessError> {
    let spec = cfg.task.clone().with_seed(cfg.task.seed.wrapping_add(seed));
    let watermark = cfg.watermark.clone().map(|mut k| {
        k.salt = k.salt.wrapping_add(seed);
        k
    });
    let def = VictimDefinition {
        seed: spec.seed,
        spec,
        watermark,
    };
    let (victim, truth) = def.build()?;
    let queries = truth.queries();
    let initial = if cfg.local_init_scale > 0.0 {
        let lm = &victim.lm;
        TabularLM::randomized(
            lm.vocab().clone(),
            lm.max_query_len(),
            lm.max_response_len(),
            &queries,
            cfg.local_init_scale,
            seeding::derive(seed, &[seeding::label("local")]),
        )?
    } else {
        fresh_local(&victim.lm)
    };
    Ok(Instance {
        seed,
        victim,
        truth,
        queries,
        initial,
    })
}

/// Scores of one model on the evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric: Metric,
    pub split: EvalSplit,
    /// Scored responses: evaluation queries times samples per query.
    pub examples: usize,
    /// Mean metric of extracted-model responses against references.
    pub score: f64,
    pub fidelity: Option<f64>,
    pub performance_up: Option<f64>,
    pub rouge_l_f1: f64,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    pub mean_kl: Option<f64>,
    pub mean_spearman: Option<f64>,
    pub argmax_rate: Option<f64>,
    pub response_agreement: Option<f64>,
}

fn eval_queries(cfg: &ExperimentConfig, inst: &Instance, train: &[Vec<Token>]) -> Vec<Vec<Token>> {
    match cfg.eval.split {
        EvalSplit::All => inst.queries.clone(),
        EvalSplit::Train => train.to_vec(),
    }
}

fn repeated(queries: &[Vec<Token>], n: usize) -> Vec<Vec<Token>> {
    queries
        .iter()
        .flat_map(|q| std::iter::repeat_n(q.clone(), n))
        .collect()
}

fn references(inst: &Instance, queries: &[Vec<Token>]) -> Vec<Vec<Token>> {
    queries
        .iter()
        .map(|q| inst.truth.reference(q).unwrap_or_default().to_vec())
        .collect()
}

/// Samples the extracted, initial and victim models with paired seeds
/// `eval.seed + run seed` and scores them. Ratios whose denominator sums to
/// zero are reported as absent.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    inst: &Instance,
    model: &TabularLM,
    train: &[Vec<Token>],
) -> Result<Evaluation, HarnessError> {
    let queries = eval_queries(cfg, inst, train);
    let rep = repeated(&queries, cfg.eval.samples_per_query);
    let refs = references(inst, &rep);
    let sampler = cfg.eval_sampler();
    let seed = cfg.eval.seed.wrapping_add(inst.seed);
    let metric = cfg.eval.metric;

    let yn = sample_responses(model, &rep, &sampler, seed)?;
    let y0 = sample_responses(&inst.initial, &rep, &sampler, seed)?;
    let yv = victim_responses(&inst.victim, &rep, seed)?;
    let total = |ys: &[Vec<Token>]| -> f64 { ys.iter().zip(&refs).map(|(h, r)| metric.score(h, r)).sum() };
    let (sn, s0, sv) = (total(&yn), total(&y0), total(&yv));
    let n = rep.len().max(1) as f64;
    let rouge = yn.iter().zip(&refs).map(|(h, r)| rouge_l(h, r).f1).sum::<f64>() / n;

    let verdict = inst
        .victim
        .watermark
        .as_ref()
        .map(|key| wm_scan_corpus(&yn, key, model.vocab_size(), Tail::Upper));
    let agreement = if cfg.eval.agreement {
        Some(exhaustive_agreement(model, &inst.victim.lm, &queries, cfg.eval.enumeration_cap)?)
    } else {
        None
    };
    Ok(Evaluation {
        metric,
        split: cfg.eval.split,
        examples: rep.len(),
        score: sn / n,
        fidelity: (sv != 0.0).then(|| sn / sv),
        performance_up: (s0 != 0.0).then(|| sn / s0),
        rouge_l_f1: rouge,
        z: verdict.map(|v| v.z),
        p_value: verdict.map(|v| v.p_value),
        mean_kl: agreement.as_ref().map(|a| a.mean_kl),
        mean_spearman: agreement.as_ref().map(|a| a.mean_spearman),
        argmax_rate: agreement.as_ref().map(|a| a.argmax_rate),
        response_agreement: agreement.as_ref().map(|a| a.response_agreement()),
    })
}

/// Mean metric only, for periodic evaluation inside the training loop.
fn quick_score(cfg: &ExperimentConfig, inst: &Instance, model: &TabularLM, train: &[Vec<Token>]) -> f64 {
    let queries = eval_queries(cfg, inst, train);
    let rep = repeated(&queries, cfg.eval.samples_per_query);
    let refs = references(inst, &rep);
    let seed = cfg.eval.seed.wrapping_add(inst.seed);
    match sample_responses(model, &rep, &cfg.eval_sampler(), seed) {
        Ok(ys) => {
            ys.iter().zip(&refs).map(|(h, r)| cfg.eval.metric.score(h, r)).sum::<f64>()
                / rep.len().max(1) as f64
        }
        Err(_) => f64::NAN,
    }
}

impl Evaluation {
    /// Long-form metric rows, absent values omitted.
    pub fn rows(&self, run_id: &str) -> Vec<MetricRow> {
        let split = self.split.as_str();
        let mut out = vec![MetricRow::new(run_id, self.metric.name(), split, self.score)];
        let optional = [
            ("fidelity", self.fidelity),
            ("performance-up", self.performance_up),
            ("rouge-l-f1", Some(self.rouge_l_f1)),
            ("z", self.z),
            ("p-value", self.p_value),
            ("mean-kl", self.mean_kl),
            ("mean-spearman", self.mean_spearman),
            ("argmax-rate", self.argmax_rate),
            ("response-agreement", self.response_agreement),
        ];
        for (name, v) in optional {
            if let Some(v) = v {
                out.push(MetricRow::new(run_id, name, split, v));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub run_id: String,
    pub cell: Cell,
    pub model: TabularLM,
    pub log: RunLog,
    pub evaluation: Evaluation,
    /// Queries sent to the victim over the whole run, resumed parts included.
    pub victim_queries: usize,
    pub training_queries: usize,
}

impl RunOutput {
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let mut rows = self.evaluation.rows(&self.run_id);
        rows.push(MetricRow::new(&self.run_id, "victim-queries", "train", self.victim_queries as f64));
        rows
    }
}

/// Files of one persisted run.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn runlog(&self) -> PathBuf {
        self.root.join("runlog.jsonl")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn state(&self) -> PathBuf {
        self.checkpoints().join("state.json")
    }

    /// Victim records collected before an interrupted collection phase.
    pub fn partial_records(&self) -> PathBuf {
        self.checkpoints().join("records.json")
    }

    pub fn create(&self) -> std::io::Result<()> {
        fs::create_dir_all(self.checkpoints())
    }

    pub fn read_log(&self) -> Result<RunLog, HarnessError> {
        match File::open(self.runlog()) {
            Ok(f) => Ok(RunLog::read_jsonl(BufReader::new(f))?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(RunLog::default()),
            Err(e) => Err(e.into()),
        }
    }
}

/// Writes through a temporary file and a rename, so readers never see a
/// partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

fn checkpoint_err(e: impl std::fmt::Display) -> ExtractionError {
    ExtractionError::Checkpoint(e.to_string())
}

fn open_oracle<'a>(cfg: &ExperimentConfig, inst: &'a Instance) -> Result<Box<dyn VictimOracle + 'a>, HarnessError> {
    Ok(match &cfg.victim_addr {
        Some(addr) => Box::new(RemoteVictim::connect(addr.as_str())?),
        None => Box::new(inst.victim.session(0)),
    })
}

/// Queries the victim for the records a fresh state needs. Records gathered
/// before a failure are saved so a resumed run does not repeat them.
fn gather_records(
    cfg: &ExperimentConfig,
    inst: &Instance,
    cell: &Cell,
    train: &[Vec<Token>],
    dir: Option<&RunDir>,
    resume: bool,
) -> Result<(Vec<QueryRecord>, usize), HarnessError> {
    let mut records: Vec<QueryRecord> = match dir {
        Some(d) if resume && d.partial_records().exists() => {
            serde_json::from_str(&fs::read_to_string(d.partial_records())?)?
        }
        _ => Vec::new(),
    };
    if records.len() > train.len() || records.iter().zip(train).any(|(r, q)| &r.query != q) {
        return Err(HarnessError::Resume(
            "saved victim records do not match the training queries".into(),
        ));
    }
    let earlier = records.len();
    let ecfg = cell.extraction_config(&cfg.extraction);
    let mut oracle = CountingOracle::new(open_oracle(cfg, inst)?);
    let outcome = collect_records(&mut oracle, train, cell.method.access_mode(&ecfg), &mut records);
    if let Some(d) = dir {
        write_atomic(&d.partial_records(), serde_json::to_string(&records)?.as_bytes())?;
    }
    outcome?;
    Ok((records, earlier + oracle.count()))
}

/// Trains and evaluates one cell. With `dir`, writes the run's artifacts
/// there; with `resume`, continues from the latest checkpoint in `dir`.
pub fn run_cell(
    cfg: &ExperimentConfig,
    cell: &Cell,
    dir: Option<&RunDir>,
    resume: bool,
) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let inst = instance(cfg, cell.seed)?;
    let train = inst.training_queries(cell.budget);
    let ecfg = cell.extraction_config(&cfg.extraction);
    let run_id = cell.run_id(&cfg.name);

    if let Some(d) = dir {
        d.create()?;
        write_atomic(&d.config(), cfg.to_json().as_bytes())?;
    }

    let saved = match dir {
        Some(d) if resume && d.state().exists() => {
            let s = TrainState::from_json(&fs::read_to_string(d.state())?)?;
            if s.method != cell.method {
                return Err(HarnessError::Resume(format!(
                    "checkpoint is a {} run, not {}",
                    s.method, cell.method
                )));
            }
            Some(s)
        }
        _ => None,
    };

    let (mut state, victim_queries) = match saved {
        Some(s) => {
            let d = dir.expect("resuming needs a directory");
            let mut log = d.read_log()?;
            log.records.truncate(s.period);
            write_atomic(&d.runlog(), log.to_jsonl().as_bytes())?;
            let n = s.records.len();
            (s, n)
        }
        None => {
            let (records, n) = gather_records(cfg, &inst, cell, &train, dir, resume)?;
            let s = TrainState::new(cell.method, inst.initial.clone(), records, &ecfg, Some(&inst.victim.lm))?;
            if let Some(d) = dir {
                write_atomic(&d.runlog(), b"")?;
                write_atomic(&d.state(), s.to_json().as_bytes())?;
            }
            (s, n)
        }
    };

    let mut log_file = match dir {
        Some(d) => Some(OpenOptions::new().append(true).create(true).open(d.runlog())?),
        None => None,
    };
    let mut on_period = |rec: &PeriodRecord| -> Result<(), ExtractionError> {
        if let Some(f) = log_file.as_mut() {
            let mut line = serde_json::to_vec(rec).map_err(checkpoint_err)?;
            line.push(b'\n');
            f.write_all(&line).map_err(checkpoint_err)?;
        }
        Ok(())
    };
    let state_path = dir.map(RunDir::state);
    let mut checkpoint = |s: &TrainState| -> Result<(), ExtractionError> {
        if let Some(p) = &state_path {
            write_atomic(p, s.to_json().as_bytes()).map_err(checkpoint_err)?;
        }
        Ok(())
    };
    let metric_name = cfg.eval.metric.name();
    let mut evaluate = |m: &TabularLM| -> BTreeMap<String, f64> {
        BTreeMap::from([(metric_name.clone(), quick_score(cfg, &inst, m, &train))])
    };
    let mut hooks = Hooks {
        eval_every: cfg.eval.eval_every,
        evaluate: Some(&mut evaluate),
        checkpoint_every: if cfg.checkpoint_every == 0 { usize::MAX } else { cfg.checkpoint_every },
        checkpoint: Some(&mut checkpoint),
        on_period: Some(&mut on_period),
    };
    let fresh_log = run_to_end(&mut state, &ecfg, &mut hooks)?;

    let log = match dir {
        Some(d) => d.read_log()?,
        None => fresh_log,
    };
    let evaluation = evaluate_model(cfg, &inst, &state.model, &train)?;
    let out = RunOutput {
        run_id,
        cell: *cell,
        model: state.model.clone(),
        log,
        evaluation,
        victim_queries,
        training_queries: train.len(),
    };
    if let Some(d) = dir {
        write_atomic(&d.state(), state.to_json().as_bytes())?;
        write_atomic(&d.model(), serde_json::to_string(&state.model)?.as_bytes())?;
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &out.metric_rows())?;
        write_atomic(&d.metrics(), &buf)?;
    }
    Ok(out)
}
