//! Training loops with resumable state.
//!
//! Victim records are collected once, in a single pass over the queries.
//! Every period then draws from its own generator `rng(seed, [method, t])`,
//! so a run restored from a [`TrainState`] continues exactly as an
//! uninterrupted run would.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::loss::{
    kd_loss_and_grad, kd_targets_from_records, kd_targets_from_victim, lord_delta,
    lord_loss_and_grad, mle_loss_and_grad, KdTargets, LordPair,
};
use super::runlog::{PairTrace, PeriodRecord, RunLog};
use super::select::{select_pos_neg, Candidates};
use super::{ExtractionConfig, ExtractionError, KdTargetSource};
use crate::lm::{ContextKey, Gradient, TabularLM, Token};
use crate::seeding;
use crate::victim::{AccessMode, QueryRecord, VictimOracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mle,
    Kd,
    Lord,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mle => "mle",
            Self::Kd => "kd",
            Self::Lord => "lord",
        }
    }

    /// Access level the method needs from the victim.
    pub fn access_mode(self, cfg: &ExtractionConfig) -> AccessMode {
        match self {
            Self::Kd => AccessMode::Grey,
            Self::Lord if cfg.victim_weighted_objective => AccessMode::Grey,
            _ => AccessMode::Black,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mle" => Ok(Self::Mle),
            "kd" => Ok(Self::Kd),
            "lord" => Ok(Self::Lord),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

/// Everything needed to continue a run after the last completed period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub method: Method,
    /// Completed periods.
    pub period: usize,
    pub model: TabularLM,
    pub records: Vec<QueryRecord>,
    /// LoRD: parameters before the most recent update.
    #[serde(default)]
    pub snapshot: Option<TabularLM>,
    /// LoRD: the candidate pair per record to be scored next period.
    #[serde(default)]
    pub pending: Vec<(Vec<Token>, Vec<Token>)>,
    /// KD: victim next-token targets.
    #[serde(default)]
    pub kd_targets: Option<Vec<(ContextKey, Vec<f64>)>>,
}

fn period_rng(cfg: &ExtractionConfig, method: Method, period: usize) -> rand_chacha::ChaCha8Rng {
    seeding::rng(cfg.seed, &[seeding::label(method.as_str()), period as u64])
}

impl TrainState {
    /// Initial state. LoRD's first pair per query is `(y_vic, y⁻ ~ P_θ0)`;
    /// KD targets come from `victim` when `cfg.kd_targets` is `Full`.
    pub fn new(
        method: Method,
        local: TabularLM,
        records: Vec<QueryRecord>,
        cfg: &ExtractionConfig,
        victim: Option<&TabularLM>,
    ) -> Result<Self, ExtractionError> {
        cfg.validate()?;
        if records.is_empty() {
            return Err(ExtractionError::EmptyDataset);
        }
        let mut state = Self {
            method,
            period: 0,
            model: local,
            records,
            snapshot: None,
            pending: Vec::new(),
            kd_targets: None,
        };
        match method {
            Method::Mle => {}
            Method::Kd => {
                let targets = match (cfg.kd_targets, victim) {
                    (KdTargetSource::Full, Some(v)) => kd_targets_from_victim(v, &state.records)?,
                    (KdTargetSource::Full, None) => {
                        return Err(ExtractionError::Config(
                            "full distillation targets need the victim model".into(),
                        ))
                    }
                    (KdTargetSource::TopK, _) => kd_targets_from_records(&state.model, &state.records)?,
                };
                state.kd_targets = Some(targets.into_iter().collect());
            }
            Method::Lord => {
                let mut rng = period_rng(cfg, method, 0);
                for r in &state.records {
                    let neg = state.model.sample(&r.query, &cfg.sampler, &mut rng)?;
                    state.pending.push((r.response.clone(), neg));
                }
            }
        }
        Ok(state)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("train state serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ExtractionError> {
        serde_json::from_str(s).map_err(|e| ExtractionError::Checkpoint(e.to_string()))
    }

    /// Runs one period and returns its record.
    pub fn step(&mut self, cfg: &ExtractionConfig) -> Result<PeriodRecord, ExtractionError> {
        let rec = match self.method {
            Method::Mle => self.step_mle(cfg)?,
            Method::Kd => self.step_kd(cfg)?,
            Method::Lord => self.step_lord(cfg)?,
        };
        Ok(rec)
    }

    fn step_mle(&mut self, cfg: &ExtractionConfig) -> Result<PeriodRecord, ExtractionError> {
        let (loss, grad) = mle_loss_and_grad(&self.model, &self.records)?;
        self.model.apply_gradient(&grad, cfg.learning_rate)?;
        self.period += 1;
        Ok(PeriodRecord {
            period: self.period,
            loss: loss / self.records.len() as f64,
            grad_norm: grad.norm(),
            ..Default::default()
        })
    }

    fn step_kd(&mut self, cfg: &ExtractionConfig) -> Result<PeriodRecord, ExtractionError> {
        let targets: KdTargets = self
            .kd_targets
            .as_ref()
            .ok_or(ExtractionError::EmptyDataset)?
            .iter()
            .cloned()
            .collect();
        let (loss, grad) = kd_loss_and_grad(&self.model, &targets, cfg.kd_temperature, cfg.kd_softening)?;
        self.model.apply_gradient(&grad, cfg.learning_rate)?;
        self.period += 1;
        Ok(PeriodRecord {
            period: self.period,
            loss: loss / targets.len() as f64,
            grad_norm: grad.norm(),
            ..Default::default()
        })
    }

    fn step_lord(&mut self, cfg: &ExtractionConfig) -> Result<PeriodRecord, ExtractionError> {
        let t = self.period + 1;
        let model = &self.model;
        let snapshot = self.snapshot.as_ref().unwrap_or(model);

        // Fresh candidates from the current model, scored next period.
        let mut rng = period_rng(cfg, Method::Lord, t);
        let mut next = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let a = model.sample(&r.query, &cfg.sampler, &mut rng)?;
            let b = model.sample(&r.query, &cfg.sampler, &mut rng)?;
            next.push((a, b));
        }

        let n = self.records.len() as f64;
        let mut grad = Gradient::default();
        let mut out = PeriodRecord {
            period: t,
            ..Default::default()
        };
        let (mut loss, mut obj, mut reg, mut dp_sum, mut dn_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut traces = Vec::new();
        for (i, (r, (yp, yn))) in self.records.iter().zip(&self.pending).enumerate() {
            let cand = Candidates {
                positive: yp.clone(),
                negative: yn.clone(),
                delta_pos: lord_delta(model, snapshot, &r.query, yp)?,
                delta_neg: lord_delta(model, snapshot, &r.query, yn)?,
                logp_pos: model.sequence_logprob(&r.query, yp)?,
                logp_neg: model.sequence_logprob(&r.query, yn)?,
                steps_pos: model.steps(&r.query, yp)?.len(),
                steps_neg: model.steps(&r.query, yn)?.len(),
            };
            let (logp_pos, steps_pos) = if cand.delta_pos < cand.delta_neg {
                (cand.logp_neg, cand.steps_neg)
            } else {
                (cand.logp_pos, cand.steps_pos)
            };
            let sel = select_pos_neg(cand, &r.response, cfg);
            let degenerate = sel.positive == sel.negative;
            if degenerate {
                log::trace!("period {t}: degenerate pair for query {i}");
            }
            let (b, g) = lord_loss_and_grad(
                model,
                &LordPair {
                    query: &r.query,
                    positive: &sel.positive,
                    negative: &sel.negative,
                    victim_response: &r.response,
                    victim_logprob: r.logprob,
                },
                cfg,
            )?;
            grad.merge(&g, 1.0);
            loss += b.total;
            obj += b.objective;
            reg += b.reg_clipped;
            dp_sum += sel.delta_pos;
            dn_sum += sel.delta_neg;
            out.swaps += sel.swapped as usize;
            out.replacements += sel.replaced as usize;
            out.degenerate_pairs += degenerate as usize;
            if !sel.replaced && sel.delta_pos < sel.delta_neg {
                out.ordering_violations += 1;
            }
            if let Some(s) = b.sigmoid {
                out.sigmoid_min = Some(out.sigmoid_min.map_or(s, |m: f64| m.min(s)));
                out.sigmoid_max = Some(out.sigmoid_max.map_or(s, |m: f64| m.max(s)));
            }
            if cfg.trace_pairs {
                traces.push(PairTrace {
                    query_index: i,
                    delta_pos: sel.delta_pos,
                    delta_neg: sel.delta_neg,
                    logp_pos,
                    steps_pos,
                    swapped: sel.swapped,
                    replaced: sel.replaced,
                    degenerate,
                    total: b.total,
                    sigmoid: b.sigmoid,
                });
            }
        }
        out.loss = loss / n;
        out.objective = Some(obj / n);
        out.regularizer = Some(reg / n);
        out.delta_pos = Some(dp_sum / n);
        out.delta_neg = Some(dn_sum / n);
        out.grad_norm = grad.norm();
        if cfg.trace_pairs {
            out.pairs = Some(traces);
        }

        self.snapshot = Some(self.model.clone());
        self.model.apply_gradient(&grad, cfg.learning_rate)?;
        self.pending = next;
        self.period = t;
        Ok(out)
    }
}

/// Optional callbacks around each period.
#[derive(Default)]
pub struct Hooks<'a> {
    /// Evaluate every this many periods (and after the last); 0 disables.
    pub eval_every: usize,
    pub evaluate: Option<&'a mut dyn FnMut(&TabularLM) -> BTreeMap<String, f64>>,
    /// Checkpoint every this many periods; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint: Option<&'a mut dyn FnMut(&TrainState) -> Result<(), ExtractionError>>,
    /// Called with each finished record, after evaluation.
    pub on_period: Option<&'a mut dyn FnMut(&PeriodRecord) -> Result<(), ExtractionError>>,
}

/// Steps `state` until `cfg.periods` periods are complete.
pub fn run_to_end(
    state: &mut TrainState,
    cfg: &ExtractionConfig,
    hooks: &mut Hooks<'_>,
) -> Result<RunLog, ExtractionError> {
    cfg.validate()?;
    let mut log = RunLog::default();
    while state.period < cfg.periods {
        let mut rec = state.step(cfg)?;
        let t = state.period;
        if hooks.eval_every > 0 && (t.is_multiple_of(hooks.eval_every) || t == cfg.periods) {
            if let Some(f) = hooks.evaluate.as_mut() {
                rec.eval = f(&state.model);
            }
        }
        if let Some(f) = hooks.on_period.as_mut() {
            f(&rec)?;
        }
        log.push(rec);
        if hooks.checkpoint_every > 0 && (t.is_multiple_of(hooks.checkpoint_every) || t == cfg.periods) {
            if let Some(f) = hooks.checkpoint.as_mut() {
                f(state)?;
            }
        }
    }
    Ok(log)
}

/// Queries the victim once per query not yet in `out`, appending records.
/// On a victim error the records collected so far are kept, so a retry
/// resumes where it stopped without repeating queries.
pub fn collect_records<O: VictimOracle + ?Sized>(
    oracle: &mut O,
    queries: &[Vec<Token>],
    mode: AccessMode,
    out: &mut Vec<QueryRecord>,
) -> Result<(), ExtractionError> {
    for q in queries.iter().skip(out.len()) {
        out.push(oracle.query(q, mode)?);
    }
    Ok(())
}

fn train_with<O: VictimOracle + ?Sized>(
    method: Method,
    local: TabularLM,
    oracle: &mut O,
    queries: &[Vec<Token>],
    cfg: &ExtractionConfig,
    victim: Option<&TabularLM>,
) -> Result<(TabularLM, RunLog), ExtractionError> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(ExtractionError::EmptyDataset);
    }
    let mut records = Vec::with_capacity(queries.len());
    collect_records(oracle, queries, method.access_mode(cfg), &mut records)?;
    let mut state = TrainState::new(method, local, records, cfg, victim)?;
    let log = run_to_end(&mut state, cfg, &mut Hooks::default())?;
    Ok((state.model, log))
}

/// Maximum-likelihood stealing on black-box victim responses.
pub fn mle_train<O: VictimOracle + ?Sized>(
    local: TabularLM,
    oracle: &mut O,
    queries: &[Vec<Token>],
    cfg: &ExtractionConfig,
) -> Result<(TabularLM, RunLog), ExtractionError> {
    train_with(Method::Mle, local, oracle, queries, cfg, None)
}

/// Distillation on grey-box records; `victim` supplies full targets when
/// `cfg.kd_targets` is `Full`.
pub fn kd_train<O: VictimOracle + ?Sized>(
    local: TabularLM,
    oracle: &mut O,
    queries: &[Vec<Token>],
    cfg: &ExtractionConfig,
    victim: Option<&TabularLM>,
) -> Result<(TabularLM, RunLog), ExtractionError> {
    train_with(Method::Kd, local, oracle, queries, cfg, victim)
}

/// LoRD stealing. Queries the victim exactly once per query.
pub fn lord_train<O: VictimOracle + ?Sized>(
    local: TabularLM,
    oracle: &mut O,
    queries: &[Vec<Token>],
    cfg: &ExtractionConfig,
) -> Result<(TabularLM, RunLog), ExtractionError> {
    train_with(Method::Lord, local, oracle, queries, cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{fresh_local, LossForm};
    use crate::victim::{build_victim, CountingOracle, TaskFamily, TaskSpec};

    fn copy_victim() -> (crate::victim::VictimModel, Vec<Vec<Token>>) {
        let spec = TaskSpec::new(TaskFamily::Copy, 4, 1, 2);
        let (v, truth) = build_victim(&spec).unwrap();
        (v, truth.queries())
    }

    #[test]
    fn zero_periods_leave_model_unchanged() {
        let (v, qs) = copy_victim();
        let local = fresh_local(&v.lm);
        let cfg = ExtractionConfig {
            periods: 0,
            ..Default::default()
        };
        let (m, log) = lord_train(local.clone(), &mut v.session(0), &qs, &cfg).unwrap();
        assert_eq!(m, local);
        assert!(log.is_empty());
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let (v, qs) = copy_victim();
        let local = fresh_local(&v.lm);
        let cfg = ExtractionConfig {
            periods: 5,
            learning_rate: 0.0,
            ..Default::default()
        };
        let (m, log) = mle_train(local.clone(), &mut v.session(0), &qs, &cfg).unwrap();
        assert_eq!(m, local);
        assert_eq!(log.len(), 5);
        let (m, _) = kd_train(local.clone(), &mut v.session(0), &qs, &cfg, None).unwrap();
        assert_eq!(m, local);
    }

    #[test]
    fn query_count_is_dataset_size() {
        let (v, qs) = copy_victim();
        let cfg = ExtractionConfig {
            periods: 20,
            ..Default::default()
        };
        for method in [Method::Lord, Method::Mle] {
            let mut oracle = CountingOracle::new(v.session(0));
            train_with(method, fresh_local(&v.lm), &mut oracle, &qs, &cfg, None).unwrap();
            assert_eq!(oracle.count(), qs.len());
        }
    }

    #[test]
    fn lord_log_invariants() {
        let (v, qs) = copy_victim();
        let cfg = ExtractionConfig {
            periods: 40,
            loss_form: LossForm::Sigmoid,
            learning_rate: 0.5,
            trace_pairs: true,
            ..Default::default()
        };
        let (_, log) = lord_train(fresh_local(&v.lm), &mut v.session(0), &qs, &cfg).unwrap();
        assert_eq!(log.len(), 40);
        for r in &log.records {
            assert_eq!(r.ordering_violations, 0);
            let (lo, hi) = (r.sigmoid_min.unwrap(), r.sigmoid_max.unwrap());
            assert!(lo > 0.0 && hi < 1.0);
            for p in r.pairs.as_ref().unwrap() {
                if p.replaced {
                    assert!(p.logp_pos.exp() < cfg.tau1 && p.delta_pos < cfg.tau2);
                }
            }
        }
        // First period scores against an identical snapshot.
        assert_eq!(log.records[0].delta_pos, Some(0.0));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (v, qs) = copy_victim();
        let cfg = ExtractionConfig {
            periods: 12,
            learning_rate: 0.3,
            ..Default::default()
        };
        for method in [Method::Lord, Method::Mle, Method::Kd] {
            let mut recs = Vec::new();
            collect_records(&mut v.session(0), &qs, method.access_mode(&cfg), &mut recs).unwrap();
            let mut full = TrainState::new(method, fresh_local(&v.lm), recs.clone(), &cfg, None).unwrap();
            let full_log = run_to_end(&mut full, &cfg, &mut Hooks::default()).unwrap();

            let mut part = TrainState::new(method, fresh_local(&v.lm), recs, &cfg, None).unwrap();
            let half = ExtractionConfig {
                periods: 5,
                ..cfg.clone()
            };
            let mut log = run_to_end(&mut part, &half, &mut Hooks::default()).unwrap();
            let mut restored = TrainState::from_json(&part.to_json()).unwrap();
            log.extend(run_to_end(&mut restored, &cfg, &mut Hooks::default()).unwrap());
            assert_eq!(restored, full, "{method}");
            assert_eq!(log, full_log, "{method}");
        }
    }

    #[test]
    fn partial_collection_resumes_without_repeats() {
        struct Flaky<'a> {
            inner: crate::victim::VictimSession<'a>,
            calls: usize,
        }
        impl VictimOracle for Flaky<'_> {
            fn query(&mut self, q: &[Token], m: AccessMode) -> Result<QueryRecord, crate::victim::VictimError> {
                self.calls += 1;
                if self.calls == 2 {
                    return Err(crate::victim::VictimError::Transport("drop".into()));
                }
                self.inner.query(q, m)
            }
        }
        let (v, qs) = copy_victim();
        let mut o = Flaky {
            inner: v.session(0),
            calls: 0,
        };
        let mut recs = Vec::new();
        assert!(collect_records(&mut o, &qs, AccessMode::Black, &mut recs).is_err());
        assert_eq!(recs.len(), 1);
        collect_records(&mut o, &qs, AccessMode::Black, &mut recs).unwrap();
        assert_eq!(recs.len(), qs.len());
        assert_eq!(o.calls, qs.len() + 1);
    }
}
