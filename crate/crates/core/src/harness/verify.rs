//! Randomized property suites over exact oracles.
//!
//! Each suite is deterministic in its seed and reports its worst case, so
//! the same numbers appear in the CLI and in tests.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::HarnessError;
use crate::extraction::{
    fresh_local, kd_loss_and_grad, kd_targets_from_victim, lord_loss_and_grad,
    mle_loss_and_grad, run_to_end, ExtractionConfig, ExtractionError, Hooks, KdSoftening,
    KdTargetSource, LordPair, LossForm, Method, TrainState,
};
use crate::lm::{ContextKey, SamplerConfig, TabularLM, Token, Vocab, DEFAULT_ENUMERATION_CAP};
use crate::oracle::{
    alignment_objective, compare_gradients, exhaustive_agreement, finite_diff_grad,
    kl_minimizer_check, rlhf_optimum, RewardTable, DEFAULT_FD_STEP,
};
use crate::seeding;
use crate::victim::{build_victim, AccessMode, QueryRecord, TaskFamily, TaskSpec, VictimOracle};

/// Agreement required between analytic and numerical gradients.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Distance from the clip boundary below which a LoRD case is skipped:
/// central differences straddling the kink are meaningless there.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

fn instance_rng(seed: u64, suite: &str, i: usize) -> ChaCha8Rng {
    seeding::rng(seed, &[seeding::label(suite), i as u64])
}

/// Random single-token queries, a random model and one sampled response per
/// query.
struct RandomCase {
    lm: TabularLM,
    queries: Vec<Vec<Token>>,
    contexts: Vec<ContextKey>,
}

fn random_case(rng: &mut ChaCha8Rng, max_v: usize, max_nr: usize) -> Result<RandomCase, HarnessError> {
    let v = rng.random_range(3..=max_v);
    let nr = rng.random_range(1..=max_nr);
    let mut queries: Vec<Vec<Token>> = (0..(v - 1) as Token).map(|t| vec![t]).collect();
    queries.truncate(2);
    let scale = rng.random_range(0.5..2.0);
    let lm = TabularLM::randomized(Vocab::new(v)?, 1, nr, &queries, scale, rng.random())?;
    let mut contexts = Vec::new();
    for q in &queries {
        contexts.extend(lm.reachable_contexts(q, DEFAULT_ENUMERATION_CAP)?);
    }
    Ok(RandomCase { lm, queries, contexts })
}

fn draw(lm: &TabularLM, q: &[Token], rng: &mut ChaCha8Rng) -> Result<Vec<Token>, HarnessError> {
    Ok(lm.sample(q, &SamplerConfig::victim(0), rng)?)
}

fn records(case: &RandomCase, rng: &mut ChaCha8Rng) -> Result<Vec<QueryRecord>, HarnessError> {
    case.queries
        .iter()
        .map(|q| {
            Ok(QueryRecord {
                query: q.clone(),
                response: draw(&case.lm, q, rng)?,
                topk: None,
                logprob: None,
            })
        })
        .collect()
}

fn note(kind: &str, i: usize, rel: f64, max_rel: &mut f64, worst: &mut String) {
    if rel > *max_rel {
        *max_rel = rel;
        *worst = format!("{kind} instance {i}");
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientSuite {
    pub instances: usize,
    /// Loss evaluations compared, per kind.
    pub checked: Vec<(String, usize)>,
    pub skipped_near_kink: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradientSuite {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_REL_TOL && self.checked.iter().all(|(_, n)| *n > 0)
    }
}

/// Compares closed-form gradients of MLE, both KD softenings and the three
/// LoRD forms with central differences on `instances` random models with
/// `V ≤ 6` and `N_R ≤ 3`.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<GradientSuite, HarnessError> {
    let kinds = ["mle", "kd-logits", "kd-probabilities", "lord-sum", "lord-sigmoid", "lord-lambda"];
    let mut checked = vec![0usize; kinds.len()];
    let mut skipped = 0;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();

    for i in 0..instances {
        let mut rng = instance_rng(seed, "gradient", i);
        let case = random_case(&mut rng, 6, 3)?;
        let (lm, ctxs) = (&case.lm, &case.contexts);
        let v = lm.vocab_size();
        let recs = records(&case, &mut rng)?;

        let (_, g) = mle_loss_and_grad(lm, &recs)?;
        let n = finite_diff_grad::<_, ExtractionError>(|m| Ok(mle_loss_and_grad(m, &recs)?.0), lm, ctxs, DEFAULT_FD_STEP)?;
        note(kinds[0], i, compare_gradients(&g, &n, ctxs, v).max_rel_err, &mut max_rel, &mut worst);
        checked[0] += 1;

        let teacher = TabularLM::randomized(lm.vocab().clone(), 1, lm.max_response_len(), &case.queries, 1.5, rng.random())?;
        let targets = kd_targets_from_victim(&teacher, &recs)?;
        let t = rng.random_range(1.0..4.0);
        for (k, soft) in [(1, KdSoftening::Logits), (2, KdSoftening::Probabilities)] {
            let (_, g) = kd_loss_and_grad(lm, &targets, t, soft)?;
            let n = finite_diff_grad::<_, ExtractionError>(|m| Ok(kd_loss_and_grad(m, &targets, t, soft)?.0), lm, ctxs, DEFAULT_FD_STEP)?;
            note(kinds[k], i, compare_gradients(&g, &n, ctxs, v).max_rel_err, &mut max_rel, &mut worst);
            checked[k] += 1;
        }

        let q = &case.queries[rng.random_range(0..case.queries.len())];
        let (pos, neg, vic) = (draw(lm, q, &mut rng)?, draw(lm, q, &mut rng)?, draw(lm, q, &mut rng)?);
        let pair = LordPair {
            query: q,
            positive: &pos,
            negative: &neg,
            victim_response: &vic,
            victim_logprob: None,
        };
        let cfg_base = ExtractionConfig {
            lambda1: rng.random_range(0.0..=1.0),
            kappa: rng.random_range(0.25..3.0),
            ..Default::default()
        };
        for (k, form) in [(3, LossForm::Sum), (4, LossForm::Sigmoid), (5, LossForm::Lambda)] {
            let cfg = ExtractionConfig { loss_form: form, ..cfg_base.clone() };
            let (b, g) = lord_loss_and_grad(lm, &pair, &cfg)?;
            if (b.reg_raw.abs() - cfg.kappa).abs() < KINK_MARGIN {
                skipped += 1;
                continue;
            }
            let n = finite_diff_grad::<_, ExtractionError>(|m| Ok(lord_loss_and_grad(m, &pair, &cfg)?.0.total), lm, ctxs, DEFAULT_FD_STEP)?;
            note(kinds[k], i, compare_gradients(&g, &n, ctxs, v).max_rel_err, &mut max_rel, &mut worst);
            checked[k] += 1;
        }
    }
    Ok(GradientSuite {
        instances,
        checked: kinds.iter().map(|k| k.to_string()).zip(checked).collect(),
        skipped_near_kink: skipped,
        max_rel_err: max_rel,
        worst,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RlhfSuite {
    pub instances: usize,
    pub trials_per_query: usize,
    pub max_norm_err: f64,
    /// Zero-reward optima that differ from the initial policy in any bit.
    pub identity_failures: usize,
    pub minimizer_violations: usize,
    pub min_gap: f64,
}

impl RlhfSuite {
    pub fn passed(&self) -> bool {
        self.max_norm_err <= 1e-9 && self.identity_failures == 0 && self.minimizer_violations == 0
    }
}

/// Normalization, the zero-reward identity and the KL-minimizer property of
/// the closed-form RLHF optimum. Perturbations mix the optimum with a
/// uniform-Dirichlet draw at a weight of at least 1e-2.
pub fn rlhf_suite(instances: usize, trials: usize, seed: u64) -> Result<RlhfSuite, HarnessError> {
    let mut out = RlhfSuite {
        instances,
        trials_per_query: trials,
        max_norm_err: 0.0,
        identity_failures: 0,
        minimizer_violations: 0,
        min_gap: f64::INFINITY,
    };
    for i in 0..instances {
        let mut rng = instance_rng(seed, "rlhf", i);
        let case = random_case(&mut rng, 5, 2)?;
        let beta = rng.random_range(0.1..5.0);
        let table = RewardTable::from_fn(&case.lm, &case.queries, DEFAULT_ENUMERATION_CAP, |_, _| {
            rng.random_range(-3.0..3.0)
        })?;
        let opt = rlhf_optimum(&case.lm, &case.queries, &table, beta, DEFAULT_ENUMERATION_CAP)?;
        for q in &opt.queries {
            let s: f64 = q.probs.iter().sum();
            out.max_norm_err = out.max_norm_err.max((s - 1.0).abs());
            let c = kl_minimizer_check(q, beta, trials, 1e-2, &mut rng);
            out.minimizer_violations += c.violations;
            out.min_gap = out.min_gap.min(c.min_gap);
        }
        let zero = rlhf_optimum(&case.lm, &case.queries, &RewardTable::new(), beta, DEFAULT_ENUMERATION_CAP)?;
        for q in &zero.queries {
            let exact = q.probs.iter().zip(&q.init_probs).all(|(a, b)| a.to_bits() == b.to_bits());
            if !exact {
                out.identity_failures += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencySuite {
    pub instances: usize,
    pub learning_rate: f64,
    /// Instances whose preference margin strictly increased.
    pub increased: usize,
    pub min_increase: f64,
    /// Largest `|alignment objective + LoRD objective|` over instances.
    pub max_identity_err: f64,
}

impl ConsistencySuite {
    pub fn passed(&self) -> bool {
        self.increased == self.instances && self.max_identity_err <= 1e-12
    }
}

/// One gradient step on the pure LoRD objective (λ₁ = 0) must raise
/// `log P(y⁺) - log P(y⁻)` for distinct `y⁺`, `y⁻`; the alignment objective
/// must equal the negated LoRD objective on the same pair.
pub fn consistency_suite(instances: usize, learning_rate: f64, seed: u64) -> Result<ConsistencySuite, HarnessError> {
    let mut out = ConsistencySuite {
        instances,
        learning_rate,
        increased: 0,
        min_increase: f64::INFINITY,
        max_identity_err: 0.0,
    };
    let cfg = ExtractionConfig {
        loss_form: LossForm::Lambda,
        lambda1: 0.0,
        ..Default::default()
    };
    for i in 0..instances {
        let mut rng = instance_rng(seed, "consistency", i);
        let case = random_case(&mut rng, 6, 3)?;
        let q = case.queries[0].clone();
        let responses: Vec<Vec<Token>> = case
            .lm
            .enumerate_responses(&q, DEFAULT_ENUMERATION_CAP)?
            .into_iter()
            .map(|(y, _)| y)
            .collect();
        let a = rng.random_range(0..responses.len());
        let b = (a + rng.random_range(1..responses.len())) % responses.len();
        let (pos, neg) = (responses[a].clone(), responses[b].clone());
        let pair = LordPair {
            query: &q,
            positive: &pos,
            negative: &neg,
            victim_response: &pos,
            victim_logprob: None,
        };
        let margin = |m: &TabularLM| -> Result<f64, HarnessError> {
            Ok(m.sequence_logprob(&q, &pos)? - m.sequence_logprob(&q, &neg)?)
        };
        let (loss, grad) = lord_loss_and_grad(&case.lm, &pair, &cfg)?;
        let triple = [(q.clone(), pos.clone(), neg.clone())];
        let align = alignment_objective(&case.lm, &triple)?;
        out.max_identity_err = out.max_identity_err.max((align + loss.objective).abs());

        let before = margin(&case.lm)?;
        let mut stepped = case.lm.clone();
        stepped.apply_gradient(&grad, learning_rate)?;
        let gain = margin(&stepped)? - before;
        out.min_increase = out.min_increase.min(gain);
        if gain > 0.0 {
            out.increased += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceSuite {
    pub periods: usize,
    /// Largest per-context KL of the KD model over contexts the victim
    /// reaches with probability at least `min_reach`.
    pub kd_max_kl: f64,
    pub min_reach: f64,
    pub mle_agreement: f64,
    pub lord_agreement: f64,
    pub elapsed: Duration,
}

impl ConvergenceSuite {
    pub fn passed(&self) -> bool {
        self.kd_max_kl < 1e-3 && self.mle_agreement == 1.0 && self.lord_agreement == 1.0
    }
}

fn train_full(
    method: Method,
    victim: &crate::victim::VictimModel,
    queries: &[Vec<Token>],
    cfg: &ExtractionConfig,
) -> Result<TabularLM, HarnessError> {
    let mut session = victim.session(0);
    let records: Vec<QueryRecord> = queries
        .iter()
        .map(|q| session.query(q, method.access_mode(cfg)))
        .collect::<Result<_, _>>()?;
    let mut state = TrainState::new(method, fresh_local(&victim.lm), records, cfg, Some(&victim.lm))?;
    run_to_end(&mut state, cfg, &mut Hooks::default())?;
    Ok(state.model)
}

/// Trains KD, MLE and LoRD with default settings on a deterministic copy
/// victim (V = 4, one-token queries, two-token responses), querying every
/// query once.
pub fn convergence_suite(periods: usize) -> Result<ConvergenceSuite, HarnessError> {
    let start = Instant::now();
    let (victim, truth) = build_victim(&TaskSpec::new(TaskFamily::Copy, 4, 1, 2))?;
    let queries = truth.queries();
    let cap = DEFAULT_ENUMERATION_CAP;
    let min_reach = 1e-6;
    let base = ExtractionConfig {
        periods,
        ..Default::default()
    };
    let kd_cfg = ExtractionConfig {
        kd_targets: KdTargetSource::Full,
        ..base.clone()
    };
    debug_assert_eq!(Method::Kd.access_mode(&kd_cfg), AccessMode::Grey);
    let kd = train_full(Method::Kd, &victim, &queries, &kd_cfg)?;
    let mle = train_full(Method::Mle, &victim, &queries, &base)?;
    let lord = train_full(Method::Lord, &victim, &queries, &base)?;
    Ok(ConvergenceSuite {
        periods,
        kd_max_kl: exhaustive_agreement(&kd, &victim.lm, &queries, cap)?.max_kl_reached(min_reach),
        min_reach,
        mle_agreement: exhaustive_agreement(&mle, &victim.lm, &queries, cap)?.response_agreement(),
        lord_agreement: exhaustive_agreement(&lord, &victim.lm, &queries, cap)?.response_agreement(),
        elapsed: start.elapsed(),
    })
}

/// Runs every suite at acceptance size.
pub fn run_verify(seed: u64) -> Result<Vec<SuiteOutcome>, HarnessError> {
    let mut out = Vec::new();
    let t = Instant::now();
    let g = gradient_suite(100, seed)?;
    out.push(SuiteOutcome {
        name: "gradients",
        passed: g.passed(),
        detail: format!(
            "{} instances, max rel err {:.2e} ({}), {} skipped near clip boundary",
            g.instances, g.max_rel_err, g.worst, g.skipped_near_kink
        ),
        elapsed: t.elapsed(),
    });
    let t = Instant::now();
    let r = rlhf_suite(20, 1000, seed)?;
    out.push(SuiteOutcome {
        name: "rlhf-optimum",
        passed: r.passed(),
        detail: format!(
            "norm err {:.1e}, identity failures {}, minimizer violations {} (min gap {:.2e})",
            r.max_norm_err, r.identity_failures, r.minimizer_violations, r.min_gap
        ),
        elapsed: t.elapsed(),
    });
    let t = Instant::now();
    let c = consistency_suite(200, 1e-3, seed)?;
    out.push(SuiteOutcome {
        name: "consistency",
        passed: c.passed(),
        detail: format!(
            "{}/{} margins increased (min {:.2e}), identity err {:.1e}",
            c.increased, c.instances, c.min_increase, c.max_identity_err
        ),
        elapsed: t.elapsed(),
    });
    let v = convergence_suite(2000)?;
    out.push(SuiteOutcome {
        name: "convergence",
        passed: v.passed(),
        detail: format!(
            "kd max KL {:.2e}, mle agreement {}, lord agreement {}",
            v.kd_max_kl, v.mle_agreement, v.lord_agreement
        ),
        elapsed: v.elapsed,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        let g = gradient_suite(8, 1).unwrap();
        assert!(g.passed(), "{g:?}");
        let r = rlhf_suite(3, 100, 1).unwrap();
        assert!(r.passed(), "{r:?}");
        let c = consistency_suite(20, 1e-3, 1).unwrap();
        assert!(c.passed(), "{c:?}");
    }

    #[test]
    fn suites_are_deterministic() {
        let a = gradient_suite(3, 9).unwrap();
        let b = gradient_suite(3, 9).unwrap();
        assert_eq!(a.max_rel_err.to_bits(), b.max_rel_err.to_bits());
    }
}
