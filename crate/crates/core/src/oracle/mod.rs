//! Exact reference computations used to check the trainers.
//!
//! Everything here works by enumeration over the small response spaces of
//! tabular models: the reward-tilted optimum of KL-regularized reward
//! maximization, the preference-alignment objective, a pairwise reward
//! diagnostic, finite-difference gradients and per-context agreement
//! reports between two models.

mod agreement;
mod gradcheck;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{sigmoid, ExtractionError};
use crate::lm::{log_sum_exp, LmError, TabularLM, Token};

pub use agreement::{exhaustive_agreement, write_agreement_csv, AgreementReport, ContextAgreement};
pub use gradcheck::{compare_gradients, finite_diff_grad, GradCheck, DEFAULT_FD_STEP, REL_ERR_FLOOR};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error("beta must be positive and finite, got {0}")]
    BadBeta(f64),
    #[error("reward for {0} is not finite")]
    NonFiniteReward(String),
    #[error("models disagree on shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Explicit reward table over `(query, response)`. Missing entries read as 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardTable {
    rewards: BTreeMap<(Vec<Token>, Vec<Token>), f64>,
}

impl RewardTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, query: &[Token], response: &[Token], reward: f64) {
        self.rewards.insert((query.to_vec(), response.to_vec()), reward);
    }

    pub fn get(&self, query: &[Token], response: &[Token]) -> f64 {
        self.rewards
            .get(&(query.to_vec(), response.to_vec()))
            .copied()
            .unwrap_or(0.0)
    }

    /// Table filled by `f` for every enumerable response of each query.
    pub fn from_fn<F: FnMut(&[Token], &[Token]) -> f64>(
        lm: &TabularLM,
        queries: &[Vec<Token>],
        cap: usize,
        mut f: F,
    ) -> Result<Self, OracleError> {
        let mut t = Self::new();
        for q in queries {
            for (y, _) in lm.enumerate_responses(q, cap)? {
                let r = f(q, &y);
                t.set(q, &y, r);
            }
        }
        Ok(t)
    }

    pub fn is_zero(&self) -> bool {
        self.rewards.values().all(|&r| r == 0.0)
    }

    fn check_finite(&self) -> Result<(), OracleError> {
        for ((q, y), r) in &self.rewards {
            if !r.is_finite() {
                return Err(OracleError::NonFiniteReward(format!("{q:?} -> {y:?}")));
            }
        }
        Ok(())
    }
}

/// Optimum of one query: `P*(y) = P_init(y)·exp(R(y)/β) / Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOptimum {
    pub query: Vec<Token>,
    /// Enumerated responses, in [`TabularLM::enumerate_responses`] order.
    pub responses: Vec<Vec<Token>>,
    pub init_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_partition: f64,
}

impl QueryOptimum {
    pub fn partition(&self) -> f64 {
        self.log_partition.exp()
    }

    /// `Σ_y P(y)·log(P(y) / (exp(R(y)/β)·P_init(y)))` for a candidate
    /// distribution over the same responses. Equals `KL(P || P*) - log Z`.
    pub fn objective(&self, p: &[f64], beta: f64) -> f64 {
        p.iter()
            .zip(&self.init_probs)
            .zip(&self.rewards)
            .filter(|((&pi, _), _)| pi > 0.0)
            .map(|((&pi, &p0), &r)| pi * (pi.ln() - p0.ln() - r / beta))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalPolicy {
    pub beta: f64,
    pub queries: Vec<QueryOptimum>,
}

/// The analytic optimum of reward maximization with a KL penalty of
/// strength `β` towards `p_init`, by exact enumeration.
///
/// An all-zero reward table returns `P_init` itself with `Z = 1`: the
/// enumerated mass of `P_init` sums to one only up to rounding, and the
/// tilt is the identity.
pub fn rlhf_optimum(
    p_init: &TabularLM,
    queries: &[Vec<Token>],
    rewards: &RewardTable,
    beta: f64,
    cap: usize,
) -> Result<OptimalPolicy, OracleError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(OracleError::BadBeta(beta));
    }
    rewards.check_finite()?;
    let identity = rewards.is_zero();
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let enumerated = p_init.enumerate_responses(q, cap)?;
        let (responses, init_probs): (Vec<_>, Vec<_>) = enumerated.into_iter().unzip();
        let r: Vec<f64> = responses.iter().map(|y| rewards.get(q, y)).collect();
        let (probs, log_partition) = if identity {
            (init_probs.clone(), 0.0)
        } else {
            let logits: Vec<f64> = init_probs
                .iter()
                .zip(&r)
                .map(|(&p, &ri)| p.ln() + ri / beta)
                .collect();
            let lz = log_sum_exp(&logits);
            (logits.iter().map(|l| (l - lz).exp()).collect(), lz)
        };
        out.push(QueryOptimum {
            query: q.clone(),
            responses,
            init_probs,
            rewards: r,
            probs,
            log_partition,
        });
    }
    Ok(OptimalPolicy {
        beta,
        queries: out,
    })
}

/// Outcome of perturbing an optimum and re-scoring the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizerCheck {
    pub trials: usize,
    /// Perturbations whose objective was not strictly larger.
    pub violations: usize,
    /// Smallest observed `J(P) - J(P*)`.
    pub min_gap: f64,
}

/// Mixes `P*` with a random Dirichlet(1) draw at weight `ε ∈ [eps_min, 1]`
/// and checks that the objective strictly increases every time.
pub fn kl_minimizer_check<R: Rng + ?Sized>(
    opt: &QueryOptimum,
    beta: f64,
    trials: usize,
    eps_min: f64,
    rng: &mut R,
) -> MinimizerCheck {
    let base = opt.objective(&opt.probs, beta);
    let n = opt.probs.len();
    let mut violations = 0;
    let mut min_gap = f64::INFINITY;
    for _ in 0..trials {
        let eps = eps_min + (1.0 - eps_min) * rng.random::<f64>();
        let mut d: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let s: f64 = d.iter().sum();
        d.iter_mut().for_each(|x| *x /= s);
        let p: Vec<f64> = opt
            .probs
            .iter()
            .zip(&d)
            .map(|(&ps, &di)| (1.0 - eps) * ps + eps * di)
            .collect();
        let gap = opt.objective(&p, beta) - base;
        min_gap = min_gap.min(gap);
        if gap.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            violations += 1;
        }
    }
    MinimizerCheck {
        trials,
        violations,
        min_gap,
    }
}

/// One preference triple `(x, y⁺, y⁻)`.
pub type PreferencePair = (Vec<Token>, Vec<Token>, Vec<Token>);

/// `Σ log P(y⁺|x) - log P(y⁻|x)`, to be maximized.
pub fn alignment_objective(lm: &TabularLM, pairs: &[PreferencePair]) -> Result<f64, OracleError> {
    let mut total = 0.0;
    for (x, pos, neg) in pairs {
        total += lm.sequence_logprob(x, pos)? - lm.sequence_logprob(x, neg)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseRewardLoss {
    pub total: f64,
    pub per_pair: Vec<f64>,
}

/// `Σ σ(R(x, y⁺) - R(x, y⁻))` over the pairs, evaluated without the log or
/// sign of the usual Bradley-Terry loss. Diagnostic only.
pub fn reward_pairwise_loss(table: &RewardTable, pairs: &[PreferencePair]) -> PairwiseRewardLoss {
    let per_pair: Vec<f64> = pairs
        .iter()
        .map(|(x, pos, neg)| sigmoid(table.get(x, pos) - table.get(x, neg)))
        .collect();
    PairwiseRewardLoss {
        total: per_pair.iter().sum(),
        per_pair,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{lord_loss_and_grad, ExtractionConfig, LordPair, LossForm};
    use crate::lm::{Vocab, DEFAULT_ENUMERATION_CAP};
    use crate::seeding;

    fn random_lm(v: usize, nr: usize, seed: u64) -> (TabularLM, Vec<Vec<Token>>) {
        let queries = vec![vec![0], vec![1]];
        let lm = TabularLM::randomized(Vocab::new(v).unwrap(), 1, nr, &queries, 1.0, seed).unwrap();
        (lm, queries)
    }

    #[test]
    fn zero_reward_is_identity() {
        let (lm, qs) = random_lm(4, 2, 1);
        let opt = rlhf_optimum(&lm, &qs, &RewardTable::new(), 0.7, DEFAULT_ENUMERATION_CAP).unwrap();
        for q in &opt.queries {
            assert_eq!(q.probs, q.init_probs);
            assert_eq!(q.partition(), 1.0);
        }
    }

    #[test]
    fn huge_beta_approaches_init() {
        let (lm, qs) = random_lm(4, 2, 2);
        let table = RewardTable::from_fn(&lm, &qs, DEFAULT_ENUMERATION_CAP, |_, y| y.len() as f64).unwrap();
        let opt = rlhf_optimum(&lm, &qs, &table, 1e9, DEFAULT_ENUMERATION_CAP).unwrap();
        for q in &opt.queries {
            let sup = q
                .probs
                .iter()
                .zip(&q.init_probs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(sup < 1e-6);
        }
    }

    #[test]
    fn hand_enumerated_binary_case() {
        // V = 2: content token 0 and end token 1, responses "" and "0".
        let lm = TabularLM::new(Vocab::new(2).unwrap(), 1, 1);
        let q = vec![0];
        let mut table = RewardTable::new();
        table.set(&q, &[0], 3f64.ln());
        let opt = rlhf_optimum(&lm, std::slice::from_ref(&q), &table, 1.0, 10).unwrap();
        let o = &opt.queries[0];
        assert_eq!(o.responses, vec![vec![], vec![0]]);
        // Weights 1/2 and 3/2, Z = 2.
        assert!((o.partition() - 2.0).abs() < 1e-15);
        assert!((o.probs[0] - 0.25).abs() < 1e-15);
        assert!((o.probs[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn normalized_and_minimizes_objective() {
        for seed in 0..5 {
            let (lm, qs) = random_lm(4, 2, seed);
            let mut rng = seeding::rng(seed, &[7]);
            let table = RewardTable::from_fn(&lm, &qs, DEFAULT_ENUMERATION_CAP, |_, _| {
                rng.random_range(-2.0..2.0)
            })
            .unwrap();
            let opt = rlhf_optimum(&lm, &qs, &table, 0.5, DEFAULT_ENUMERATION_CAP).unwrap();
            for q in &opt.queries {
                assert!((q.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(q.partition() > 0.0);
                // J(P*) = -log Z.
                assert!((q.objective(&q.probs, 0.5) + q.log_partition).abs() < 1e-12);
                let c = kl_minimizer_check(q, 0.5, 200, 1e-2, &mut rng);
                assert_eq!(c.violations, 0, "min gap {}", c.min_gap);
            }
        }
    }

    #[test]
    fn rejects_bad_beta_and_rewards() {
        let (lm, qs) = random_lm(3, 1, 0);
        assert!(matches!(
            rlhf_optimum(&lm, &qs, &RewardTable::new(), 0.0, 100),
            Err(OracleError::BadBeta(_))
        ));
        let mut t = RewardTable::new();
        t.set(&[0], &[], f64::NAN);
        assert!(matches!(
            rlhf_optimum(&lm, &qs, &t, 1.0, 100),
            Err(OracleError::NonFiniteReward(_))
        ));
        assert!(matches!(
            rlhf_optimum(&lm, &qs, &RewardTable::new(), 1.0, 2),
            Err(OracleError::Lm(LmError::EnumerationTooLarge { .. }))
        ));
    }

    #[test]
    fn pairwise_reward_values() {
        let mut t = RewardTable::new();
        t.set(&[0], &[1], 3f64.ln());
        let pairs = vec![
            (vec![0], vec![0], vec![2]),
            (vec![0], vec![1], vec![0]),
            (vec![0], vec![1], vec![1]),
        ];
        let l = reward_pairwise_loss(&t, &pairs);
        assert_eq!(l.per_pair[0], 0.5);
        assert!((l.per_pair[1] - 0.75).abs() < 1e-15);
        assert_eq!(l.per_pair[2], 0.5);
        t.set(&[1], &[0], 800.0);
        let far = reward_pairwise_loss(&t, &[(vec![1], vec![0], vec![1])]);
        assert_eq!(far.per_pair[0], 1.0);
    }

    #[test]
    fn alignment_objective_negates_lord_objective() {
        let (lm, qs) = random_lm(5, 3, 3);
        let cfg = ExtractionConfig {
            loss_form: LossForm::Sum,
            ..ExtractionConfig::default()
        };
        let pairs = vec![(qs[0].clone(), vec![0, 1], vec![2]), (qs[1].clone(), vec![], vec![3, 3, 3])];
        let mut lord = 0.0;
        for (x, p, n) in &pairs {
            let pair = LordPair {
                query: x,
                positive: p,
                negative: n,
                victim_response: p,
                victim_logprob: None,
            };
            lord += lord_loss_and_grad(&lm, &pair, &cfg).unwrap().0.objective;
        }
        let a = alignment_objective(&lm, &pairs).unwrap();
        assert!((a + lord).abs() < 1e-12);
        let sym = vec![(qs[0].clone(), vec![1], vec![1])];
        assert_eq!(alignment_objective(&lm, &sym).unwrap(), 0.0);
    }

    #[test]
    fn policy_json_round_trip() {
        let (lm, qs) = random_lm(3, 2, 4);
        let t = RewardTable::from_fn(&lm, &qs, 100, |_, y| y.len() as f64 * 0.3).unwrap();
        let opt = rlhf_optimum(&lm, &qs, &t, 2.0, 100).unwrap();
        let s = serde_json::to_string(&opt).unwrap();
        let back: OptimalPolicy = serde_json::from_str(&s).unwrap();
        assert_eq!(back, opt);
    }
}
