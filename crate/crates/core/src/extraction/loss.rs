//! Closed-form losses and logit gradients for MLE, KD and LoRD.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ExtractionConfig, ExtractionError, KdSoftening, LossForm};
use crate::lm::{dist_kl, softmax, softmax_t, ContextKey, Gradient, TabularLM, Token};
use crate::victim::QueryRecord;

/// Floor for the stop-gradient denominator of the victim-weighted objective.
pub const WEIGHT_EPS: f64 = 1e-6;

/// Per-pair LoRD loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `log P(y⁻) - log P(y⁺)`, divided by the victim weight when enabled.
    pub objective: f64,
    /// `log P(y⁻) - log P(y_vic)` before clipping.
    pub reg_raw: f64,
    pub reg_clipped: f64,
    pub total: f64,
    /// The wrapped value when the sigmoid form is used.
    pub sigmoid: Option<f64>,
}

pub fn clip(z: f64, kappa: f64) -> f64 {
    z.clamp(-kappa, kappa)
}

/// Derivative of [`clip`]: one strictly inside the band, zero outside.
pub fn clip_slope(z: f64, kappa: f64) -> f64 {
    if z > -kappa && z < kappa {
        1.0
    } else {
        0.0
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Negative log-likelihood of the victim responses and its gradient,
/// `softmax - onehot` at every visited step, summed over records.
pub fn mle_loss_and_grad(
    lm: &TabularLM,
    records: &[QueryRecord],
) -> Result<(f64, Gradient), ExtractionError> {
    if records.is_empty() {
        return Err(ExtractionError::EmptyDataset);
    }
    let mut loss = 0.0;
    let mut grad = Gradient::default();
    for r in records {
        loss -= lm.sequence_logprob(&r.query, &r.response)?;
        let steps = lm.steps(&r.query, &r.response)?;
        grad.add_logprob(lm, &steps, -1.0)?;
    }
    Ok((loss, grad))
}

/// Distillation targets: one victim next-token distribution per context.
pub type KdTargets = BTreeMap<ContextKey, Vec<f64>>;

/// Contexts visited by the records' responses.
fn visited(lm: &TabularLM, records: &[QueryRecord]) -> Result<Vec<ContextKey>, ExtractionError> {
    let mut out = Vec::new();
    for r in records {
        for s in lm.steps(&r.query, &r.response)? {
            out.push(s.context);
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Targets read from a victim model at every visited context.
pub fn kd_targets_from_victim(
    victim: &TabularLM,
    records: &[QueryRecord],
) -> Result<KdTargets, ExtractionError> {
    let mut out = KdTargets::new();
    for ctx in visited(victim, records)? {
        let d = victim.next_token_dist(&ctx, 1.0)?;
        out.insert(ctx, d.probs);
    }
    Ok(out)
}

/// Targets built from grey-box top-k lists, renormalized over the listed
/// tokens. With `k >= V` this recovers the full distribution.
pub fn kd_targets_from_records(
    lm: &TabularLM,
    records: &[QueryRecord],
) -> Result<KdTargets, ExtractionError> {
    let v = lm.vocab_size();
    let mut out = KdTargets::new();
    for r in records {
        let steps = lm.steps(&r.query, &r.response)?;
        let lists = r
            .topk
            .as_ref()
            .ok_or_else(|| ExtractionError::MissingTarget(ContextKey::root(&r.query).to_string()))?;
        if lists.len() != steps.len() {
            return Err(ExtractionError::MissingTarget(format!(
                "{} steps but {} top-k lists for {}",
                steps.len(),
                lists.len(),
                ContextKey::root(&r.query)
            )));
        }
        for (step, list) in steps.iter().zip(lists) {
            let mut row = vec![0.0; v];
            for &(t, p) in list {
                lm.vocab().check(t)?;
                row[t as usize] = p;
            }
            let mass: f64 = row.iter().sum();
            if mass <= 0.0 {
                return Err(ExtractionError::MissingTarget(step.context.to_string()));
            }
            row.iter_mut().for_each(|p| *p /= mass);
            out.insert(step.context.clone(), row);
        }
    }
    Ok(out)
}

/// The softened distribution used by the second distillation term.
pub fn soften(dist_or_logits: &[f64], temperature: f64, mode: KdSoftening, is_logits: bool) -> Vec<f64> {
    match (mode, is_logits) {
        (KdSoftening::Logits, true) => softmax_t(dist_or_logits, temperature),
        (KdSoftening::Logits, false) => {
            // softmax(log p / T), i.e. p^(1/T) renormalized; zeros stay zero.
            let powed: Vec<f64> = dist_or_logits
                .iter()
                .map(|&p| if p > 0.0 { p.powf(1.0 / temperature) } else { 0.0 })
                .collect();
            let s: f64 = powed.iter().sum();
            powed.into_iter().map(|x| x / s).collect()
        }
        (KdSoftening::Probabilities, true) => softmax_t(&softmax(dist_or_logits), temperature),
        (KdSoftening::Probabilities, false) => softmax_t(dist_or_logits, temperature),
    }
}

/// `Σ_ctx KL(p_vic || p_θ) + T²·KL(soft(p_vic) || soft(p_θ))` and its
/// gradient with respect to the local logits.
pub fn kd_loss_and_grad(
    lm: &TabularLM,
    targets: &KdTargets,
    temperature: f64,
    softening: KdSoftening,
) -> Result<(f64, Gradient), ExtractionError> {
    if targets.is_empty() {
        return Err(ExtractionError::EmptyDataset);
    }
    let t = temperature;
    let mut loss = 0.0;
    let mut grad = Gradient::default();
    for (ctx, p) in targets {
        let z = lm.logits(ctx)?;
        let q = softmax(&z);
        let a = soften(p, t, softening, false);
        let s = soften(&z, t, softening, true);
        loss += kl_or_err(p, &q, ctx)? + t * t * kl_or_err(&a, &s, ctx)?;
        let row: Vec<f64> = match softening {
            KdSoftening::Logits => (0..q.len())
                .map(|k| (q[k] - p[k]) + t * (s[k] - a[k]))
                .collect(),
            KdSoftening::Probabilities => {
                // Chain rule through q = softmax(z): J_q = diag(q) - q qᵀ.
                let u: Vec<f64> = s.iter().zip(&a).map(|(s, a)| s - a).collect();
                let qu: f64 = q.iter().zip(&u).map(|(q, u)| q * u).sum();
                (0..q.len())
                    .map(|k| (q[k] - p[k]) + t * q[k] * (u[k] - qu))
                    .collect()
            }
        };
        grad.add_row(ctx, &row, 1.0);
    }
    Ok((loss, grad))
}

fn kl_or_err(p: &[f64], q: &[f64], ctx: &ContextKey) -> Result<f64, ExtractionError> {
    dist_kl(p, q).map_err(|_| ExtractionError::MissingTarget(format!("KL undefined at {ctx}")))
}

/// `log P_θt(y|x) - log P_θprev(y|x)`. The snapshot is read only.
pub fn lord_delta(
    current: &TabularLM,
    snapshot: &TabularLM,
    query: &[Token],
    response: &[Token],
) -> Result<f64, ExtractionError> {
    Ok(current.sequence_logprob(query, response)? - snapshot.sequence_logprob(query, response)?)
}

/// Inputs to one LoRD pair loss.
#[derive(Debug, Clone, Copy)]
pub struct LordPair<'a> {
    pub query: &'a [Token],
    pub positive: &'a [Token],
    pub negative: &'a [Token],
    pub victim_response: &'a [Token],
    /// Victim `log P(y_vic|x)`, required by the victim-weighted objective.
    pub victim_logprob: Option<f64>,
}

/// LoRD loss of one pair under `cfg.loss_form`, with the gradient of the
/// returned total. A degenerate pair (`y⁺ = y⁻`) contributes no objective
/// gradient; the regularizer is kept.
pub fn lord_loss_and_grad(
    lm: &TabularLM,
    pair: &LordPair<'_>,
    cfg: &ExtractionConfig,
) -> Result<(LossBreakdown, Gradient), ExtractionError> {
    let lp_pos = lm.sequence_logprob(pair.query, pair.positive)?;
    let lp_neg = lm.sequence_logprob(pair.query, pair.negative)?;
    let lp_vic = lm.sequence_logprob(pair.query, pair.victim_response)?;

    let weight = if cfg.victim_weighted_objective {
        let vic = pair.victim_logprob.ok_or(ExtractionError::MissingVictimLogprob)?;
        1.0 / (lp_vic - vic).abs().max(WEIGHT_EPS)
    } else {
        1.0
    };
    let degenerate = pair.positive == pair.negative;
    let objective = if degenerate { 0.0 } else { weight * (lp_neg - lp_pos) };
    let w_obj = if degenerate { 0.0 } else { weight };

    let reg_raw = lp_neg - lp_vic;
    let reg_clipped = clip(reg_raw, cfg.kappa);
    let g = clip_slope(reg_raw, cfg.kappa);

    // Coefficients of d total / d log P(y) for y⁺, y⁻, y_vic.
    let (total, sig, c_pos, c_neg, c_vic) = match cfg.loss_form {
        LossForm::Sum => (objective + reg_clipped, None, -w_obj, w_obj + g, -g),
        LossForm::Sigmoid => {
            let s = sigmoid(objective + reg_clipped);
            let d = s * (1.0 - s);
            (s, Some(s), -w_obj * d, (w_obj + g) * d, -g * d)
        }
        LossForm::Lambda => {
            let l = cfg.lambda1;
            (
                (1.0 - l) * objective + l * reg_clipped,
                None,
                -(1.0 - l) * w_obj,
                (1.0 - l) * w_obj + l * g,
                -l * g,
            )
        }
    };

    let mut grad = Gradient::default();
    grad.add_logprob(lm, &lm.steps(pair.query, pair.positive)?, c_pos)?;
    grad.add_logprob(lm, &lm.steps(pair.query, pair.negative)?, c_neg)?;
    grad.add_logprob(lm, &lm.steps(pair.query, pair.victim_response)?, c_vic)?;
    Ok((
        LossBreakdown {
            objective,
            reg_raw,
            reg_clipped,
            total,
            sigmoid: sig,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::Vocab;

    fn record(q: &[Token], r: &[Token]) -> QueryRecord {
        QueryRecord {
            query: q.to_vec(),
            response: r.to_vec(),
            topk: None,
            logprob: None,
        }
    }

    #[test]
    fn mle_two_token_gradient() {
        let lm = TabularLM::new(Vocab::new(2).unwrap(), 1, 1);
        // V=2: the only content token is 0; a length-1 response has no end step.
        let (loss, grad) = mle_loss_and_grad(&lm, &[record(&[0], &[0])]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(grad.get(&ContextKey::root(&[0])).unwrap(), &[-0.5, 0.5]);
    }

    #[test]
    fn mle_zero_at_optimum() {
        let mut lm = TabularLM::new(Vocab::new(3).unwrap(), 1, 1);
        lm.set_logits(&ContextKey::root(&[1]), vec![-800.0, 0.0, -800.0]).unwrap();
        let (loss, grad) = mle_loss_and_grad(&lm, &[record(&[1], &[1])]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.norm() == 0.0);
    }

    #[test]
    fn kd_identity_and_unit_temperature() {
        let queries = vec![vec![0], vec![1]];
        let victim = TabularLM::randomized(Vocab::new(4).unwrap(), 1, 2, &queries, 1.0, 3).unwrap();
        let recs = vec![record(&[0], &[1, 2]), record(&[1], &[])];
        let targets = kd_targets_from_victim(&victim, &recs).unwrap();
        let (loss, _) = kd_loss_and_grad(&victim, &targets, 2.0, KdSoftening::Logits).unwrap();
        assert!(loss.abs() < 1e-12);

        let local = TabularLM::randomized(Vocab::new(4).unwrap(), 1, 2, &queries, 1.0, 4).unwrap();
        let (loss, _) = kd_loss_and_grad(&local, &targets, 1.0, KdSoftening::Logits).unwrap();
        let mut kl = 0.0;
        for (ctx, p) in &targets {
            kl += dist_kl(p, &local.next_token_dist(ctx, 1.0).unwrap()).unwrap();
        }
        assert!((loss - 2.0 * kl).abs() < 1e-12);
    }

    #[test]
    fn topk_targets_renormalize() {
        let lm = TabularLM::new(Vocab::new(4).unwrap(), 1, 1);
        let mut r = record(&[0], &[2]);
        r.topk = Some(vec![vec![(2, 0.5), (1, 0.3)]]);
        let t = kd_targets_from_records(&lm, &[r.clone()]).unwrap();
        let row = &t[&ContextKey::root(&[0])];
        assert!((row[2] - 0.625).abs() < 1e-15 && (row[1] - 0.375).abs() < 1e-15);
        r.topk = None;
        assert!(kd_targets_from_records(&lm, &[r]).is_err());
    }

    #[test]
    fn symmetric_point_values() {
        let lm = TabularLM::new(Vocab::new(3).unwrap(), 1, 1);
        let pair = LordPair {
            query: &[0],
            positive: &[0],
            negative: &[1],
            victim_response: &[],
            victim_logprob: None,
        };
        let mut cfg = ExtractionConfig::default();
        cfg.loss_form = LossForm::Sum;
        let (b, _) = lord_loss_and_grad(&lm, &pair, &cfg).unwrap();
        assert_eq!(b.total, 0.0);
        cfg.loss_form = LossForm::Sigmoid;
        let (b, _) = lord_loss_and_grad(&lm, &pair, &cfg).unwrap();
        assert_eq!(b.sigmoid, Some(0.5));
    }

    #[test]
    fn clip_saturates_with_zero_slope() {
        assert_eq!(clip(2.3, 1.0), 1.0);
        assert_eq!(clip_slope(2.3, 1.0), 0.0);
        assert_eq!(clip(-0.4, 1.0), -0.4);
        assert_eq!(clip_slope(-0.4, 1.0), 1.0);
    }

    #[test]
    fn lambda_one_is_regularizer_only() {
        let queries = vec![vec![0]];
        let lm = TabularLM::randomized(Vocab::new(4).unwrap(), 1, 2, &queries, 1.0, 5).unwrap();
        let mut cfg = ExtractionConfig::default();
        cfg.loss_form = LossForm::Lambda;
        cfg.lambda1 = 1.0;
        cfg.kappa = 1e9;
        let pair = LordPair {
            query: &[0],
            positive: &[1],
            negative: &[2, 0],
            victim_response: &[0, 0],
            victim_logprob: None,
        };
        let (b, grad) = lord_loss_and_grad(&lm, &pair, &cfg).unwrap();
        assert_eq!(b.total, b.reg_raw);
        let mut expect = Gradient::default();
        expect.add_logprob(&lm, &lm.steps(&[0], &[2, 0]).unwrap(), 1.0).unwrap();
        expect.add_logprob(&lm, &lm.steps(&[0], &[0, 0]).unwrap(), -1.0).unwrap();
        for (ctx, row) in expect.iter() {
            for (k, &e) in row.iter().enumerate() {
                assert!((grad.component(ctx, k) - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn lambda_zero_is_objective_only() {
        let queries = vec![vec![0]];
        let lm = TabularLM::randomized(Vocab::new(4).unwrap(), 1, 2, &queries, 1.0, 7).unwrap();
        let mut cfg = ExtractionConfig::default();
        cfg.loss_form = LossForm::Lambda;
        cfg.lambda1 = 0.0;
        let pair = LordPair {
            query: &[0],
            positive: &[1],
            negative: &[2, 0],
            victim_response: &[0, 0],
            victim_logprob: None,
        };
        let (b, grad) = lord_loss_and_grad(&lm, &pair, &cfg).unwrap();
        assert_eq!(b.total, b.objective);
        let mut expect = Gradient::default();
        expect.add_logprob(&lm, &lm.steps(&[0], &[2, 0]).unwrap(), 1.0).unwrap();
        expect.add_logprob(&lm, &lm.steps(&[0], &[1]).unwrap(), -1.0).unwrap();
        for (ctx, row) in expect.iter() {
            for (k, &e) in row.iter().enumerate() {
                assert!((grad.component(ctx, k) - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn degenerate_pair_keeps_regularizer() {
        let queries = vec![vec![0]];
        let lm = TabularLM::randomized(Vocab::new(3).unwrap(), 1, 2, &queries, 1.0, 6).unwrap();
        let cfg = ExtractionConfig {
            loss_form: LossForm::Sum,
            kappa: 100.0,
            ..ExtractionConfig::default()
        };
        let pair = LordPair {
            query: &[0],
            positive: &[1],
            negative: &[1],
            victim_response: &[0],
            victim_logprob: None,
        };
        let (b, grad) = lord_loss_and_grad(&lm, &pair, &cfg).unwrap();
        assert_eq!(b.objective, 0.0);
        assert_eq!(b.total, b.reg_clipped);
        assert!(grad.norm() > 0.0);
    }
}
