//! Central finite differences over touched logits.

use crate::lm::{ContextKey, Gradient, LmError, TabularLM};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so entries that are zero in
/// both gradients are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Numerical gradient of `loss` at `lm` over every logit of `contexts`:
/// `(f(θ + h e_i) - f(θ - h e_i)) / 2h`.
pub fn finite_diff_grad<F, E>(
    mut loss: F,
    lm: &TabularLM,
    contexts: &[ContextKey],
    step: f64,
) -> Result<Gradient, E>
where
    F: FnMut(&TabularLM) -> Result<f64, E>,
    E: From<LmError>,
{
    let mut probe = lm.clone();
    let mut grad = Gradient::default();
    let v = lm.vocab_size();
    for ctx in contexts {
        let original = lm.logits(ctx)?.into_owned();
        let mut row = vec![0.0; v];
        for (k, slot) in row.iter_mut().enumerate() {
            probe.logits_mut(ctx)?[k] = original[k] + step;
            let up = loss(&probe)?;
            probe.logits_mut(ctx)?[k] = original[k] - step;
            let down = loss(&probe)?;
            probe.logits_mut(ctx)?[k] = original[k];
            *slot = (up - down) / (2.0 * step);
        }
        grad.add_row(ctx, &row, 1.0);
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub entries: usize,
    pub max_abs_err: f64,
    /// `max |a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
    pub max_rel_err: f64,
    pub worst: Option<(ContextKey, usize)>,
}

/// Entry-wise comparison over `contexts`; absent rows count as zeros.
pub fn compare_gradients(
    analytic: &Gradient,
    numeric: &Gradient,
    contexts: &[ContextKey],
    vocab_size: usize,
) -> GradCheck {
    let mut out = GradCheck {
        entries: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst: None,
    };
    for ctx in contexts {
        for k in 0..vocab_size {
            let a = analytic.component(ctx, k);
            let n = numeric.component(ctx, k);
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(REL_ERR_FLOOR);
            out.entries += 1;
            out.max_abs_err = out.max_abs_err.max(abs);
            if rel > out.max_rel_err || out.worst.is_none() {
                out.max_rel_err = out.max_rel_err.max(rel);
                out.worst = Some((ctx.clone(), k));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{softmax, Token, Vocab};

    fn fixture() -> (TabularLM, Vec<Token>, Vec<ContextKey>) {
        let q = vec![1];
        let lm = TabularLM::randomized(Vocab::new(4).unwrap(), 1, 2, std::slice::from_ref(&q), 1.0, 5).unwrap();
        let ctxs = lm.reachable_contexts(&q, 100).unwrap();
        (lm, q, ctxs)
    }

    #[test]
    fn matches_log_likelihood_gradient() {
        let (lm, q, ctxs) = fixture();
        let y = vec![0, 2];
        let mut analytic = Gradient::default();
        analytic.add_logprob(&lm, &lm.steps(&q, &y).unwrap(), 1.0).unwrap();
        let numeric = finite_diff_grad::<_, LmError>(|m| m.sequence_logprob(&q, &y), &lm, &ctxs, DEFAULT_FD_STEP).unwrap();
        let c = compare_gradients(&analytic, &numeric, &ctxs, 4);
        assert_eq!(c.entries, ctxs.len() * 4);
        assert!(c.max_rel_err < 1e-6, "{c:?}");
    }

    #[test]
    fn error_decays_quadratically() {
        // Truncation error of central differences is O(h²); halving h should
        // divide it by about four while h is far above rounding noise.
        let (lm, _, ctxs) = fixture();
        let ctx = &ctxs[0];
        let f = |m: &TabularLM| -> Result<f64, LmError> {
            let p = softmax(&m.logits(ctx)?);
            Ok(p[0].powi(3))
        };
        let p = softmax(&lm.logits(ctx).unwrap());
        let mut exact = vec![0.0; 4];
        for (k, e) in exact.iter_mut().enumerate() {
            let d = if k == 0 { 1.0 } else { 0.0 };
            *e = 3.0 * p[0].powi(2) * p[0] * (d - p[k]);
        }
        let err = |h: f64| {
            let g = finite_diff_grad(f, &lm, std::slice::from_ref(ctx), h).unwrap();
            let row = g.get(ctx).unwrap();
            row.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let ratio = err(2e-2) / err(1e-2);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let (lm, q, ctxs) = fixture();
        let y = vec![3];
        let mut wrong = Gradient::default();
        wrong.add_logprob(&lm, &lm.steps(&q, &y).unwrap(), 0.9).unwrap();
        let numeric = finite_diff_grad::<_, LmError>(|m| m.sequence_logprob(&q, &y), &lm, &ctxs, DEFAULT_FD_STEP).unwrap();
        assert!(compare_gradients(&wrong, &numeric, &ctxs, 4).max_rel_err > 0.05);
    }
}
