//! Long-form next-token distribution tables for external plotting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::lm::{dist_entropy, dist_kl, spearman_corr, ContextKey, TabularLM, Token};

/// Candidates kept per context and model.
pub const VIZ_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VizRow {
    pub model: String,
    pub context: String,
    /// Response position, the prefix length of the context.
    pub step: usize,
    /// 1 for the most likely token.
    pub rank: usize,
    pub token: Token,
    pub prob: f64,
}

/// Every context the victim reaches from `queries`, in query order.
pub fn response_contexts(
    victim: &TabularLM,
    queries: &[Vec<Token>],
    cap: usize,
) -> Result<Vec<ContextKey>, HarnessError> {
    let mut out = Vec::new();
    for q in queries {
        out.extend(victim.reachable_contexts(q, cap)?);
    }
    Ok(out)
}

/// Top-5 probabilities of the initial, extracted and victim models at each
/// context, rows sorted by descending probability within a block.
pub fn emit_distribution_viz(
    initial: &TabularLM,
    extracted: &TabularLM,
    victim: &TabularLM,
    contexts: &[ContextKey],
) -> Result<Vec<VizRow>, HarnessError> {
    let mut rows = Vec::new();
    for ctx in contexts {
        for (name, lm) in [("initial", initial), ("extracted", extracted), ("victim", victim)] {
            let dist = lm.next_token_dist(ctx, 1.0)?;
            for (i, (token, prob)) in dist.top_k(VIZ_TOP_K).into_iter().enumerate() {
                rows.push(VizRow {
                    model: name.to_string(),
                    context: ctx.to_string(),
                    step: ctx.prefix.len(),
                    rank: i + 1,
                    token,
                    prob,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_viz_csv<W: Write>(w: W, rows: &[VizRow]) -> Result<(), HarnessError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Aggregates over the same contexts as the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistStats {
    pub contexts: usize,
    pub mean_entropy_local: f64,
    pub mean_entropy_victim: f64,
    /// Mean `KL(victim || local)`.
    pub mean_kl: f64,
    pub mean_spearman: f64,
}

pub fn distribution_stats(
    local: &TabularLM,
    victim: &TabularLM,
    contexts: &[ContextKey],
) -> Result<DistStats, HarnessError> {
    let (mut hl, mut hv, mut kl, mut rho) = (0.0, 0.0, 0.0, 0.0);
    for ctx in contexts {
        let l = local.next_token_dist(ctx, 1.0)?.probs;
        let v = victim.next_token_dist(ctx, 1.0)?.probs;
        hl += dist_entropy(&l);
        hv += dist_entropy(&v);
        kl += dist_kl(&v, &l)?;
        rho += spearman_corr(&v, &l);
    }
    let n = contexts.len().max(1) as f64;
    Ok(DistStats {
        contexts: contexts.len(),
        mean_entropy_local: hl / n,
        mean_entropy_victim: hv / n,
        mean_kl: kl / n,
        mean_spearman: rho / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::Vocab;

    fn models() -> (TabularLM, TabularLM, Vec<Vec<Token>>) {
        let qs = vec![vec![0], vec![1]];
        let a = TabularLM::randomized(Vocab::new(7).unwrap(), 1, 2, &qs, 1.0, 1).unwrap();
        let b = TabularLM::randomized(Vocab::new(7).unwrap(), 1, 2, &qs, 1.0, 2).unwrap();
        (a, b, qs)
    }

    #[test]
    fn identical_models_give_identical_blocks() {
        let (a, _, qs) = models();
        let ctxs = response_contexts(&a, &qs, 1000).unwrap();
        let rows = emit_distribution_viz(&a, &a, &a, &ctxs).unwrap();
        assert_eq!(rows.len(), ctxs.len() * 3 * VIZ_TOP_K);
        for block in rows.chunks(3 * VIZ_TOP_K) {
            let (x, rest) = block.split_at(VIZ_TOP_K);
            let (y, z) = rest.split_at(VIZ_TOP_K);
            for i in 0..VIZ_TOP_K {
                assert_eq!((x[i].token, x[i].prob), (y[i].token, y[i].prob));
                assert_eq!((x[i].token, x[i].prob), (z[i].token, z[i].prob));
            }
        }
    }

    #[test]
    fn rows_sorted_descending() {
        let (a, b, qs) = models();
        let ctxs = response_contexts(&b, &qs, 1000).unwrap();
        let rows = emit_distribution_viz(&a, &b, &b, &ctxs).unwrap();
        for block in rows.chunks(VIZ_TOP_K) {
            assert!(block.windows(2).all(|w| w[0].prob >= w[1].prob));
            assert_eq!(block[0].rank, 1);
        }
    }

    #[test]
    fn csv_header_and_length() {
        let (a, b, qs) = models();
        let ctxs = response_contexts(&b, &qs[..1], 1000).unwrap();
        let rows = emit_distribution_viz(&a, &b, &b, &ctxs).unwrap();
        let mut buf = Vec::new();
        write_viz_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("model,context,step,rank,token,prob\n"));
        assert_eq!(text.lines().count(), rows.len() + 1);
    }
}
