//! Context-by-context comparison of a local model with a victim.

use std::io::Write;

use serde::Serialize;

use super::OracleError;
use crate::lm::{dist_kl, softmax, spearman_corr, ContextKey, TabularLM, Token};

#[derive(Debug, Clone, PartialEq)]
pub struct ContextAgreement {
    pub context: ContextKey,
    /// Victim probability of emitting this context's prefix.
    pub reach: f64,
    /// `KL(victim || local)` of the next-token distributions.
    pub kl: f64,
    pub spearman: f64,
    pub argmax_match: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    pub rows: Vec<ContextAgreement>,
    pub mean_kl: f64,
    pub max_kl: f64,
    pub mean_spearman: f64,
    /// Fraction of contexts whose most likely next token agrees.
    pub argmax_rate: f64,
    /// Queries whose most likely full response agrees.
    pub response_matches: usize,
    pub queries: usize,
}

impl AgreementReport {
    /// Largest per-context KL among contexts the victim reaches with
    /// probability at least `min_reach`.
    pub fn max_kl_reached(&self, min_reach: f64) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.reach >= min_reach)
            .map(|r| r.kl)
            .fold(0.0, f64::max)
    }

    pub fn response_agreement(&self) -> f64 {
        if self.queries == 0 {
            1.0
        } else {
            self.response_matches as f64 / self.queries as f64
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn most_likely_response(lm: &TabularLM, query: &[Token], cap: usize) -> Result<Vec<Token>, OracleError> {
    let all = lm.enumerate_responses(query, cap)?;
    let probs: Vec<f64> = all.iter().map(|(_, p)| *p).collect();
    Ok(all[argmax(&probs)].0.clone())
}

/// Compares every reachable context of every query, plus the most likely
/// full response per query. `cap` bounds both enumerations.
pub fn exhaustive_agreement(
    local: &TabularLM,
    victim: &TabularLM,
    queries: &[Vec<Token>],
    cap: usize,
) -> Result<AgreementReport, OracleError> {
    if local.vocab_size() != victim.vocab_size() || local.max_response_len() != victim.max_response_len() {
        return Err(OracleError::Shape(format!(
            "local V={} N_R={}, victim V={} N_R={}",
            local.vocab_size(),
            local.max_response_len(),
            victim.vocab_size(),
            victim.max_response_len()
        )));
    }
    let mut rows = Vec::new();
    let mut response_matches = 0;
    for q in queries {
        for ctx in victim.reachable_contexts(q, cap)? {
            let p = softmax(&victim.logits(&ctx)?);
            let l = softmax(&local.logits(&ctx)?);
            let reach = prefix_logprob(victim, q, &ctx.prefix)?.exp();
            rows.push(ContextAgreement {
                kl: dist_kl(&p, &l)?,
                spearman: spearman_corr(&p, &l),
                argmax_match: argmax(&p) == argmax(&l),
                reach,
                context: ctx,
            });
        }
        if most_likely_response(local, q, cap)? == most_likely_response(victim, q, cap)? {
            response_matches += 1;
        }
    }
    let n = rows.len().max(1) as f64;
    Ok(AgreementReport {
        mean_kl: rows.iter().map(|r| r.kl).sum::<f64>() / n,
        max_kl: rows.iter().map(|r| r.kl).fold(0.0, f64::max),
        mean_spearman: rows.iter().map(|r| r.spearman).sum::<f64>() / n,
        argmax_rate: rows.iter().filter(|r| r.argmax_match).count() as f64 / n,
        response_matches,
        queries: queries.len(),
        rows,
    })
}

/// `log P(prefix)` without an end step: the probability of reaching the
/// context rather than of the finished response.
fn prefix_logprob(lm: &TabularLM, query: &[Token], prefix: &[Token]) -> Result<f64, crate::lm::LmError> {
    let mut lp = 0.0;
    for i in 0..prefix.len() {
        let row = lm.next_token_logprobs(&ContextKey::new(query, &prefix[..i]))?;
        lp += row[prefix[i] as usize];
    }
    Ok(lp)
}

#[derive(Serialize)]
struct CsvRow {
    context: String,
    reach: f64,
    kl: f64,
    spearman: f64,
    argmax_match: bool,
}

pub fn write_agreement_csv<W: Write>(w: W, report: &AgreementReport) -> Result<(), OracleError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in &report.rows {
        wr.serialize(CsvRow {
            context: r.context.to_string(),
            reach: r.reach,
            kl: r.kl,
            spearman: r.spearman,
            argmax_match: r.argmax_match,
        })?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::Vocab;

    fn pair(seed: u64) -> (TabularLM, TabularLM, Vec<Vec<Token>>) {
        let qs = vec![vec![0], vec![2]];
        let a = TabularLM::randomized(Vocab::new(4).unwrap(), 1, 2, &qs, 1.0, seed).unwrap();
        let b = TabularLM::randomized(Vocab::new(4).unwrap(), 1, 2, &qs, 1.0, seed + 100).unwrap();
        (a, b, qs)
    }

    #[test]
    fn self_agreement_is_perfect() {
        let (a, _, qs) = pair(1);
        let r = exhaustive_agreement(&a, &a, &qs, 1000).unwrap();
        assert!(r.rows.iter().all(|x| x.kl == 0.0 && x.argmax_match));
        assert_eq!(r.argmax_rate, 1.0);
        assert_eq!(r.response_agreement(), 1.0);
        let root = r.rows.iter().find(|x| x.context.prefix.is_empty()).unwrap();
        assert_eq!(root.reach, 1.0);
    }

    #[test]
    fn single_perturbation_is_local() {
        let (a, _, qs) = pair(2);
        let mut b = a.clone();
        let ctx = ContextKey::new(&qs[1], &[1]);
        b.logits_mut(&ctx).unwrap()[0] += 0.5;
        let r = exhaustive_agreement(&b, &a, &qs, 1000).unwrap();
        let nonzero: Vec<_> = r.rows.iter().filter(|x| x.kl > 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0].context, ctx);
    }

    #[test]
    fn aggregate_is_mean_of_rows() {
        let (a, b, qs) = pair(3);
        let r = exhaustive_agreement(&a, &b, &qs, 1000).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for q in &qs {
            for ctx in b.reachable_contexts(q, 1000).unwrap() {
                let p = b.next_token_dist(&ctx, 1.0).unwrap().probs;
                let l = a.next_token_dist(&ctx, 1.0).unwrap().probs;
                total += dist_kl(&p, &l).unwrap();
                n += 1;
            }
        }
        assert_eq!(r.rows.len(), n);
        assert!((r.mean_kl - total / n as f64).abs() < 1e-12);
    }

    #[test]
    fn csv_has_one_line_per_context() {
        let (a, b, qs) = pair(4);
        let r = exhaustive_agreement(&a, &b, &qs, 1000).unwrap();
        let mut buf = Vec::new();
        write_agreement_csv(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), r.rows.len() + 1);
        assert!(text.starts_with("context,reach,kl,spearman,argmax_match"));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (a, _, qs) = pair(5);
        let c = TabularLM::new(Vocab::new(5).unwrap(), 1, 2);
        assert!(matches!(exhaustive_agreement(&a, &c, &qs, 1000), Err(OracleError::Shape(_))));
    }
}
