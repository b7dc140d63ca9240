//! Tabular autoregressive sequence model.
//!
//! A [`TabularLM`] stores one logit vector per conditioning context
//! `(query, response prefix)`. Contexts are materialized lazily: a context
//! that was never written reads as all-zero logits, i.e. the uniform
//! distribution. The last vocabulary id is reserved as the end-of-sequence
//! token; a response shorter than the response cap is terminated by an
//! explicit end step, a response that reaches the cap stops without one.
//! With that convention the responses of every query form a proper
//! distribution that [`TabularLM::enumerate_responses`] can list exactly.

mod gradient;
mod sampling;
mod stats;

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradient::Gradient;
pub(crate) use sampling::draw_nucleus;
pub use sampling::{nucleus, sample_sequence, SamplerConfig};
pub use stats::{dist_entropy, dist_kl, spearman_corr};

/// Token id. Ids are dense in `0..V`.
pub type Token = u32;

/// Default cap on the number of responses [`TabularLM::enumerate_responses`]
/// is willing to list.
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    #[error("vocabulary must hold at least 2 ids, got {0}")]
    VocabTooSmall(usize),
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    InvalidToken { token: Token, vocab: usize },
    #[error("unreachable context: {0}")]
    UnreachableContext(String),
    #[error("query of length {len} exceeds the query cap {cap}")]
    QueryTooLong { len: usize, cap: usize },
    #[error("response of length {len} exceeds the response cap {cap}")]
    ResponseTooLong { len: usize, cap: usize },
    #[error("end token may only terminate a response")]
    EmbeddedEndToken,
    #[error("enumeration of {count} responses exceeds the cap {cap}")]
    EnumerationTooLarge { count: u128, cap: usize },
    #[error("KL undefined: q[{index}] = 0 while p[{index}] > 0")]
    UndefinedKl { index: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("top_p must lie in (0, 1], got {0}")]
    BadTopP(f64),
    #[error("logit row for {context} has length {len}, expected {vocab}")]
    BadRow {
        context: String,
        len: usize,
        vocab: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self, LmError> {
        if size < 2 {
            return Err(LmError::VocabTooSmall(size));
        }
        Ok(Self { size, names: None })
    }

    pub fn with_names(names: Vec<String>) -> Result<Self, LmError> {
        let mut v = Self::new(names.len())?;
        v.names = Some(names);
        Ok(v)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// The reserved end-of-sequence id, always `V - 1`.
    pub fn end_token(&self) -> Token {
        (self.size - 1) as Token
    }

    /// Number of ids that can appear inside queries and responses.
    pub fn content_size(&self) -> usize {
        self.size - 1
    }

    pub fn name(&self, t: Token) -> Cow<'_, str> {
        match &self.names {
            Some(n) if (t as usize) < n.len() => Cow::Borrowed(n[t as usize].as_str()),
            _ if t == self.end_token() => Cow::Borrowed("</s>"),
            _ => Cow::Owned(t.to_string()),
        }
    }

    pub fn check(&self, t: Token) -> Result<(), LmError> {
        if (t as usize) < self.size {
            Ok(())
        } else {
            Err(LmError::InvalidToken {
                token: t,
                vocab: self.size,
            })
        }
    }
}

/// Conditioning context: the query together with the response prefix
/// generated so far.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContextKey {
    pub query: Vec<Token>,
    pub prefix: Vec<Token>,
}

impl ContextKey {
    pub fn new(query: &[Token], prefix: &[Token]) -> Self {
        Self {
            query: query.to_vec(),
            prefix: prefix.to_vec(),
        }
    }

    pub fn root(query: &[Token]) -> Self {
        Self::new(query, &[])
    }
}

impl std::fmt::Display for ContextKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let join = |v: &[Token]| {
            v.iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        write!(f, "[{}|{}]", join(&self.query), join(&self.prefix))
    }
}

/// Normalized next-token distribution over the whole vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextTokenDist {
    pub probs: Vec<f64>,
}

impl NextTokenDist {
    pub fn from_logits(logits: &[f64], temperature: f64) -> Self {
        Self {
            probs: softmax_t(logits, temperature),
        }
    }

    pub fn argmax(&self) -> Token {
        argmax(&self.probs) as Token
    }

    /// The `k` most likely tokens, probability descending, ties by id.
    pub fn top_k(&self, k: usize) -> Vec<(Token, f64)> {
        let mut order = sorted_desc(&self.probs);
        order.truncate(k);
        order
    }
}

impl std::ops::Deref for NextTokenDist {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.probs
    }
}

/// One scored decision along a response: the context and the emitted token.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub context: ContextKey,
    pub token: Token,
}

/// Serialized form of a model checkpoint.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    vocab: Vocab,
    max_query_len: usize,
    max_response_len: usize,
    contexts: Vec<CheckpointRow>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRow {
    query: Vec<Token>,
    prefix: Vec<Token>,
    logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct TabularLM {
    vocab: Vocab,
    max_query_len: usize,
    max_response_len: usize,
    logits: BTreeMap<ContextKey, Vec<f64>>,
}

impl TryFrom<Checkpoint> for TabularLM {
    type Error = LmError;
    fn try_from(c: Checkpoint) -> Result<Self, LmError> {
        let mut lm = TabularLM::new(c.vocab, c.max_query_len, c.max_response_len);
        for row in c.contexts {
            let key = ContextKey {
                query: row.query,
                prefix: row.prefix,
            };
            lm.set_logits(&key, row.logits)?;
        }
        Ok(lm)
    }
}

impl From<TabularLM> for Checkpoint {
    fn from(lm: TabularLM) -> Self {
        Checkpoint {
            vocab: lm.vocab,
            max_query_len: lm.max_query_len,
            max_response_len: lm.max_response_len,
            contexts: lm
                .logits
                .into_iter()
                .map(|(k, logits)| CheckpointRow {
                    query: k.query,
                    prefix: k.prefix,
                    logits,
                })
                .collect(),
        }
    }
}

impl TabularLM {
    pub fn new(vocab: Vocab, max_query_len: usize, max_response_len: usize) -> Self {
        Self {
            vocab,
            max_query_len,
            max_response_len,
            logits: BTreeMap::new(),
        }
    }

    /// A model whose reachable contexts under `queries` carry i.i.d.
    /// `N(0, scale^2)`-like logits (sum of uniforms), reproducible from `seed`.
    pub fn randomized(
        vocab: Vocab,
        max_query_len: usize,
        max_response_len: usize,
        queries: &[Vec<Token>],
        scale: f64,
        seed: u64,
    ) -> Result<Self, LmError> {
        let mut lm = Self::new(vocab, max_query_len, max_response_len);
        let mut rng = crate::seeding::rng(seed, &[crate::seeding::label("init")]);
        let v = lm.vocab.size();
        for q in queries {
            for ctx in lm.reachable_contexts(q, DEFAULT_ENUMERATION_CAP)? {
                let row: Vec<f64> = (0..v)
                    .map(|_| {
                        // Irwin-Hall(4) centred and scaled to unit variance.
                        let s: f64 = (0..4).map(|_| rng.random::<f64>()).sum();
                        (s - 2.0) * 3f64.sqrt() * scale
                    })
                    .collect();
                lm.set_logits(&ctx, row)?;
            }
        }
        Ok(lm)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn end_token(&self) -> Token {
        self.vocab.end_token()
    }

    pub fn max_query_len(&self) -> usize {
        self.max_query_len
    }

    pub fn max_response_len(&self) -> usize {
        self.max_response_len
    }

    /// Materialized contexts in key order.
    pub fn contexts(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.logits.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn materialized_len(&self) -> usize {
        self.logits.len()
    }

    pub fn check_query(&self, query: &[Token]) -> Result<(), LmError> {
        if query.len() > self.max_query_len {
            return Err(LmError::QueryTooLong {
                len: query.len(),
                cap: self.max_query_len,
            });
        }
        for &t in query {
            self.vocab.check(t)?;
            if t == self.end_token() {
                return Err(LmError::EmbeddedEndToken);
            }
        }
        Ok(())
    }

    /// Strips an optional trailing end token and validates the response.
    pub fn normalize_response<'a>(&self, response: &'a [Token]) -> Result<&'a [Token], LmError> {
        let body = match response.split_last() {
            Some((&last, rest)) if last == self.end_token() => rest,
            _ => response,
        };
        for &t in body {
            self.vocab.check(t)?;
            if t == self.end_token() {
                return Err(LmError::EmbeddedEndToken);
            }
        }
        if body.len() > self.max_response_len {
            return Err(LmError::ResponseTooLong {
                len: body.len(),
                cap: self.max_response_len,
            });
        }
        Ok(body)
    }

    pub fn check_context(&self, ctx: &ContextKey) -> Result<(), LmError> {
        let unreachable = || LmError::UnreachableContext(ctx.to_string());
        self.check_query(&ctx.query).map_err(|_| unreachable())?;
        if ctx.prefix.len() >= self.max_response_len {
            return Err(unreachable());
        }
        if ctx
            .prefix
            .iter()
            .any(|&t| t as usize >= self.vocab.content_size())
        {
            return Err(unreachable());
        }
        Ok(())
    }

    /// Stored logits of a reachable context; untouched contexts read as zeros.
    pub fn logits(&self, ctx: &ContextKey) -> Result<Cow<'_, [f64]>, LmError> {
        self.check_context(ctx)?;
        Ok(match self.logits.get(ctx) {
            Some(row) => Cow::Borrowed(row.as_slice()),
            None => Cow::Owned(vec![0.0; self.vocab.size()]),
        })
    }

    /// Mutable logits, materializing the context with zeros on first touch.
    pub fn logits_mut(&mut self, ctx: &ContextKey) -> Result<&mut Vec<f64>, LmError> {
        self.check_context(ctx)?;
        let v = self.vocab.size();
        Ok(self
            .logits
            .entry(ctx.clone())
            .or_insert_with(|| vec![0.0; v]))
    }

    pub fn set_logits(&mut self, ctx: &ContextKey, row: Vec<f64>) -> Result<(), LmError> {
        if row.len() != self.vocab.size() {
            return Err(LmError::BadRow {
                context: ctx.to_string(),
                len: row.len(),
                vocab: self.vocab.size(),
            });
        }
        *self.logits_mut(ctx)? = row;
        Ok(())
    }

    pub fn next_token_dist(
        &self,
        ctx: &ContextKey,
        temperature: f64,
    ) -> Result<NextTokenDist, LmError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(LmError::BadTemperature(temperature));
        }
        let logits = self.logits(ctx)?;
        Ok(NextTokenDist::from_logits(&logits, temperature))
    }

    /// Log-probabilities of the next token at temperature 1.
    pub fn next_token_logprobs(&self, ctx: &ContextKey) -> Result<Vec<f64>, LmError> {
        Ok(log_softmax(&self.logits(ctx)?))
    }

    /// The scored decisions of `response` given `query`, including the
    /// terminating end step when the response is shorter than the cap.
    pub fn steps(&self, query: &[Token], response: &[Token]) -> Result<Vec<Step>, LmError> {
        self.check_query(query)?;
        let body = self.normalize_response(response)?;
        let mut steps = Vec::with_capacity(body.len() + 1);
        for j in 0..body.len() {
            steps.push(Step {
                context: ContextKey::new(query, &body[..j]),
                token: body[j],
            });
        }
        if body.len() < self.max_response_len {
            steps.push(Step {
                context: ContextKey::new(query, body),
                token: self.end_token(),
            });
        }
        Ok(steps)
    }

    /// `log P(response | query)` at temperature 1.
    pub fn sequence_logprob(&self, query: &[Token], response: &[Token]) -> Result<f64, LmError> {
        let mut total = 0.0;
        for step in self.steps(query, response)? {
            let logits = self.logits(&step.context)?;
            total += log_softmax_at(&logits, step.token as usize);
        }
        Ok(total)
    }

    /// Samples one response with temperature and nucleus filtering.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        query: &[Token],
        cfg: &SamplerConfig,
        rng: &mut R,
    ) -> Result<Vec<Token>, LmError> {
        self.check_query(query)?;
        cfg.validate()?;
        let mut out = Vec::new();
        while out.len() < self.max_response_len {
            let dist = self.next_token_dist(&ContextKey::new(query, &out), cfg.temperature)?;
            let t = sampling::draw_nucleus(&dist.probs, cfg.top_p, rng);
            if t == self.end_token() {
                break;
            }
            out.push(t);
        }
        Ok(out)
    }

    /// Greedy (argmax) decoding; ties resolve to the lowest id.
    pub fn greedy_response(&self, query: &[Token]) -> Result<Vec<Token>, LmError> {
        self.check_query(query)?;
        let mut out = Vec::new();
        while out.len() < self.max_response_len {
            let t = self.next_token_dist(&ContextKey::new(query, &out), 1.0)?.argmax();
            if t == self.end_token() {
                break;
            }
            out.push(t);
        }
        Ok(out)
    }

    /// Number of distinct terminated responses per query.
    pub fn response_count(&self) -> u128 {
        let c = self.vocab.content_size() as u128;
        (0..=self.max_response_len as u32)
            .map(|j| c.saturating_pow(j))
            .fold(0u128, |a, b| a.saturating_add(b))
    }

    /// Every terminated response with its exact probability, in
    /// depth-first (lexicographic, shorter first) order.
    pub fn enumerate_responses(
        &self,
        query: &[Token],
        cap: usize,
    ) -> Result<Vec<(Vec<Token>, f64)>, LmError> {
        self.check_query(query)?;
        let count = self.response_count();
        if count > cap as u128 {
            return Err(LmError::EnumerationTooLarge { count, cap });
        }
        let mut out = Vec::with_capacity(count as usize);
        let mut prefix = Vec::new();
        self.enumerate_into(query, &mut prefix, 0.0, &mut out)?;
        Ok(out)
    }

    fn enumerate_into(
        &self,
        query: &[Token],
        prefix: &mut Vec<Token>,
        logp: f64,
        out: &mut Vec<(Vec<Token>, f64)>,
    ) -> Result<(), LmError> {
        if prefix.len() == self.max_response_len {
            out.push((prefix.clone(), logp.exp()));
            return Ok(());
        }
        let lp = self.next_token_logprobs(&ContextKey::new(query, prefix))?;
        out.push((prefix.clone(), (logp + lp[self.end_token() as usize]).exp()));
        for t in 0..self.vocab.content_size() {
            prefix.push(t as Token);
            self.enumerate_into(query, prefix, logp + lp[t], out)?;
            prefix.pop();
        }
        Ok(())
    }

    /// All reachable contexts below `query`: the root and every content prefix
    /// shorter than the response cap.
    pub fn reachable_contexts(&self, query: &[Token], cap: usize) -> Result<Vec<ContextKey>, LmError> {
        self.check_query(query)?;
        let c = self.vocab.content_size() as u128;
        let count = (0..self.max_response_len as u32)
            .map(|j| c.saturating_pow(j))
            .fold(0u128, |a, b| a.saturating_add(b));
        if count > cap as u128 {
            return Err(LmError::EnumerationTooLarge { count, cap });
        }
        let mut out = Vec::with_capacity(count as usize);
        let mut frontier = vec![Vec::<Token>::new()];
        while let Some(prefix) = frontier.pop() {
            if prefix.len() + 1 < self.max_response_len {
                for t in (0..self.vocab.content_size()).rev() {
                    let mut p = prefix.clone();
                    p.push(t as Token);
                    frontier.push(p);
                }
            }
            out.push(ContextKey::new(query, &prefix));
        }
        Ok(out)
    }

    /// `θ ← θ - lr * grad`, materializing touched contexts.
    pub fn apply_gradient(&mut self, grad: &Gradient, lr: f64) -> Result<(), LmError> {
        if lr == 0.0 {
            return Ok(());
        }
        for (ctx, g) in grad.iter() {
            let row = self.logits_mut(ctx)?;
            for (z, d) in row.iter_mut().zip(g) {
                *z -= lr * d;
            }
        }
        Ok(())
    }
}

/// Softmax of `logits / temperature`.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    softmax_t(logits, 1.0)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| z - lse).collect()
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    logits[k] - log_sum_exp(logits)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Indices sorted by value descending, ties broken by ascending id.
pub(crate) fn sorted_desc(probs: &[f64]) -> Vec<(Token, f64)> {
    let mut v: Vec<(Token, f64)> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| (i as Token, p))
        .collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lm(v: usize, nq: usize, nr: usize) -> TabularLM {
        TabularLM::new(Vocab::new(v).unwrap(), nq, nr)
    }

    #[test]
    fn softmax_examples() {
        let d = NextTokenDist::from_logits(&[0.0, 0.0], 1.0);
        assert_eq!(d.probs, vec![0.5, 0.5]);
        let d = NextTokenDist::from_logits(&[3f64.ln(), 0.0], 1.0);
        assert!((d.probs[0] - 0.75).abs() < 1e-15);
        assert!((d.probs[1] - 0.25).abs() < 1e-15);
        let a = NextTokenDist::from_logits(&[2.0, 0.0], 2.0);
        let b = NextTokenDist::from_logits(&[1.0, 0.0], 1.0);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_context_is_unreachable() {
        let m = lm(3, 1, 2);
        let deep = ContextKey::new(&[0], &[0, 1]);
        assert!(matches!(
            m.next_token_dist(&deep, 1.0),
            Err(LmError::UnreachableContext(_))
        ));
        let with_end = ContextKey::new(&[0], &[2]);
        assert!(matches!(
            m.next_token_dist(&with_end, 1.0),
            Err(LmError::UnreachableContext(_))
        ));
        assert!(m.next_token_dist(&ContextKey::root(&[1]), 1.0).is_ok());
    }

    #[test]
    fn bad_temperature_rejected() {
        let m = lm(3, 1, 1);
        assert!(matches!(
            m.next_token_dist(&ContextKey::root(&[0]), 0.0),
            Err(LmError::BadTemperature(_))
        ));
    }

    #[test]
    fn uniform_logprob_is_product() {
        let m = lm(4, 1, 3);
        // two content tokens plus the end step
        let lp = m.sequence_logprob(&[0], &[1, 2]).unwrap();
        assert!((lp - 3.0 * (0.25f64).ln()).abs() < 1e-12);
        // explicit trailing end token is the same response
        assert_eq!(lp, m.sequence_logprob(&[0], &[1, 2, 3]).unwrap());
    }

    #[test]
    fn certain_empty_response_has_zero_logprob() {
        let mut m = lm(3, 1, 2);
        m.set_logits(&ContextKey::root(&[0]), vec![-1e6, -1e6, 0.0])
            .unwrap();
        assert_eq!(m.sequence_logprob(&[0], &[]).unwrap(), 0.0);
    }

    #[test]
    fn invalid_tokens_rejected() {
        let m = lm(3, 1, 2);
        assert!(matches!(
            m.sequence_logprob(&[0], &[7]),
            Err(LmError::InvalidToken { .. })
        ));
        assert!(matches!(
            m.sequence_logprob(&[0], &[2, 0]),
            Err(LmError::EmbeddedEndToken)
        ));
        assert!(matches!(
            m.sequence_logprob(&[0, 0], &[]),
            Err(LmError::QueryTooLong { .. })
        ));
        assert!(matches!(
            m.sequence_logprob(&[0], &[0, 0, 0]),
            Err(LmError::ResponseTooLong { .. })
        ));
    }

    #[test]
    fn enumeration_small_cases() {
        let m = lm(2, 1, 1);
        let all = m.enumerate_responses(&[0], 10).unwrap();
        assert!(all.len() <= 3);
        let mass: f64 = all.iter().map(|(_, p)| p).sum();
        assert!((mass - 1.0).abs() < 1e-12);

        let mut det = lm(3, 1, 2);
        det.set_logits(&ContextKey::root(&[0]), vec![100.0, 0.0, 0.0])
            .unwrap();
        det.set_logits(&ContextKey::new(&[0], &[0]), vec![0.0, 100.0, 0.0])
            .unwrap();
        let all = det.enumerate_responses(&[0], 100).unwrap();
        let top: Vec<_> = all.iter().filter(|(_, p)| *p > 1e-12).collect();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].0, vec![0, 1]);
        assert!((top[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_cap() {
        let m = lm(5, 1, 10);
        assert!(matches!(
            m.enumerate_responses(&[0], 1000),
            Err(LmError::EnumerationTooLarge { .. })
        ));
    }

    #[test]
    fn random_model_enumeration_sums_to_one_and_matches_logprob() {
        let queries = vec![vec![0], vec![1]];
        let m = TabularLM::randomized(Vocab::new(3).unwrap(), 1, 2, &queries, 1.5, 11).unwrap();
        for q in &queries {
            let all = m.enumerate_responses(q, DEFAULT_ENUMERATION_CAP).unwrap();
            assert_eq!(all.len() as u128, m.response_count());
            let mass: f64 = all.iter().map(|(_, p)| p).sum();
            assert!((mass - 1.0).abs() < 1e-6);
            for (y, p) in &all {
                let lp = m.sequence_logprob(q, y).unwrap();
                assert!((lp - p.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stepwise_logprob_oracle() {
        let queries = vec![vec![2, 0]];
        let m = TabularLM::randomized(Vocab::new(4).unwrap(), 2, 3, &queries, 2.0, 5).unwrap();
        let y = vec![1, 0];
        let mut oracle = 0.0;
        let mut prefix: Vec<Token> = vec![];
        for &t in y.iter().chain(std::iter::once(&3)) {
            let d = m
                .next_token_dist(&ContextKey::new(&queries[0], &prefix), 1.0)
                .unwrap();
            oracle += d.probs[t as usize].ln();
            prefix.push(t);
        }
        assert!((m.sequence_logprob(&queries[0], &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn reachable_contexts_count() {
        let m = lm(4, 1, 3);
        let ctxs = m.reachable_contexts(&[0], 1000).unwrap();
        assert_eq!(ctxs.len(), 1 + 3 + 9);
        assert_eq!(ctxs[0], ContextKey::root(&[0]));
        for c in &ctxs {
            m.check_context(c).unwrap();
        }
    }

    #[test]
    fn greedy_and_sampling_on_deterministic_model() {
        let mut m = lm(3, 1, 2);
        m.set_logits(&ContextKey::root(&[1]), vec![0.0, 60.0, 0.0])
            .unwrap();
        m.set_logits(&ContextKey::new(&[1], &[1]), vec![60.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(m.greedy_response(&[1]).unwrap(), vec![1, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SamplerConfig::new(1.0, 1.0, 0);
        for _ in 0..20 {
            assert_eq!(m.sample(&[1], &cfg, &mut rng).unwrap(), vec![1, 0]);
        }
    }

    #[test]
    fn checkpoint_json_round_trip() {
        let queries = vec![vec![0], vec![1]];
        let m = TabularLM::randomized(Vocab::new(3).unwrap(), 1, 2, &queries, 1.0, 3).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"contexts\""));
        let back: TabularLM = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn apply_gradient_materializes() {
        let mut m = lm(3, 1, 1);
        let mut g = Gradient::default();
        g.add_row(&ContextKey::root(&[0]), &[1.0, -1.0, 0.0], 1.0);
        m.apply_gradient(&g, 0.5).unwrap();
        assert_eq!(m.materialized_len(), 1);
        assert_eq!(
            m.logits(&ContextKey::root(&[0])).unwrap().as_ref(),
            &[-0.5, 0.5, 0.0]
        );
    }
}
