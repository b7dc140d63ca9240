//! Synthetic tasks whose conditional response distributions are known exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{VictimError, VictimModel};
use crate::lm::{ContextKey, LmError, TabularLM, Token, Vocab, DEFAULT_ENUMERATION_CAP};
use crate::seeding;

/// Logit assigned to tokens the task gives zero probability. `exp(-50)` is
/// far below every tolerance used for comparisons.
pub const FLOOR_LOGIT: f64 = -50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    /// The preferred response repeats the query.
    Copy,
    /// The preferred response is the query reversed.
    Reverse,
    /// A seeded random table maps each query to a response.
    MapLookup,
    /// A preferred and a single dispreferred response per query.
    NoisyPreference,
}

impl std::str::FromStr for TaskFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "map-lookup" => Ok(Self::MapLookup),
            "noisy-preference" => Ok(Self::NoisyPreference),
            other => Err(format!("unknown task family {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    /// Vocabulary size including the end token.
    pub vocab_size: usize,
    pub query_len: usize,
    pub response_len: usize,
    /// Mass of the preferred response. The remainder goes to the
    /// dispreferred response (noisy-preference) or is spread uniformly over
    /// every other response (all other families).
    #[serde(default = "one")]
    pub determinism: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl TaskSpec {
    pub fn new(family: TaskFamily, vocab_size: usize, query_len: usize, response_len: usize) -> Self {
        Self {
            family,
            vocab_size,
            query_len,
            response_len,
            determinism: 1.0,
            seed: 0,
        }
    }

    pub fn with_determinism(mut self, d: f64) -> Self {
        self.determinism = d;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn content(&self) -> usize {
        self.vocab_size - 1
    }

    /// Number of queries: every content string of length `query_len`.
    pub fn query_count(&self) -> u128 {
        (self.content() as u128).saturating_pow(self.query_len as u32)
    }

    /// Decision contexts over all queries: prefixes of length `< response_len`.
    pub fn context_count(&self) -> u128 {
        let c = self.content() as u128;
        let per_query: u128 = (0..self.response_len as u32)
            .map(|l| c.saturating_pow(l))
            .fold(0u128, |a, b| a.saturating_add(b));
        self.query_count().saturating_mul(per_query)
    }

    pub fn validate(&self) -> Result<(), VictimError> {
        Vocab::new(self.vocab_size)?;
        if self.query_len == 0 || self.response_len == 0 {
            return Err(VictimError::InvalidTask(
                "query_len and response_len must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.determinism) {
            return Err(VictimError::InvalidTask(format!(
                "determinism must lie in [0, 1], got {}",
                self.determinism
            )));
        }
        if matches!(self.family, TaskFamily::Copy | TaskFamily::Reverse)
            && self.response_len < self.query_len
        {
            return Err(VictimError::InvalidTask(format!(
                "{:?} needs response_len >= query_len",
                self.family
            )));
        }
        if self.family == TaskFamily::NoisyPreference
            && self.determinism < 1.0
            && (self.content() as u128).saturating_pow(self.response_len as u32) < 2
        {
            return Err(VictimError::InvalidTask(
                "noisy-preference needs at least two full-length responses".into(),
            ));
        }
        let count = self.context_count();
        if count > DEFAULT_ENUMERATION_CAP as u128 {
            return Err(LmError::EnumerationTooLarge {
                count,
                cap: DEFAULT_ENUMERATION_CAP,
            }
            .into());
        }
        Ok(())
    }
}

/// Where the non-preferred mass of a query goes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Remainder {
    /// Spread evenly over every response other than the preferred one.
    Uniform,
    /// Placed on a single alternative response.
    Single(Vec<Token>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QueryTruth {
    query: Vec<Token>,
    preferred: Vec<Token>,
    remainder: Remainder,
}

/// Exact conditional response distribution of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    spec: TaskSpec,
    entries: Vec<QueryTruth>,
}

impl GroundTruth {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn queries(&self) -> Vec<Vec<Token>> {
        self.entries.iter().map(|e| e.query.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn entry(&self, query: &[Token]) -> Option<&QueryTruth> {
        // Queries are generated in lexicographic order.
        self.entries
            .binary_search_by(|e| e.query.as_slice().cmp(query))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// The preferred (reference) response of `query`.
    pub fn reference(&self, query: &[Token]) -> Option<&[Token]> {
        self.entry(query).map(|e| e.preferred.as_slice())
    }

    /// The dispreferred response of a noisy-preference query.
    pub fn alternative(&self, query: &[Token]) -> Option<&[Token]> {
        match &self.entry(query)?.remainder {
            Remainder::Single(alt) => Some(alt),
            Remainder::Uniform => None,
        }
    }

    /// Total number of responses of length `0..=response_len`.
    fn response_space(&self) -> f64 {
        let c = (self.spec.vocab_size - 1) as f64;
        (0..=self.spec.response_len).map(|l| c.powi(l as i32)).sum()
    }

    /// Responses extending `prefix` (including `prefix` itself).
    fn extensions(&self, prefix_len: usize) -> f64 {
        let c = (self.spec.vocab_size - 1) as f64;
        (0..=self.spec.response_len - prefix_len)
            .map(|l| c.powi(l as i32))
            .sum()
    }

    /// Exact `P(response | query)`; zero for unknown queries.
    pub fn response_prob(&self, query: &[Token], response: &[Token]) -> f64 {
        let Some(e) = self.entry(query) else {
            return 0.0;
        };
        if response.len() > self.spec.response_len {
            return 0.0;
        }
        let d = self.spec.determinism;
        if response == e.preferred.as_slice() {
            return d;
        }
        match &e.remainder {
            Remainder::Single(alt) => {
                if response == alt.as_slice() {
                    1.0 - d
                } else {
                    0.0
                }
            }
            Remainder::Uniform => (1.0 - d) / (self.response_space() - 1.0),
        }
    }

    /// Probability that a response starts with `prefix`.
    fn prefix_mass(&self, e: &QueryTruth, prefix: &[Token]) -> f64 {
        let d = self.spec.determinism;
        let pref = if e.preferred.starts_with(prefix) { d } else { 0.0 };
        match &e.remainder {
            Remainder::Single(alt) => {
                pref + if alt.starts_with(prefix) { 1.0 - d } else { 0.0 }
            }
            Remainder::Uniform => {
                let mut n = self.extensions(prefix.len());
                if e.preferred.starts_with(prefix) {
                    n -= 1.0;
                }
                pref + (1.0 - d) * n / (self.response_space() - 1.0)
            }
        }
    }

    /// Exact next-token distribution at a context, `None` when the context
    /// has zero probability under the task.
    pub fn next_token_probs(&self, ctx: &ContextKey) -> Option<Vec<f64>> {
        let e = self.entry(&ctx.query)?;
        if ctx.prefix.len() >= self.spec.response_len {
            return None;
        }
        let total = self.prefix_mass(e, &ctx.prefix);
        if total <= 0.0 {
            return None;
        }
        let v = self.spec.vocab_size;
        let mut probs = vec![0.0; v];
        let mut ext = ctx.prefix.clone();
        for t in 0..(v - 1) as Token {
            ext.push(t);
            probs[t as usize] = self.prefix_mass(e, &ext) / total;
            ext.pop();
        }
        probs[v - 1] = self.response_prob(&ctx.query, &ctx.prefix) / total;
        Some(probs)
    }

    /// Support of `P(· | query)` as `(response, probability)` pairs.
    /// Under a uniform remainder this is the whole response space.
    pub fn distribution(&self, query: &[Token], cap: usize) -> Result<Vec<(Vec<Token>, f64)>, LmError> {
        let Some(e) = self.entry(query) else {
            return Ok(Vec::new());
        };
        let d = self.spec.determinism;
        match &e.remainder {
            Remainder::Single(alt) => {
                let mut out = vec![(e.preferred.clone(), d)];
                if d < 1.0 {
                    out.push((alt.clone(), 1.0 - d));
                }
                Ok(out)
            }
            Remainder::Uniform if d >= 1.0 => Ok(vec![(e.preferred.clone(), 1.0)]),
            Remainder::Uniform => {
                let n = self.response_space();
                if n > cap as f64 {
                    return Err(LmError::EnumerationTooLarge {
                        count: n as u128,
                        cap,
                    });
                }
                let mut out = Vec::new();
                let c = (self.spec.vocab_size - 1) as Token;
                for len in 0..=self.spec.response_len {
                    for_each_string(c, len, &mut |r| {
                        out.push((r.to_vec(), self.response_prob(query, r)));
                    });
                }
                Ok(out)
            }
        }
    }
}

/// Calls `f` on every string of length `len` over `0..alphabet`, in
/// lexicographic order.
fn for_each_string(alphabet: Token, len: usize, f: &mut dyn FnMut(&[Token])) {
    let mut cur = vec![0 as Token; len];
    loop {
        f(&cur);
        let mut i = len;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            cur[i] += 1;
            if cur[i] < alphabet {
                break;
            }
            cur[i] = 0;
        }
    }
}

fn random_string<R: Rng>(rng: &mut R, alphabet: Token, len: usize) -> Vec<Token> {
    (0..len).map(|_| rng.random_range(0..alphabet)).collect()
}

/// Builds the ground truth of a task and a victim whose logits realize it:
/// every reachable context gets `ln p` per token, with [`FLOOR_LOGIT`] for
/// zero-probability tokens. Unreachable contexts stay unmaterialized.
pub fn build_victim(spec: &TaskSpec) -> Result<(VictimModel, GroundTruth), VictimError> {
    spec.validate()?;
    let content = (spec.vocab_size - 1) as Token;
    let mut rng = seeding::rng(spec.seed, &[seeding::label("task")]);
    let mut queries = Vec::new();
    for_each_string(content, spec.query_len, &mut |q| queries.push(q.to_vec()));

    let mut entries = Vec::with_capacity(queries.len());
    for query in queries {
        let (preferred, remainder) = match spec.family {
            TaskFamily::Copy => (query.clone(), Remainder::Uniform),
            TaskFamily::Reverse => (query.iter().rev().copied().collect(), Remainder::Uniform),
            TaskFamily::MapLookup => (
                random_string(&mut rng, content, spec.response_len),
                Remainder::Uniform,
            ),
            TaskFamily::NoisyPreference => {
                let mut pool: Vec<Vec<Token>> = Vec::new();
                // Two distinct full-length responses; rejection sampling
                // terminates because validation guarantees at least two exist.
                let first = random_string(&mut rng, content, spec.response_len);
                pool.push(first.clone());
                let second = loop {
                    let cand = random_string(&mut rng, content, spec.response_len);
                    if cand != first {
                        break cand;
                    }
                    if (content as u128).pow(spec.response_len as u32) < 2 {
                        break cand;
                    }
                };
                pool.push(second);
                pool.shuffle(&mut rng);
                let alt = pool.pop().unwrap();
                (pool.pop().unwrap(), Remainder::Single(alt))
            }
        };
        entries.push(QueryTruth {
            query,
            preferred,
            remainder,
        });
    }
    let truth = GroundTruth {
        spec: spec.clone(),
        entries,
    };

    let vocab = Vocab::new(spec.vocab_size)?;
    let mut lm = TabularLM::new(vocab, spec.query_len, spec.response_len);
    for e in &truth.entries {
        for ctx in truth_contexts(&truth, e, spec.vocab_size) {
            let probs = truth
                .next_token_probs(&ctx)
                .expect("reachable context has positive mass");
            let row = probs
                .iter()
                .map(|&p| if p > 0.0 { p.ln() } else { FLOOR_LOGIT })
                .collect();
            lm.set_logits(&ctx, row)?;
        }
    }
    Ok((VictimModel::new(lm, spec.seed), truth))
}

/// Contexts of a query with positive prefix mass, found by depth-first search.
fn truth_contexts(truth: &GroundTruth, e: &QueryTruth, v: usize) -> Vec<ContextKey> {
    let mut out = Vec::new();
    let mut stack = vec![Vec::<Token>::new()];
    while let Some(prefix) = stack.pop() {
        if prefix.len() >= truth.spec.response_len || truth.prefix_mass(e, &prefix) <= 0.0 {
            continue;
        }
        for t in 0..(v - 1) as Token {
            let mut next = prefix.clone();
            next.push(t);
            stack.push(next);
        }
        out.push(ContextKey::new(&e.query, &prefix));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_argmax_is_query() {
        let spec = TaskSpec::new(TaskFamily::Copy, 4, 2, 2);
        let (v, truth) = build_victim(&spec).unwrap();
        assert_eq!(truth.len(), 9);
        for q in truth.queries() {
            assert_eq!(v.lm.greedy_response(&q).unwrap(), q);
        }
    }

    #[test]
    fn reverse_argmax_is_reversed_query() {
        let spec = TaskSpec::new(TaskFamily::Reverse, 4, 3, 3).with_determinism(0.7);
        let (v, truth) = build_victim(&spec).unwrap();
        for q in truth.queries() {
            let r: Vec<Token> = q.iter().rev().copied().collect();
            assert_eq!(v.lm.greedy_response(&q).unwrap(), r);
        }
    }

    #[test]
    fn noisy_preference_mass() {
        let spec = TaskSpec::new(TaskFamily::NoisyPreference, 4, 2, 2)
            .with_determinism(0.8)
            .with_seed(3);
        let (v, truth) = build_victim(&spec).unwrap();
        for q in truth.queries() {
            let pref = truth.reference(&q).unwrap();
            let alt = truth.alternative(&q).unwrap();
            assert_ne!(pref, alt);
            let p = v.lm.sequence_logprob(&q, pref).unwrap().exp();
            assert!((p - 0.8).abs() < 1e-9, "{p}");
            let pa = v.lm.sequence_logprob(&q, alt).unwrap().exp();
            assert!((pa - 0.2).abs() < 1e-9, "{pa}");
        }
    }

    #[test]
    fn victim_realizes_uniform_remainder() {
        let spec = TaskSpec::new(TaskFamily::MapLookup, 3, 1, 2)
            .with_determinism(0.6)
            .with_seed(8);
        let (v, truth) = build_victim(&spec).unwrap();
        for q in truth.queries() {
            let dist = truth.distribution(&q, 1000).unwrap();
            assert_eq!(dist.len(), 7);
            let total: f64 = dist.iter().map(|e| e.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
            for (r, p) in dist {
                let lp = v.lm.sequence_logprob(&q, &r).unwrap();
                assert!((lp.exp() - p).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_seed_same_logits() {
        let spec = TaskSpec::new(TaskFamily::MapLookup, 5, 2, 2).with_seed(11);
        let a = build_victim(&spec).unwrap().0;
        let b = build_victim(&spec).unwrap().0;
        assert_eq!(a.lm, b.lm);
        let c = build_victim(&spec.clone().with_seed(12)).unwrap().0;
        assert_ne!(a.lm, c.lm);
    }

    #[test]
    fn rejects_oversized_and_invalid_tasks() {
        let big = TaskSpec::new(TaskFamily::Copy, 30, 4, 4);
        assert!(matches!(
            build_victim(&big),
            Err(VictimError::Lm(LmError::EnumerationTooLarge { .. }))
        ));
        let bad = TaskSpec::new(TaskFamily::Copy, 4, 3, 2);
        assert!(matches!(build_victim(&bad), Err(VictimError::InvalidTask(_))));
        let bad = TaskSpec::new(TaskFamily::Copy, 4, 1, 1).with_determinism(1.2);
        assert!(build_victim(&bad).is_err());
    }

    #[test]
    fn family_serde_names() {
        let s = serde_json::to_string(&TaskFamily::NoisyPreference).unwrap();
        assert_eq!(s, "\"noisy-preference\"");
        assert_eq!("map-lookup".parse::<TaskFamily>().unwrap(), TaskFamily::MapLookup);
    }
}
