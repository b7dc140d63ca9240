//! Ground-truth victims and the query surfaces an attacker sees.
//!
//! A [`VictimModel`] is a [`TabularLM`] built from a synthetic [`TaskSpec`],
//! optionally wrapped with a green-list watermark. Attackers reach it through
//! the [`VictimOracle`] trait, implemented in-process by [`VictimSession`],
//! over a line-delimited JSON socket by [`RemoteVictim`], and against a
//! chat-completions HTTP endpoint by [`openai::OpenAiAdapter`].

pub mod openai;
mod server;
mod task;
mod watermark;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{ContextKey, LmError, SamplerConfig, TabularLM, Token};
use crate::seeding;

pub use server::{
    decode_request, encode_response, serve, RemoteVictim, ServerHandle, WireRequest, WireResponse,
};
pub use task::{build_victim, GroundTruth, TaskFamily, TaskSpec, FLOOR_LOGIT};
pub use watermark::{green_set, WatermarkKey, WatermarkTrace, MIN_GREEN_MASS};

/// Grey-box responses never expose more than this many candidates per step.
pub const MAX_TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum VictimError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("victim reported an error: {0}")]
    Remote(String),
}

/// Black-box access returns text only; grey-box adds per-step top-k
/// probabilities and the sequence log-probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AccessMode {
    #[default]
    Black,
    Grey,
}

impl std::str::FromStr for AccessMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "black" => Ok(Self::Black),
            "grey" | "gray" => Ok(Self::Grey),
            other => Err(format!("unknown access mode {other:?}")),
        }
    }
}

/// One victim interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: Vec<Token>,
    pub response: Vec<Token>,
    /// Per-step top-k `(token, probability)` lists, present iff grey-box.
    #[serde(default)]
    pub topk: Option<Vec<Vec<(Token, f64)>>>,
    /// Victim `log P(response | query)`, present iff grey-box.
    #[serde(default)]
    pub logprob: Option<f64>,
}

impl QueryRecord {
    pub fn mode(&self) -> AccessMode {
        if self.topk.is_some() {
            AccessMode::Grey
        } else {
            AccessMode::Black
        }
    }
}

/// Anything that answers queries the way a victim API does.
pub trait VictimOracle {
    fn query(&mut self, query: &[Token], mode: AccessMode) -> Result<QueryRecord, VictimError>;
}

impl<T: VictimOracle + ?Sized> VictimOracle for &mut T {
    fn query(&mut self, query: &[Token], mode: AccessMode) -> Result<QueryRecord, VictimError> {
        (**self).query(query, mode)
    }
}

impl<T: VictimOracle + ?Sized> VictimOracle for Box<T> {
    fn query(&mut self, query: &[Token], mode: AccessMode) -> Result<QueryRecord, VictimError> {
        (**self).query(query, mode)
    }
}

/// Wraps an oracle and counts the queries that reach it.
pub struct CountingOracle<O> {
    inner: O,
    count: usize,
}

impl<O: VictimOracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self { inner, count: 0 }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn into_inner(self) -> O {
        self.inner
    }
}

impl<O: VictimOracle> VictimOracle for CountingOracle<O> {
    fn query(&mut self, query: &[Token], mode: AccessMode) -> Result<QueryRecord, VictimError> {
        self.count += 1;
        self.inner.query(query, mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimModel {
    pub lm: TabularLM,
    #[serde(default)]
    pub watermark: Option<WatermarkKey>,
    #[serde(default)]
    pub default_mode: AccessMode,
    pub sampler: SamplerConfig,
}

/// Persisted victim definition; the model itself is rebuilt from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimDefinition {
    pub spec: TaskSpec,
    pub seed: u64,
    #[serde(default)]
    pub watermark: Option<WatermarkKey>,
}

impl VictimDefinition {
    pub fn build(&self) -> Result<(VictimModel, GroundTruth), VictimError> {
        let (mut victim, truth) = build_victim(&self.spec)?;
        victim.sampler.seed = self.seed;
        if let Some(key) = &self.watermark {
            key.validate(victim.lm.vocab_size())
                .map_err(VictimError::InvalidTask)?;
        }
        victim.watermark = self.watermark.clone();
        Ok((victim, truth))
    }
}

impl VictimModel {
    pub fn new(lm: TabularLM, seed: u64) -> Self {
        Self {
            lm,
            watermark: None,
            default_mode: AccessMode::Black,
            sampler: SamplerConfig::victim(seed),
        }
    }

    pub fn with_watermark(mut self, key: WatermarkKey) -> Self {
        self.watermark = Some(key);
        self
    }

    /// Generator for an independent query session.
    pub fn session_rng(&self, session: u64) -> ChaCha8Rng {
        seeding::rng(self.sampler.seed, &[seeding::label("session"), session])
    }

    pub fn session(&self, session: u64) -> VictimSession<'_> {
        VictimSession {
            victim: self,
            rng: self.session_rng(session),
        }
    }

    /// Samples a response, applying the watermark when one is configured.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        query: &[Token],
        rng: &mut R,
    ) -> Result<Vec<Token>, VictimError> {
        match &self.watermark {
            Some(key) => Ok(self.watermarked_sample(key, query, rng)?.0),
            None => Ok(self.lm.sample(query, &self.sampler, rng)?),
        }
    }

    /// Watermarked generation. Each step flips a `Bernoulli(δ)` coin; on
    /// heads the distribution is restricted to the green set plus the end
    /// token and renormalized, falling back to the unrestricted distribution
    /// when that set carries (numerically) no mass.
    pub fn watermarked_sample<R: Rng + ?Sized>(
        &self,
        key: &WatermarkKey,
        query: &[Token],
        rng: &mut R,
    ) -> Result<(Vec<Token>, WatermarkTrace), VictimError> {
        self.lm.check_query(query)?;
        let end = self.lm.end_token();
        let mut out: Vec<Token> = Vec::new();
        let mut trace = WatermarkTrace::default();
        while out.len() < self.lm.max_response_len() {
            let prev = out.last().copied().unwrap_or(end);
            let enforce = rng.random::<f64>() < key.enforce_prob;
            let dist = self.lm.next_token_dist(
                &ContextKey::new(query, &out),
                self.sampler.temperature,
            )?;
            let (probs, fell_back) = key.step_distribution(&dist.probs, prev, end, enforce);
            let chosen = crate::lm::draw_nucleus(&probs, self.sampler.top_p, rng);
            if chosen == end {
                break;
            }
            trace.steps += 1;
            if enforce {
                trace.enforced += 1;
            }
            if fell_back {
                trace.fallbacks += 1;
            }
            out.push(chosen);
        }
        Ok((out, trace))
    }

    /// Answers one query: samples a response and, in grey mode, attaches
    /// per-step top-k probabilities and the response log-probability.
    pub fn query_with<R: Rng + ?Sized>(
        &self,
        query: &[Token],
        mode: AccessMode,
        rng: &mut R,
    ) -> Result<QueryRecord, VictimError> {
        self.lm.check_query(query)?;
        let response = self.generate(query, rng)?;
        let (topk, logprob) = match mode {
            AccessMode::Black => (None, None),
            AccessMode::Grey => {
                let k = MAX_TOP_K.min(self.lm.vocab_size());
                let mut lists = Vec::new();
                for step in self.lm.steps(query, &response)? {
                    lists.push(self.lm.next_token_dist(&step.context, 1.0)?.top_k(k));
                }
                (Some(lists), Some(self.lm.sequence_logprob(query, &response)?))
            }
        };
        Ok(QueryRecord {
            query: query.to_vec(),
            response,
            topk,
            logprob,
        })
    }
}

/// In-process query session with its own generator stream.
pub struct VictimSession<'a> {
    victim: &'a VictimModel,
    rng: ChaCha8Rng,
}

impl VictimOracle for VictimSession<'_> {
    fn query(&mut self, query: &[Token], mode: AccessMode) -> Result<QueryRecord, VictimError> {
        self.victim.query_with(query, mode, &mut self.rng)
    }
}
