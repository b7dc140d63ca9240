//! Adapter for chat-completions style HTTP endpoints.
//!
//! Remote models have their own tokenizers, so queries and responses are
//! mapped onto a byte-level vocabulary: ids `0..=255` are bytes and
//! [`BYTE_END_TOKEN`] terminates. Per-step probabilities come from the
//! endpoint's `top_logprobs`, one step per returned API token, each
//! candidate keyed by its first byte.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AccessMode, QueryRecord, VictimError, VictimOracle, MAX_TOP_K};
use crate::lm::Token;

pub const BYTE_VOCAB_SIZE: usize = 257;
pub const BYTE_END_TOKEN: Token = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAiConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Prompt with a `{query}` placeholder for the decoded query bytes.
    #[serde(default = "default_template")]
    pub prompt_template: String,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    /// First retry delay; doubles on each further attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_template() -> String {
    "{query}".into()
}

fn default_attempts() -> u32 {
    3
}

fn default_backoff() -> u64 {
    500
}

impl OpenAiConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            temperature: default_temperature(),
            prompt_template: default_template(),
            max_attempts: default_attempts(),
            backoff_ms: default_backoff(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Minimal blocking JSON POST, so tests can substitute canned responses.
pub trait HttpTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpResponse, String>;
}

/// Encodes text as byte tokens.
pub fn encode_bytes(text: &str) -> Vec<Token> {
    text.bytes().map(Token::from).collect()
}

/// Decodes byte tokens, replacing invalid UTF-8 and dropping non-byte ids.
pub fn decode_bytes(tokens: &[Token]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn build_request(cfg: &OpenAiConfig, query: &[Token], mode: AccessMode) -> Value {
    let prompt = cfg.prompt_template.replace("{query}", &decode_bytes(query));
    let mut body = json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": cfg.temperature,
    });
    if mode == AccessMode::Grey {
        body["logprobs"] = json!(true);
        body["top_logprobs"] = json!(MAX_TOP_K);
    }
    body
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    bytes: Option<Vec<u8>>,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    bytes: Option<Vec<u8>>,
}

fn first_byte(token: &str, bytes: &Option<Vec<u8>>) -> Token {
    bytes
        .as_ref()
        .and_then(|b| b.first().copied())
        .or_else(|| token.bytes().next())
        .map(Token::from)
        .unwrap_or(BYTE_END_TOKEN)
}

/// Maps a completion body onto a record. Without a `logprobs` block the
/// record is black-box regardless of the requested mode.
pub fn parse_response(query: &[Token], body: &str) -> Result<QueryRecord, VictimError> {
    let completion: Completion =
        serde_json::from_str(body).map_err(|e| VictimError::Protocol(e.to_string()))?;
    let choice = completion
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| VictimError::Protocol("completion has no choices".into()))?;
    let content = choice.message.content.unwrap_or_default();
    let steps = choice.logprobs.and_then(|l| l.content);
    let (topk, logprob) = match steps {
        None => (None, None),
        Some(steps) => {
            let mut lists = Vec::with_capacity(steps.len());
            let mut total = 0.0;
            for step in &steps {
                total += step.logprob;
                let mut list: Vec<(Token, f64)> = Vec::new();
                for cand in &step.top_logprobs {
                    let t = first_byte(&cand.token, &cand.bytes);
                    let p = cand.logprob.exp();
                    match list.iter_mut().find(|e| e.0 == t) {
                        Some(e) => e.1 += p,
                        None => list.push((t, p)),
                    }
                }
                if list.is_empty() {
                    list.push((first_byte(&step.token, &step.bytes), step.logprob.exp()));
                }
                list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                list.truncate(MAX_TOP_K);
                lists.push(list);
            }
            (Some(lists), Some(total))
        }
    };
    Ok(QueryRecord {
        query: query.to_vec(),
        response: encode_bytes(&content),
        topk,
        logprob,
    })
}

/// Victim oracle backed by an HTTP endpoint, retrying failed calls with
/// exponential backoff.
pub struct OpenAiAdapter<T> {
    config: OpenAiConfig,
    transport: T,
}

impl<T: HttpTransport> OpenAiAdapter<T> {
    pub fn new(config: OpenAiConfig, transport: T) -> Self {
        Self { config, transport }
    }

    pub fn config(&self) -> &OpenAiConfig {
        &self.config
    }

    fn headers(&self) -> Vec<(String, String)> {
        let mut h = vec![("Content-Type".to_string(), "application/json".to_string())];
        if let Some(key) = &self.config.api_key {
            h.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        h
    }

    fn post_with_retry(&self, body: &Value) -> Result<String, VictimError> {
        let headers = self.headers();
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.transport.post_json(&self.config.endpoint, &headers, body) {
                Ok(r) if (200..300).contains(&r.status) => return Ok(r.body),
                Ok(r) => last = format!("HTTP {}: {}", r.status, r.body),
                Err(e) => last = e,
            }
            log::warn!("attempt {} of {attempts} failed: {last}", attempt + 1);
        }
        Err(VictimError::Transport(format!(
            "{attempts} attempts failed, last: {last}"
        )))
    }
}

impl<T: HttpTransport> VictimOracle for OpenAiAdapter<T> {
    fn query(&mut self, query: &[Token], mode: AccessMode) -> Result<QueryRecord, VictimError> {
        let body = build_request(&self.config, query, mode);
        let text = self.post_with_retry(&body)?;
        let mut rec = parse_response(query, &text)?;
        if mode == AccessMode::Black {
            rec.topk = None;
            rec.logprob = None;
        }
        Ok(rec)
    }
}

#[cfg(feature = "openai")]
pub use http::ReqwestTransport;

#[cfg(feature = "openai")]
mod http {
    use super::{HttpResponse, HttpTransport};
    use serde_json::Value;

    /// Blocking transport over `reqwest`.
    pub struct ReqwestTransport {
        client: reqwest::blocking::Client,
    }

    impl ReqwestTransport {
        pub fn new(timeout: std::time::Duration) -> Result<Self, String> {
            let client = reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .map_err(|e| e.to_string())?;
            Ok(Self { client })
        }
    }

    impl HttpTransport for ReqwestTransport {
        fn post_json(
            &self,
            url: &str,
            headers: &[(String, String)],
            body: &Value,
        ) -> Result<HttpResponse, String> {
            let mut req = self.client.post(url).body(body.to_string());
            for (k, v) in headers {
                req = req.header(k.as_str(), v.as_str());
            }
            let resp = req.send().map_err(|e| e.to_string())?;
            let status = resp.status().as_u16();
            let body = resp.text().map_err(|e| e.to_string())?;
            Ok(HttpResponse { status, body })
        }
    }
}
