//! Judge and rewrite clients for a chat-completion endpoint.
//!
//! Verdicts and rewrites are for analysis only; they never feed the training
//! reward. Every attempt is kept in an audit log.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::dialogue::Turn;
use crate::env::render_context_block;

pub const JUDGE_PROMPT: &str = include_str!("../assets/judge_prompt.txt");
pub const REWRITE_PROMPT: &str = include_str!("../assets/rewrite_prompt.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("network: {0}")]
    Network(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
}

impl TransportError {
    pub fn is_retriable(&self) -> bool {
        match self {
            TransportError::Network(_) => true,
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("request failed after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: TransportError },
    #[error(transparent)]
    Transport(TransportError),
    #[error("unexpected response body: {0}")]
    Response(String),
}

/// Sends one JSON body and returns the raw response text.
pub trait Transport {
    fn post(&self, url: &str, bearer: Option<&str>, body: &str, timeout: Duration) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post(&self, url: &str, bearer: Option<&str>, body: &str, timeout: Duration) -> Result<String, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send(body).map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if (200..300).contains(&status) {
            Ok(text)
        } else {
            Err(TransportError::Status { status, body: text })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub max_retries: usize,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "judge".into(),
            token_env: "CONVSEARCH_API_TOKEN".into(),
            max_retries: 3,
            backoff_ms: 500,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub attempt: usize,
    pub request: String,
    pub response: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
    Invalid,
}

/// Case-insensitive True/False from the first token of the reply.
pub fn parse_verdict(reply: &str) -> Verdict {
    let first = reply
        .split_whitespace()
        .next()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_lowercase());
    match first.as_deref() {
        Some("true") => Verdict::Correct,
        Some("false") => Verdict::Incorrect,
        _ => Verdict::Invalid,
    }
}

pub fn render_judge_prompt(question: &str, golden: &str, predicted: &str) -> String {
    JUDGE_PROMPT
        .replace("{question}", question)
        .replace("{golden_answer}", golden)
        .replace("{predicted_answer}", predicted)
}

pub fn render_rewrite_prompt(history: &[Turn], utterance: &str) -> String {
    let ctx = format!("\n{}", render_context_block(history));
    REWRITE_PROMPT
        .replace("{ctx}", &ctx)
        .replace("{user_utterance}", &format!("\n{utterance}"))
}

/// Judged accuracy over valid verdicts only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgeTally {
    pub correct: usize,
    pub incorrect: usize,
    pub invalid: usize,
}

impl JudgeTally {
    pub fn add(&mut self, v: Verdict) {
        match v {
            Verdict::Correct => self.correct += 1,
            Verdict::Incorrect => self.incorrect += 1,
            Verdict::Invalid => self.invalid += 1,
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.correct + self.incorrect;
        (n > 0).then(|| self.correct as f64 / n as f64)
    }
}

pub struct LlmClient<T: Transport> {
    transport: T,
    config: ClientConfig,
    token: Option<String>,
    audit: Vec<AuditEntry>,
    sleep: fn(Duration),
}

impl<T: Transport> LlmClient<T> {
    /// Reads the bearer token from `config.token_env`.
    pub fn new(transport: T, config: ClientConfig) -> Self {
        let token = std::env::var(&config.token_env).ok();
        Self {
            transport,
            config,
            token,
            audit: Vec::new(),
            sleep: std::thread::sleep,
        }
    }

    /// Replace the backoff sleep, e.g. with a no-op in tests.
    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn request_body(&self, prompt: &str) -> String {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
        })
        .to_string()
    }

    /// Send one user message and return the assistant text.
    pub fn complete(&mut self, prompt: &str) -> Result<String, ClientError> {
        let body = self.request_body(prompt);
        let timeout = Duration::from_secs(self.config.timeout_secs);
        let attempts = self.config.max_retries + 1;
        let mut last = None;
        for attempt in 1..=attempts {
            let result = self
                .transport
                .post(&self.config.endpoint, self.token.as_deref(), &body, timeout);
            match result {
                Ok(text) => {
                    self.audit.push(AuditEntry {
                        attempt,
                        request: body.clone(),
                        response: Some(text.clone()),
                        error: None,
                    });
                    return extract_content(&text);
                }
                Err(e) => {
                    self.audit.push(AuditEntry {
                        attempt,
                        request: body.clone(),
                        response: None,
                        error: Some(e.to_string()),
                    });
                    if !e.is_retriable() {
                        return Err(ClientError::Transport(e));
                    }
                    log::warn!("attempt {attempt}/{attempts} failed: {e}");
                    if attempt < attempts {
                        let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(10));
                        (self.sleep)(Duration::from_millis(wait));
                    }
                    last = Some(e);
                }
            }
        }
        Err(ClientError::Exhausted {
            attempts,
            last: last.expect("at least one attempt"),
        })
    }

    pub fn judge(&mut self, question: &str, golden: &str, predicted: &str) -> Result<Verdict, ClientError> {
        let reply = self.complete(&render_judge_prompt(question, golden, predicted))?;
        let v = parse_verdict(&reply);
        if v == Verdict::Invalid {
            log::warn!("unparseable verdict {reply:?}; excluded from accuracy");
        }
        Ok(v)
    }

    pub fn rewrite(&mut self, history: &[Turn], utterance: &str) -> Result<String, ClientError> {
        self.complete(&render_rewrite_prompt(history, utterance))
    }
}

fn extract_content(text: &str) -> Result<String, ClientError> {
    let v: Value = serde_json::from_str(text).map_err(|_| ClientError::Response(text.to_owned()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| ClientError::Response(text.to_owned()))
}
