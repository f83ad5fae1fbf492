//! Completion backend abstraction.
//!
//! The classifier only needs one request shape: send a prompt, get back the
//! generated text plus the top-k logprob map for the first sampled token.
//! [`MockBackend`] replays a script and records requests for tests;
//! [`HttpBackend`] speaks a completions-style JSON protocol over HTTP.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of the environment variable that supplies the bearer token, taking
/// precedence over any `api_key` in the config file.
pub const API_KEY_ENV: &str = "RISKGATE_API_KEY";

/// One completion call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    /// Decision-only classification always uses 1.
    pub max_new_tokens: u32,
    /// How many top logprobs to request for the first token; 0 disables.
    pub want_top_logprobs: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    pub temperature: f64,
}

/// What came back: the full text plus first-token logprob information.
/// When `first_token_top_logprobs` is non-empty, `first_token` is its argmax
/// and every value is a log of a probability, so it is `<= 0`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub first_token: String,
    pub first_token_top_logprobs: HashMap<String, f64>,
}

impl CompletionResult {
    /// Checks the struct invariants; used by adapters before returning data.
    pub fn check(&self) -> Result<(), BackendError> {
        if self.first_token_top_logprobs.is_empty() {
            return Ok(());
        }
        if let Some((_, lp)) = self
            .first_token_top_logprobs
            .iter()
            .find(|(_, lp)| **lp > 0.0 || lp.is_nan())
        {
            return Err(BackendError::MalformedResponse(format!(
                "logprob {lp} is not a log-probability"
            )));
        }
        let argmax = self
            .first_token_top_logprobs
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(token, _)| token.as_str())
            .unwrap_or_default();
        if argmax != self.first_token {
            return Err(BackendError::MalformedResponse(format!(
                "first token {:?} is not the top logprob entry {argmax:?}",
                self.first_token
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    /// Network, timeout, or non-2xx status. Eligible for retry.
    #[error("transport error: {0}")]
    Transport(String),
    /// The upstream answered but the payload does not fit the protocol.
    /// Never retried.
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    /// The mock script ran out of queued results.
    #[error("mock script exhausted")]
    ScriptExhausted,
}

/// Anything that can serve a completion call.
#[async_trait]
pub trait CompletionBackend: Send + Sync {
    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;
}

/// Scripted backend for tests: pops queued results in order and records every
/// request it sees.
#[derive(Debug, Default)]
pub struct MockBackend {
    script: Mutex<VecDeque<Result<CompletionResult, String>>>,
    requests: Mutex<Vec<CompletionRequest>>,
}

impl MockBackend {
    pub fn new(script: impl IntoIterator<Item = CompletionResult>) -> Self {
        Self {
            script: Mutex::new(script.into_iter().map(Ok).collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn push(&self, result: CompletionResult) {
        self.script.lock().unwrap().push_back(Ok(result));
    }

    /// Queues a transport failure; the next call returns it instead of a result.
    pub fn push_transport_error(&self, message: impl Into<String>) {
        self.script.lock().unwrap().push_back(Err(message.into()));
    }

    /// Everything `complete` has been called with, in call order.
    pub fn recorded_requests(&self) -> Vec<CompletionRequest> {
        self.requests.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap().len()
    }
}

#[async_trait]
impl CompletionBackend for MockBackend {
    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        self.requests.lock().unwrap().push(request.clone());
        match self.script.lock().unwrap().pop_front() {
            Some(Ok(result)) => Ok(result),
            Some(Err(message)) => Err(BackendError::Transport(message)),
            None => Err(BackendError::ScriptExhausted),
        }
    }
}

/// Connection settings for [`HttpBackend`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Extra attempts after the first, applied to transport errors only.
    #[serde(default)]
    pub retries: u32,
    #[serde(default = "default_top_k")]
    pub top_k_logprobs: u32,
    /// Bearer token; the `RISKGATE_API_KEY` environment variable wins over this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_top_k() -> u32 {
    32
}

impl BackendConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            timeout_ms: default_timeout_ms(),
            retries: 0,
            top_k_logprobs: default_top_k(),
            api_key: None,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    logprobs: u32,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    stop: Vec<String>,
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    top_logprobs: Vec<HashMap<String, f64>>,
}

/// HTTP adapter for a completions-style endpoint at
/// `{base_url}/v1/completions`. The prompt is passed through byte-for-byte.
pub struct HttpBackend {
    config: BackendConfig,
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn api_key(&self) -> Option<String> {
        std::env::var(API_KEY_ENV)
            .ok()
            .filter(|v| !v.is_empty())
            .or_else(|| self.config.api_key.clone())
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/completions", self.config.base_url.trim_end_matches('/'))
    }

    async fn attempt(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let body = WireRequest {
            model: &self.config.model_name,
            prompt: &request.prompt,
            max_tokens: request.max_new_tokens,
            logprobs: request.want_top_logprobs,
            stop: request.stop_sequences.clone(),
            temperature: request.temperature,
        };
        let mut call = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = self.api_key() {
            call = call.bearer_auth(key);
        }
        let response = call
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(BackendError::Transport(format!("status {status}")));
        }
        let payload: WireResponse = response
            .json()
            .await
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let choice = payload
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::MalformedResponse("no choices".into()))?;

        let (first_token, first_token_top_logprobs) = match choice.logprobs {
            Some(lp) => {
                let top = lp.top_logprobs.into_iter().next().unwrap_or_default();
                let first = lp.tokens.into_iter().next().or_else(|| {
                    top.iter()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(token, _)| token.clone())
                });
                match first {
                    Some(first) => (first, top),
                    None => {
                        return Err(BackendError::MalformedResponse(
                            "logprobs present but empty".into(),
                        ))
                    }
                }
            }
            None if request.want_top_logprobs == 0 => (
                choice.text.split_whitespace().next().unwrap_or_default().to_string(),
                HashMap::new(),
            ),
            None => {
                return Err(BackendError::MalformedResponse(
                    "logprobs requested but missing".into(),
                ))
            }
        };

        let result = CompletionResult {
            text: choice.text,
            first_token,
            first_token_top_logprobs,
        };
        result.check()?;
        Ok(result)
    }
}

#[async_trait]
impl CompletionBackend for HttpBackend {
    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let mut last = None;
        for _ in 0..=self.config.retries {
            match self.attempt(request).await {
                Ok(result) => return Ok(result),
                // Malformed payloads are deterministic; retrying cannot help.
                Err(err @ BackendError::MalformedResponse(_)) => return Err(err),
                Err(err) => last = Some(err),
            }
        }
        Err(last.unwrap_or_else(|| BackendError::Transport("no attempts made".into())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(first: &str, pairs: &[(&str, f64)]) -> CompletionResult {
        CompletionResult {
            text: first.to_string(),
            first_token: first.to_string(),
            first_token_top_logprobs: pairs.iter().map(|(t, lp)| (t.to_string(), *lp)).collect(),
        }
    }

    #[tokio::test]
    async fn mock_replays_in_order_and_records_requests() {
        let mock = MockBackend::new([
            result("sec", &[("sec", -0.1)]),
            result("pc", &[("pc", -0.2)]),
        ]);
        let request = CompletionRequest {
            prompt: "p1".into(),
            max_new_tokens: 1,
            want_top_logprobs: 32,
            stop_sequences: vec![],
            temperature: 0.0,
        };
        assert_eq!(mock.complete(&request).await.unwrap().first_token, "sec");
        assert_eq!(mock.complete(&request).await.unwrap().first_token, "pc");
        assert!(matches!(
            mock.complete(&request).await.unwrap_err(),
            BackendError::ScriptExhausted
        ));
        assert_eq!(mock.recorded_requests().len(), 3);
        assert_eq!(mock.recorded_requests()[0].prompt, "p1");
    }

    #[test]
    fn result_check_enforces_argmax_and_log_domain() {
        assert!(result("sec", &[("sec", -0.1), ("pc", -2.0)]).check().is_ok());
        assert!(result("sec", &[]).check().is_ok());
        assert!(matches!(
            result("pc", &[("sec", -0.1), ("pc", -2.0)]).check().unwrap_err(),
            BackendError::MalformedResponse(_)
        ));
        assert!(matches!(
            result("sec", &[("sec", 0.5)]).check().unwrap_err(),
            BackendError::MalformedResponse(_)
        ));
    }

    #[test]
    fn config_defaults() {
        let config: BackendConfig =
            toml::from_str("base_url = \"http://localhost:1\"\nmodel_name = \"m\"").unwrap();
        assert_eq!(config.timeout_ms, 30_000);
        assert_eq!(config.retries, 0);
        assert_eq!(config.top_k_logprobs, 32);
        assert_eq!(config.api_key, None);
    }

    #[test]
    fn endpoint_normalizes_trailing_slash() {
        let backend =
            HttpBackend::new(BackendConfig::new("http://host:9/", "m")).unwrap();
        assert_eq!(backend.endpoint(), "http://host:9/v1/completions");
    }
}
