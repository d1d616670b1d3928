//! Chat-completion backends: an HTTP client for the common chat-completions
//! wire shape and a deterministic scripted mock.

mod http;
mod limits;
mod mock;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::TemplateId;

pub use http::HttpBackend;
pub use limits::{retry_with_backoff, Attempt, RateWindow, RetryPolicy, Semaphore};
pub use mock::{AnswerPolicy, MockBackend, MockReply};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("retries exhausted after {attempts} attempts (last status {}): {last_error}",
        .last_status.map_or_else(|| "none".to_string(), |s| s.to_string()))]
    RetriesExhausted {
        attempts: u32,
        last_status: Option<u16>,
        last_error: String,
    },
}

impl BackendError {
    /// 429, 5xx, timeouts and transport failures are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Status { status, .. } => *status == 429 || (500..600).contains(status),
            BackendError::Timeout | BackendError::Transport(_) => true,
            _ => false,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            BackendError::Status { status, .. } => Some(*status),
            BackendError::RetriesExhausted { last_status, .. } => *last_status,
            _ => None,
        }
    }
}

/// Identifies what a request is for. Never sent over the wire; the mock
/// backend uses it as its script key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RequestKey {
    pub kind: TemplateId,
    pub subject: String,
}

impl RequestKey {
    pub fn new(kind: TemplateId, subject: impl Into<String>) -> Self {
        Self {
            kind,
            subject: subject.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_id: String,
    pub prompt_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub key: Option<RequestKey>,
}

impl ChatRequest {
    pub fn new(
        model_id: impl Into<String>,
        prompt_text: impl Into<String>,
        temperature: f64,
        max_output_tokens: u32,
    ) -> Result<Self, BackendError> {
        let request = Self {
            model_id: model_id.into(),
            prompt_text: prompt_text.into(),
            temperature,
            max_output_tokens,
            key: None,
        };
        request.validate()?;
        Ok(request)
    }

    pub fn with_key(mut self, key: RequestKey) -> Self {
        self.key = Some(key);
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt_text.is_empty() {
            return Err(BackendError::InvalidRequest("prompt text is empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub input_token_count: u64,
    pub output_token_count: u64,
    pub attempts: u32,
}

/// A chat-completion backend. Implementations are shared across worker threads.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

fn default_timeout_secs() -> u64 {
    120
}
fn default_retry_limit() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_parallel() -> usize {
    4
}

/// Connection settings for one HTTP backend profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub endpoint_url: String,
    /// Name of the environment variable holding the bearer token. Empty means
    /// no Authorization header is sent.
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_parallel")]
    pub max_parallel_requests: usize,
    /// `None` means unlimited.
    #[serde(default)]
    pub requests_per_minute_cap: Option<u32>,
}

impl BackendConfig {
    pub fn new(endpoint_url: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            api_key_env: String::new(),
            request_timeout_secs: default_timeout_secs(),
            retry_limit: default_retry_limit(),
            backoff_base_ms: default_backoff_ms(),
            max_parallel_requests: default_parallel(),
            requests_per_minute_cap: None,
        }
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs(self.request_timeout_secs)
    }

    pub fn backoff_base(&self) -> Duration {
        Duration::from_millis(self.backoff_base_ms)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let url = self.endpoint_url.as_str();
        if !(url.starts_with("http://") || url.starts_with("https://"))
            || ureq::http::Uri::try_from(url).is_err()
        {
            return Err(BackendError::InvalidConfig(format!(
                "endpoint_url '{url}' is not an http(s) URL"
            )));
        }
        if self.max_parallel_requests == 0 {
            return Err(BackendError::InvalidConfig(
                "max_parallel_requests must be positive".into(),
            ));
        }
        if self.requests_per_minute_cap == Some(0) {
            return Err(BackendError::InvalidConfig(
                "requests_per_minute_cap must be positive".into(),
            ));
        }
        if self.request_timeout_secs == 0 {
            return Err(BackendError::InvalidConfig(
                "request_timeout_secs must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        assert!(ChatRequest::new("m", "", 0.0, 10).is_err());
        assert!(ChatRequest::new("m", "hi", -0.1, 10).is_err());
        assert!(ChatRequest::new("m", "hi", f64::NAN, 10).is_err());
        assert!(ChatRequest::new("m", "hi", 0.0, 0).is_err());
        assert!(ChatRequest::new("m", "hi", 0.7, 10).is_ok());
    }

    #[test]
    fn retryable_classification() {
        let status = |s| BackendError::Status {
            status: s,
            body: String::new(),
        };
        assert!(status(429).is_retryable());
        assert!(status(500).is_retryable());
        assert!(status(503).is_retryable());
        assert!(!status(400).is_retryable());
        assert!(!status(401).is_retryable());
        assert!(!status(404).is_retryable());
        assert!(BackendError::Timeout.is_retryable());
    }

    #[test]
    fn config_from_toml_with_defaults() {
        let cfg: BackendConfig = toml::from_str(
            r#"
            endpoint_url = "https://api.example.com/v1/chat/completions"
            api_key_env = "EXAMPLE_KEY"
            requests_per_minute_cap = 60
            "#,
        )
        .unwrap();
        assert_eq!(cfg.retry_limit, 3);
        assert_eq!(cfg.requests_per_minute_cap, Some(60));
        assert!(cfg.validate().is_ok());
        assert!(BackendConfig::new("ftp://x").validate().is_err());
        let mut zero = BackendConfig::new("http://localhost:1/v1");
        zero.max_parallel_requests = 0;
        assert!(zero.validate().is_err());
    }
}
