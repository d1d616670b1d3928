use serde::{Deserialize, Serialize};

use super::limits::{retry_with_backoff, RateWindow, RetryPolicy, Semaphore};
use super::{BackendConfig, BackendError, ChatBackend, ChatRequest, ChatResponse};

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: [WireMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Blocking chat-completions client with retry, a parallelism bound and an
/// optional per-minute request cap.
pub struct HttpBackend {
    config: BackendConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    in_flight: Semaphore,
    rate: Option<RateWindow>,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint_url", &self.config.endpoint_url)
            .field("api_key_env", &self.config.api_key_env)
            .finish_non_exhaustive()
    }
}

impl HttpBackend {
    /// Reads the API key from the configured environment variable.
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            match std::env::var(&config.api_key_env) {
                Ok(key) if !key.is_empty() => Some(key),
                _ => return Err(BackendError::MissingApiKey(config.api_key_env.clone())),
            }
        };
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(
        config: BackendConfig,
        api_key: Option<String>,
    ) -> Result<Self, BackendError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.request_timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            in_flight: Semaphore::new(config.max_parallel_requests),
            rate: config.requests_per_minute_cap.map(RateWindow::per_minute),
            api_key,
            agent,
            config,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn attempt(&self, body: &str) -> Result<ChatResponse, BackendError> {
        if let Some(rate) = &self.rate {
            rate.acquire();
        }
        let _permit = self.in_flight.acquire();

        let mut request = self
            .agent
            .post(&self.config.endpoint_url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request.send(body).map_err(map_transport)?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(map_transport)?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status {
                status,
                body: text.chars().take(500).collect(),
            });
        }
        decode(&text)
    }
}

fn map_transport(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        other => BackendError::Transport(other.to_string()),
    }
}

fn decode(body: &str) -> Result<ChatResponse, BackendError> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| BackendError::Decode(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Decode("response has no choices".into()))?;
    let usage = wire.usage.unwrap_or_default();
    Ok(ChatResponse {
        text: choice.message.content.unwrap_or_default(),
        input_token_count: usage.prompt_tokens,
        output_token_count: usage.completion_tokens,
        attempts: 1,
    })
}

/// JSON body sent for `request`.
pub(crate) fn request_body(request: &ChatRequest) -> String {
    let wire = WireRequest {
        model: &request.model_id,
        messages: [WireMessage {
            role: "user",
            content: &request.prompt_text,
        }],
        temperature: request.temperature,
        max_tokens: request.max_output_tokens,
    };
    serde_json::to_string(&wire).expect("request serialization cannot fail")
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let body = request_body(request);
        let policy = RetryPolicy {
            retry_limit: self.config.retry_limit,
            backoff_base: self.config.backoff_base(),
        };
        let (mut response, attempts) =
            retry_with_backoff(policy, std::thread::sleep, |_| self.attempt(&body))?;
        response.attempts = attempts;
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_has_wire_fields() {
        let req = ChatRequest::new("gpt-x", "Hello \"there\"", 0.0, 64).unwrap();
        let v: serde_json::Value = serde_json::from_str(&request_body(&req)).unwrap();
        assert_eq!(v["model"], "gpt-x");
        assert_eq!(v["messages"][0]["role"], "user");
        assert_eq!(v["messages"][0]["content"], "Hello \"there\"");
        assert_eq!(v["temperature"], 0.0);
        assert_eq!(v["max_tokens"], 64);
    }

    #[test]
    fn decodes_first_choice() {
        let r = decode(
            r#"{"choices":[{"message":{"role":"assistant","content":"Answer: A"}},{"message":{"content":"x"}}],
                "usage":{"prompt_tokens":12,"completion_tokens":3}}"#,
        )
        .unwrap();
        assert_eq!(r.text, "Answer: A");
        assert_eq!((r.input_token_count, r.output_token_count), (12, 3));
        assert!(decode(r#"{"choices":[]}"#).is_err());
        assert!(decode("not json").is_err());
    }

    #[test]
    fn missing_key_is_reported() {
        let mut cfg = BackendConfig::new("http://127.0.0.1:9/v1/chat/completions");
        cfg.api_key_env = "EQT_TEST_SURELY_UNSET_KEY".into();
        assert_eq!(
            HttpBackend::new(cfg).unwrap_err(),
            BackendError::MissingApiKey("EQT_TEST_SURELY_UNSET_KEY".into())
        );
    }
}
