//! OpenAI-compatible chat client for a local model server.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{validate_messages, ChatBackend, ChatMessage, HttpConfig, LlmError};

/// Sleep before each retry; two retries after the first attempt.
pub const RETRY_BACKOFF: [Duration; 2] = [Duration::from_millis(250), Duration::from_millis(1000)];

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

pub struct HttpBackend {
    config: HttpConfig,
    endpoint: String,
    client: reqwest::blocking::Client,
    backoff: Vec<Duration>,
}

enum Attempt {
    Retry(String),
    Fatal(LlmError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| LlmError::InvalidConfig(e.to_string()))?;
        let endpoint = format!("{}/v1/chat/completions", config.base_url.trim_end_matches('/'));
        Ok(Self { config, endpoint, client, backoff: RETRY_BACKOFF.to_vec() })
    }

    /// Overrides the retry schedule (tests use zero delays).
    pub fn with_backoff(mut self, backoff: Vec<Duration>) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, messages: &[ChatMessage]) -> Result<String, Attempt> {
        let body = ChatRequest { model: &self.config.model_name, messages, temperature: self.config.temperature };
        let resp = self.client.post(&self.endpoint).json(&body).send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(Attempt::Retry(format!("server returned {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(LlmError::BackendUnavailable(format!("server returned {status}"))));
        }
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| Attempt::Fatal(LlmError::MalformedResponse(e.to_string())))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal(LlmError::MalformedResponse("missing choices[0].message.content".into())))
    }
}

impl ChatBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        validate_messages(messages)?;
        let mut last_error = String::new();
        for delay in std::iter::once(None).chain(self.backoff.iter().map(Some)) {
            if let Some(d) = delay {
                tracing::warn!(endpoint = %self.endpoint, error = %last_error, "retrying chat completion");
                std::thread::sleep(*d);
            }
            match self.attempt(messages) {
                Ok(text) => return Ok(text),
                Err(Attempt::Retry(e)) => last_error = e,
                Err(Attempt::Fatal(e)) => return Err(e),
            }
        }
        Err(LlmError::BackendUnavailable(last_error))
    }
}
