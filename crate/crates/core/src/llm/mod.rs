//! Chat-completion boundary.
//!
//! Three backends sit behind [`ChatBackend`]:
//! - [`OracleBackend`]: deterministic stand-in that follows the prompt's
//!   instructions exactly (used to anchor end-to-end tests).
//! - [`TranscriptBackend`]: canned replies keyed on user-message substrings.
//! - `HttpBackend`: OpenAI-compatible `/v1/chat/completions` client for a
//!   local model server (feature `http-backend`).

#[cfg(feature = "http-backend")]
mod http;
mod oracle;
mod transcript;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "http-backend")]
pub use http::HttpBackend;
pub use oracle::{oracle_complete, OracleBackend};
pub use transcript::{TranscriptBackend, TranscriptEntry};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LlmError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no transcript entry matches the prompt")]
    TranscriptMiss,
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("invalid message list: {0}")]
    InvalidMessages(String),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error("prompt has no parseable procedure enclosure")]
    MalformedPrompt,
}

impl LlmError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, LlmError::BackendUnavailable(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// Checks that the list starts with the only system message and has no empty content.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), LlmError> {
    match messages.first() {
        Some(m) if m.role == Role::System => {}
        _ => return Err(LlmError::InvalidMessages("first message must be the system prompt".into())),
    }
    if messages.iter().skip(1).any(|m| m.role == Role::System) {
        return Err(LlmError::InvalidMessages("only one system message is allowed".into()));
    }
    if messages.iter().any(|m| m.content.is_empty()) {
        return Err(LlmError::InvalidMessages("message content must be nonempty".into()));
    }
    Ok(())
}

pub(crate) fn last_user(messages: &[ChatMessage]) -> Option<&str> {
    messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError>;
}

/// Wraps a backend and counts calls that reached it.
pub struct CountingBackend<B: ?Sized> {
    calls: AtomicUsize,
    inner: Arc<B>,
}

impl<B: ChatBackend + ?Sized> CountingBackend<B> {
    pub fn new(inner: Arc<B>) -> Self {
        Self { calls: AtomicUsize::new(0), inner }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for CountingBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(messages)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Oracle,
    Transcript,
    Http,
}

impl std::str::FromStr for BackendKind {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "oracle" => Ok(BackendKind::Oracle),
            "transcript" => Ok(BackendKind::Transcript),
            "http" => Ok(BackendKind::Http),
            other => Err(LlmError::InvalidConfig(format!("unknown backend {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub model_name: String,
    pub timeout_ms: u64,
    pub temperature: f64,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self { base_url: base_url.into(), model_name: model_name.into(), timeout_ms: 30_000, temperature: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub http: Option<HttpConfig>,
    pub transcript_path: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::oracle()
    }
}

impl BackendConfig {
    pub fn oracle() -> Self {
        Self { kind: BackendKind::Oracle, http: None, transcript_path: None }
    }

    pub fn transcript(path: impl Into<PathBuf>) -> Self {
        Self { kind: BackendKind::Transcript, http: None, transcript_path: Some(path.into()) }
    }

    pub fn http(http: HttpConfig) -> Self {
        Self { kind: BackendKind::Http, http: Some(http), transcript_path: None }
    }

    /// Reads `CORE_BACKEND`, `CORE_HTTP_BASE_URL`, `CORE_HTTP_MODEL` and `CORE_TRANSCRIPT`.
    pub fn from_env() -> Result<Self, LlmError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, LlmError> {
        let kind: BackendKind = get("CORE_BACKEND").as_deref().unwrap_or("oracle").parse()?;
        let cfg = match kind {
            BackendKind::Oracle => Self::oracle(),
            BackendKind::Transcript => Self::transcript(
                get("CORE_TRANSCRIPT").ok_or_else(|| LlmError::InvalidConfig("CORE_TRANSCRIPT is not set".into()))?,
            ),
            BackendKind::Http => Self::http(HttpConfig::new(
                get("CORE_HTTP_BASE_URL")
                    .ok_or_else(|| LlmError::InvalidConfig("CORE_HTTP_BASE_URL is not set".into()))?,
                get("CORE_HTTP_MODEL").unwrap_or_else(|| "local".to_string()),
            )),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match self.kind {
            BackendKind::Oracle => Ok(()),
            BackendKind::Transcript if self.transcript_path.is_none() => {
                Err(LlmError::InvalidConfig("transcript backend needs a transcript path".into()))
            }
            BackendKind::Transcript => Ok(()),
            BackendKind::Http => match &self.http {
                None => Err(LlmError::InvalidConfig("http backend needs base_url and model".into())),
                Some(h) if h.temperature != 0.0 => Err(LlmError::InvalidConfig("temperature is fixed at 0.0".into())),
                Some(h) if h.base_url.is_empty() || h.model_name.is_empty() => {
                    Err(LlmError::InvalidConfig("http base_url and model must be nonempty".into()))
                }
                Some(_) => Ok(()),
            },
        }
    }

    pub fn build(&self) -> Result<Arc<dyn ChatBackend>, LlmError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Oracle => Arc::new(OracleBackend),
            BackendKind::Transcript => {
                Arc::new(TranscriptBackend::load(self.transcript_path.as_deref().expect("validated"))?)
            }
            #[cfg(feature = "http-backend")]
            BackendKind::Http => Arc::new(HttpBackend::new(self.http.clone().expect("validated"))?),
            #[cfg(not(feature = "http-backend"))]
            BackendKind::Http => {
                return Err(LlmError::InvalidConfig("built without the http-backend feature".into()));
            }
        })
    }
}

/// One completion through the backend described by `cfg`.
pub fn complete(cfg: &BackendConfig, messages: &[ChatMessage]) -> Result<String, LlmError> {
    cfg.build()?.complete(messages)
}
