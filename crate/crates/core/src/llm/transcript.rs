//! Replays canned replies. A transcript is a JSON list of
//! `{"match": <substring of the user message>, "reply": <text>}`; the first
//! entry whose `match` occurs in the last user message wins.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{last_user, validate_messages, ChatBackend, ChatMessage, LlmError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptEntry {
    #[serde(rename = "match")]
    pub pattern: String,
    pub reply: String,
}

#[derive(Debug, Clone)]
pub struct TranscriptBackend {
    entries: Vec<TranscriptEntry>,
}

impl TranscriptBackend {
    pub fn new(entries: Vec<TranscriptEntry>) -> Self {
        Self { entries }
    }

    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        serde_json::from_str(text).map(Self::new).map_err(|e| LlmError::InvalidConfig(format!("transcript: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::InvalidConfig(format!("transcript {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl ChatBackend for TranscriptBackend {
    fn name(&self) -> &str {
        "transcript"
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        validate_messages(messages)?;
        let user = last_user(messages).unwrap_or("");
        self.entries.iter().find(|e| user.contains(&e.pattern)).map(|e| e.reply.clone()).ok_or(LlmError::TranscriptMiss)
    }
}
