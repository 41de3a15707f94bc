//! Provider-neutral chat completion.
//!
//! Every backend turns a [`ProviderRequest`] into a stream of [`TokenDelta`]s:
//! zero or more non-final fragments followed by exactly one final delta.

mod openai;
mod scripted;
pub mod sse;

use std::time::Duration;

use async_trait::async_trait;
use futures::stream::BoxStream;
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use openai::{chat_request_body, OpenAiCompatible};
pub use scripted::{ScriptRule, ScriptedBackend, ScriptedFailure, ScriptedReply};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_MAX_TOKENS: u32 = 700;

/// Who a context message came from, as seen by the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "snake_case")]
pub enum SpeakerLabel {
    User,
    /// An agent message, labeled with the agent's display name.
    Agent(String),
    /// Coordinator instructions (turn markers, selection requests).
    Instruction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub speaker: SpeakerLabel,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            speaker: SpeakerLabel::User,
            content: content.into(),
        }
    }

    pub fn agent(display_name: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            speaker: SpeakerLabel::Agent(display_name.into()),
            content: content.into(),
        }
    }

    pub fn instruction(content: impl Into<String>) -> Self {
        Self {
            speaker: SpeakerLabel::Instruction,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub system_prompt: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    pub max_tokens: u32,
    /// Empty means "use the backend's configured model".
    #[serde(default)]
    pub model_name: String,
}

impl ProviderRequest {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.messages.is_empty() {
            return Err(ProviderError::InvalidRequest("no messages".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ProviderError::InvalidRequest(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(ProviderError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Content of the final message; scripted matchers run against this.
    pub fn last_content(&self) -> &str {
        self.messages.last().map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenDelta {
    pub text: String,
    pub is_final: bool,
}

impl TokenDelta {
    pub fn fragment(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            is_final: false,
        }
    }

    pub fn finish(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            is_final: true,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("transient upstream failure (HTTP {status})")]
    Transient { status: u16 },
    #[error("unexpected HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed stream: {0}")]
    MalformedStream(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl ProviderError {
    /// Short machine-readable tag used in event logs and error frames.
    pub fn code(&self) -> &'static str {
        match self {
            ProviderError::Timeout(_) => "timeout",
            ProviderError::Auth { .. } => "auth",
            ProviderError::RateLimited { .. } => "rate_limited",
            ProviderError::Transient { .. } => "transient",
            ProviderError::Status { .. } => "http_status",
            ProviderError::MalformedStream(_) => "malformed_stream",
            ProviderError::Transport(_) => "transport",
            ProviderError::InvalidRequest(_) => "invalid_request",
        }
    }
}

pub type DeltaStream = BoxStream<'static, Result<TokenDelta, ProviderError>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProviderHealth {
    pub backend: String,
    pub reachable: bool,
    pub detail: String,
}

/// A chat-completion backend. Handles are shared by every session, so
/// implementations must tolerate concurrent requests.
#[async_trait]
pub trait ChatProvider: Send + Sync {
    /// Start a completion. Dropping the returned stream cancels the request.
    async fn complete_streaming(&self, request: ProviderRequest) -> Result<DeltaStream, ProviderError>;

    async fn health(&self) -> ProviderHealth;
}

/// Enforce the delta-stream contract on an arbitrary stream: items after the
/// final delta are dropped, and a stream that ends without one yields a
/// [`ProviderError::MalformedStream`].
pub fn well_formed(stream: DeltaStream) -> DeltaStream {
    futures::stream::unfold(Some(stream), |state| async move {
        let mut inner = state?;
        match inner.next().await {
            Some(Ok(delta)) if delta.is_final => Some((Ok(delta), None)),
            Some(Ok(delta)) => Some((Ok(delta), Some(inner))),
            Some(Err(e)) => Some((Err(e), None)),
            None => Some((
                Err(ProviderError::MalformedStream(
                    "stream ended without a final delta".into(),
                )),
                None,
            )),
        }
    })
    .boxed()
}

/// Drain a delta stream into the full reply text.
pub async fn collect_reply(stream: DeltaStream) -> Result<String, ProviderError> {
    let mut stream = well_formed(stream);
    let mut reply = String::new();
    while let Some(delta) = stream.next().await {
        reply.push_str(&delta?.text);
    }
    Ok(reply)
}

#[cfg(test)]
mod tests {
    use super::*;
    use futures::stream;

    fn boxed(items: Vec<Result<TokenDelta, ProviderError>>) -> DeltaStream {
        stream::iter(items).boxed()
    }

    #[tokio::test]
    async fn items_after_final_are_dropped() {
        let s = boxed(vec![
            Ok(TokenDelta::fragment("a")),
            Ok(TokenDelta::finish("b")),
            Ok(TokenDelta::fragment("c")),
        ]);
        let items: Vec<_> = well_formed(s).collect().await;
        assert_eq!(items.len(), 2);
        assert_eq!(collect_reply(boxed(vec![Ok(TokenDelta::finish("x"))])).await.unwrap(), "x");
    }

    #[tokio::test]
    async fn missing_final_is_malformed() {
        let s = boxed(vec![Ok(TokenDelta::fragment("a"))]);
        let err = collect_reply(s).await.unwrap_err();
        assert_eq!(err.code(), "malformed_stream");
    }

    #[test]
    fn request_validation() {
        let mut req = ProviderRequest {
            system_prompt: "s".into(),
            messages: vec![ChatMessage::user("hi")],
            temperature: 0.0,
            max_tokens: 1,
            model_name: String::new(),
        };
        assert!(req.validate().is_ok());
        req.temperature = -0.1;
        assert!(req.validate().is_err());
        req.temperature = f32::NAN;
        assert!(req.validate().is_err());
        req.temperature = 0.7;
        req.max_tokens = 0;
        assert!(req.validate().is_err());
        req.max_tokens = 5;
        req.messages.clear();
        assert!(req.validate().is_err());
    }
}
