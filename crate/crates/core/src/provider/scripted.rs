//! Deterministic offline backend driven by matcher → reply rules.

use std::sync::Mutex;

use async_trait::async_trait;
use futures::StreamExt;
use serde::{Deserialize, Serialize};

use super::{ChatProvider, DeltaStream, ProviderError, ProviderHealth, ProviderRequest, TokenDelta};

/// Fault to inject in place of a reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFailure {
    Timeout,
    Transport,
    Auth,
    MalformedStream,
}

impl ScriptedFailure {
    fn to_error(self) -> ProviderError {
        match self {
            ScriptedFailure::Timeout => ProviderError::Timeout(super::DEFAULT_TIMEOUT),
            ScriptedFailure::Transport => ProviderError::Transport("scripted transport failure".into()),
            ScriptedFailure::Auth => ProviderError::Auth { status: 401 },
            ScriptedFailure::MalformedStream => {
                ProviderError::MalformedStream("scripted malformed stream".into())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptedReply {
    Text(String),
    /// Fails before any delta is produced.
    Fail(ScriptedFailure),
    /// Streams `partial`, then fails mid-reply.
    FailAfter {
        partial: String,
        failure: ScriptedFailure,
    },
    /// Never completes. Used to freeze a round at a known point.
    Stall,
}

impl ScriptedReply {
    pub fn text(s: impl Into<String>) -> Self {
        ScriptedReply::Text(s.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptRule {
    /// Literal substring tested against the request's last message.
    pub matcher: String,
    pub reply: ScriptedReply,
}

impl ScriptRule {
    pub fn new(matcher: impl Into<String>, reply: ScriptedReply) -> Self {
        Self {
            matcher: matcher.into(),
            reply,
        }
    }
}

/// Rules are tried in order against the last message content; the first
/// matching rule wins, otherwise the default reply is used. Every request is
/// recorded.
#[derive(Debug)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    default_reply: ScriptedReply,
    log: Mutex<Vec<ProviderRequest>>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>, default_reply: ScriptedReply) -> Self {
        Self {
            rules,
            default_reply,
            log: Mutex::new(Vec::new()),
        }
    }

    /// A backend that answers every request with `reply`.
    pub fn constant(reply: impl Into<String>) -> Self {
        Self::new(Vec::new(), ScriptedReply::Text(reply.into()))
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    pub fn default_reply(&self) -> &ScriptedReply {
        &self.default_reply
    }

    /// The reply the script yields for `request`, without recording it.
    pub fn reply_for(&self, request: &ProviderRequest) -> &ScriptedReply {
        let last = request.last_content();
        self.rules
            .iter()
            .find(|r| last.contains(&r.matcher))
            .map_or(&self.default_reply, |r| &r.reply)
    }

    pub fn requests(&self) -> Vec<ProviderRequest> {
        self.log.lock().expect("request log poisoned").clone()
    }

    pub fn request_count(&self) -> usize {
        self.log.lock().expect("request log poisoned").len()
    }
}

/// Split a reply into word-sized fragments, keeping whitespace attached to
/// the preceding word so the concatenation is exact.
pub(crate) fn fragments(text: &str) -> Vec<String> {
    text.split_inclusive(char::is_whitespace)
        .map(str::to_string)
        .collect()
}

fn text_stream(text: &str, failure: Option<ScriptedFailure>) -> DeltaStream {
    let mut items: Vec<Result<TokenDelta, ProviderError>> =
        fragments(text).into_iter().map(|f| Ok(TokenDelta::fragment(f))).collect();
    match failure {
        Some(f) => items.push(Err(f.to_error())),
        None => items.push(Ok(TokenDelta::finish(""))),
    }
    futures::stream::iter(items).boxed()
}

#[async_trait]
impl ChatProvider for ScriptedBackend {
    async fn complete_streaming(&self, request: ProviderRequest) -> Result<DeltaStream, ProviderError> {
        request.validate()?;
        let reply = self.reply_for(&request).clone();
        self.log.lock().expect("request log poisoned").push(request);
        match reply {
            ScriptedReply::Text(text) => Ok(text_stream(&text, None)),
            ScriptedReply::Fail(f) => Err(f.to_error()),
            ScriptedReply::FailAfter { partial, failure } => Ok(text_stream(&partial, Some(failure))),
            ScriptedReply::Stall => Ok(futures::stream::pending().boxed()),
        }
    }

    async fn health(&self) -> ProviderHealth {
        ProviderHealth {
            backend: "scripted".into(),
            reachable: true,
            detail: format!("{} rules", self.rules.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{collect_reply, ChatMessage};
    use proptest::prelude::*;

    fn request(last: &str) -> ProviderRequest {
        ProviderRequest {
            system_prompt: "sys".into(),
            messages: vec![ChatMessage::user("hello"), ChatMessage::instruction(last)],
            temperature: 0.0,
            max_tokens: 16,
            model_name: String::new(),
        }
    }

    #[tokio::test]
    async fn canned_reply_streams_exactly() {
        let backend = ScriptedBackend::constant("Plant kale now.");
        let deltas: Vec<_> = backend
            .complete_streaming(request("x"))
            .await
            .unwrap()
            .collect()
            .await;
        let deltas: Vec<_> = deltas.into_iter().map(Result::unwrap).collect();
        assert_eq!(deltas.iter().filter(|d| d.is_final).count(), 1);
        assert!(deltas.last().unwrap().is_final);
        let text: String = deltas.iter().map(|d| d.text.as_str()).collect();
        assert_eq!(text, "Plant kale now.");
    }

    #[tokio::test]
    async fn empty_reply_is_a_single_final_delta() {
        let backend = ScriptedBackend::constant("");
        let deltas: Vec<_> = backend
            .complete_streaming(request("x"))
            .await
            .unwrap()
            .collect()
            .await;
        assert_eq!(deltas, vec![Ok(TokenDelta::finish(""))]);
    }

    #[tokio::test]
    async fn injected_timeout_produces_no_deltas() {
        let backend = ScriptedBackend::new(vec![], ScriptedReply::Fail(ScriptedFailure::Timeout));
        let err = backend.complete_streaming(request("x")).await.err().unwrap();
        assert!(matches!(err, ProviderError::Timeout(_)));
    }

    #[tokio::test]
    async fn mid_stream_failure() {
        let backend = ScriptedBackend::new(
            vec![],
            ScriptedReply::FailAfter {
                partial: "half an".into(),
                failure: ScriptedFailure::Transport,
            },
        );
        let stream = backend.complete_streaming(request("x")).await.unwrap();
        assert_eq!(collect_reply(stream).await.unwrap_err().code(), "transport");
    }

    #[tokio::test]
    async fn first_match_then_default() {
        let backend = ScriptedBackend::new(
            vec![
                ScriptRule::new("selector-turn-1", ScriptedReply::text("environment")),
                ScriptRule::new("selector", ScriptedReply::text("never")),
            ],
            ScriptedReply::text("default"),
        );
        let go = |s: &str| {
            let backend = &backend;
            let req = request(s);
            async move { collect_reply(backend.complete_streaming(req).await.unwrap()).await.unwrap() }
        };
        assert_eq!(go("[selector-turn-1] pick").await, "environment");
        assert_eq!(go("nothing here").await, "default");
        assert_eq!(backend.request_count(), 2);
        assert_eq!(backend.requests()[0].last_content(), "[selector-turn-1] pick");
    }

    #[tokio::test]
    async fn replay_is_identical() {
        let backend = ScriptedBackend::new(
            vec![ScriptRule::new("selector-turn-1", ScriptedReply::text("environment"))],
            ScriptedReply::text("default"),
        );
        let a = collect_reply(backend.complete_streaming(request("selector-turn-1")).await.unwrap())
            .await
            .unwrap();
        let b = collect_reply(backend.complete_streaming(request("selector-turn-1")).await.unwrap())
            .await
            .unwrap();
        assert_eq!(a, b);
        let log = backend.requests();
        assert_eq!(log[0], log[1]);
    }

    proptest! {
        #[test]
        fn fragments_concatenate_to_reply(text in "[ a-zA-Z.,\n\t]{0,60}") {
            prop_assert_eq!(fragments(&text).concat(), text);
        }
    }
}
