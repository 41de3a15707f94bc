//! OpenAI-compatible `/chat/completions` backend with SSE streaming.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use futures::stream::BoxStream;
use futures::StreamExt;
use serde_json::{json, Value};

use super::sse::SseDecoder;
use super::{
    ChatProvider, DeltaStream, ProviderError, ProviderHealth, ProviderRequest, SpeakerLabel,
    TokenDelta, DEFAULT_TIMEOUT,
};

/// Longest `retry-after` we are willing to sleep for before the one retry.
const MAX_RETRY_AFTER: Duration = Duration::from_secs(30);

/// The shortest decimal that round-trips `value` as `f32` (0.7, not
/// 0.699999988079071 as a plain widening would give).
fn decimal(value: f32) -> f64 {
    value.to_string().parse().unwrap_or(f64::from(value))
}

/// Translate a request into the chat-completions JSON body. Agent messages
/// become assistant turns with a `"<DisplayName>: "` content prefix, since
/// the wire format has no speaker field.
pub fn chat_request_body(request: &ProviderRequest, default_model: &str) -> Value {
    let mut messages = Vec::with_capacity(request.messages.len() + 1);
    messages.push(json!({"role": "system", "content": request.system_prompt}));
    for m in &request.messages {
        let entry = match &m.speaker {
            SpeakerLabel::User => json!({"role": "user", "content": m.content}),
            SpeakerLabel::Agent(name) => {
                json!({"role": "assistant", "content": format!("{name}: {}", m.content)})
            }
            SpeakerLabel::Instruction => json!({"role": "system", "content": m.content}),
        };
        messages.push(entry);
    }
    let model = if request.model_name.is_empty() {
        default_model
    } else {
        &request.model_name
    };
    json!({
        "model": model,
        "messages": messages,
        "temperature": decimal(request.temperature),
        "max_tokens": request.max_tokens,
        "stream": true,
    })
}

pub struct OpenAiCompatible {
    client: reqwest::Client,
    completions_url: String,
    models_url: String,
    api_key: String,
    model_name: String,
    timeout: Duration,
    retries: AtomicU32,
}

impl std::fmt::Debug for OpenAiCompatible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiCompatible")
            .field("completions_url", &self.completions_url)
            .field("model_name", &self.model_name)
            .finish_non_exhaustive()
    }
}

impl OpenAiCompatible {
    /// `endpoint` is either the API base (`https://host/v1`) or the full
    /// `.../chat/completions` URL.
    pub fn new(endpoint: &str, api_key: &str, model_name: &str) -> Result<Self, ProviderError> {
        Self::with_timeout(endpoint, api_key, model_name, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(
        endpoint: &str,
        api_key: &str,
        model_name: &str,
        timeout: Duration,
    ) -> Result<Self, ProviderError> {
        if api_key.trim().is_empty() {
            return Err(ProviderError::InvalidRequest("API key is empty".into()));
        }
        let endpoint = endpoint.trim().trim_end_matches('/');
        let base = endpoint.strip_suffix("/chat/completions").unwrap_or(endpoint);
        reqwest::Url::parse(base)
            .map_err(|e| ProviderError::InvalidRequest(format!("bad endpoint `{base}`: {e}")))?;
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            completions_url: format!("{base}/chat/completions"),
            models_url: format!("{base}/models"),
            api_key: api_key.to_string(),
            model_name: model_name.to_string(),
            timeout,
            retries: AtomicU32::new(0),
        })
    }

    /// Number of retries issued over the lifetime of this handle.
    pub fn retry_count(&self) -> u32 {
        self.retries.load(Ordering::Relaxed)
    }

    fn map_send_error(&self, e: reqwest::Error) -> ProviderError {
        if e.is_timeout() {
            ProviderError::Timeout(self.timeout)
        } else {
            ProviderError::Transport(e.to_string())
        }
    }

    async fn send(&self, body: &Value) -> Result<reqwest::Response, ProviderError> {
        let mut retried = false;
        loop {
            let sent = self
                .client
                .post(&self.completions_url)
                .bearer_auth(&self.api_key)
                .header(reqwest::header::ACCEPT, "text/event-stream")
                .json(body)
                .send()
                .await;
            let response = match sent {
                Ok(r) => r,
                Err(e) => {
                    let err = self.map_send_error(e);
                    if matches!(err, ProviderError::Transport(_)) && !retried {
                        retried = true;
                        self.retries.fetch_add(1, Ordering::Relaxed);
                        continue;
                    }
                    return Err(err);
                }
            };
            let status = response.status().as_u16();
            match status {
                200..=299 => return Ok(response),
                401 | 403 => return Err(ProviderError::Auth { status }),
                429 => {
                    let retry_after = response
                        .headers()
                        .get(reqwest::header::RETRY_AFTER)
                        .and_then(|v| v.to_str().ok())
                        .and_then(|v| v.trim().parse::<u64>().ok())
                        .map(Duration::from_secs);
                    if retried {
                        return Err(ProviderError::RateLimited { retry_after });
                    }
                    retried = true;
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    let wait = retry_after.unwrap_or(Duration::from_secs(1)).min(MAX_RETRY_AFTER);
                    tracing::warn!(?wait, "rate limited, retrying once");
                    tokio::time::sleep(wait).await;
                }
                500..=599 => {
                    if retried {
                        return Err(ProviderError::Transient { status });
                    }
                    retried = true;
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!(status, "upstream error, retrying once");
                }
                _ => {
                    let body = response.text().await.unwrap_or_default();
                    return Err(ProviderError::Status { status, body });
                }
            }
        }
    }
}

struct StreamState {
    body: BoxStream<'static, Result<Bytes, reqwest::Error>>,
    decoder: SseDecoder,
    queue: VecDeque<Result<TokenDelta, ProviderError>>,
    finished: bool,
    saw_finish_reason: bool,
    timeout: Duration,
}

impl StreamState {
    /// Parse one SSE data payload into queued deltas.
    fn handle_event(&mut self, data: &str) {
        if data.trim() == "[DONE]" {
            self.queue.push_back(Ok(TokenDelta::finish("")));
            self.finished = true;
            return;
        }
        let value: Value = match serde_json::from_str(data) {
            Ok(v) => v,
            Err(e) => {
                self.fail(ProviderError::MalformedStream(format!("bad chunk JSON: {e}")));
                return;
            }
        };
        if let Some(err) = value.get("error") {
            self.fail(ProviderError::MalformedStream(format!("server error in stream: {err}")));
            return;
        }
        let Some(choice) = value.get("choices").and_then(|c| c.get(0)) else {
            // Usage-only and keep-alive chunks carry no choices.
            return;
        };
        if let Some(text) = choice
            .get("delta")
            .and_then(|d| d.get("content"))
            .and_then(Value::as_str)
        {
            if !text.is_empty() {
                self.queue.push_back(Ok(TokenDelta::fragment(text)));
            }
        }
        if choice.get("finish_reason").is_some_and(|r| !r.is_null()) {
            self.saw_finish_reason = true;
        }
    }

    fn fail(&mut self, err: ProviderError) {
        self.queue.push_back(Err(err));
        self.finished = true;
    }
}

/// Turn a streaming HTTP response into deltas. The request is aborted when
/// the returned stream is dropped.
fn delta_stream(response: reqwest::Response, timeout: Duration) -> DeltaStream {
    let state = StreamState {
        body: response.bytes_stream().boxed(),
        decoder: SseDecoder::new(),
        queue: VecDeque::new(),
        finished: false,
        saw_finish_reason: false,
        timeout,
    };
    futures::stream::unfold(Some(state), |state| async move {
        let mut state = state?;
        loop {
            if let Some(item) = state.queue.pop_front() {
                let stop = state.finished && state.queue.is_empty();
                return Some((item, if stop { None } else { Some(state) }));
            }
            if state.finished {
                return None;
            }
            match state.body.next().await {
                Some(Ok(chunk)) => {
                    for event in state.decoder.push(&chunk) {
                        if !state.finished {
                            state.handle_event(&event);
                        }
                    }
                }
                Some(Err(e)) => {
                    let err = if e.is_timeout() {
                        ProviderError::Timeout(state.timeout)
                    } else {
                        ProviderError::Transport(e.to_string())
                    };
                    state.fail(err);
                }
                None => {
                    for event in state.decoder.finish() {
                        if !state.finished {
                            state.handle_event(&event);
                        }
                    }
                    if !state.finished {
                        if state.saw_finish_reason {
                            state.queue.push_back(Ok(TokenDelta::finish("")));
                            state.finished = true;
                        } else {
                            state.fail(ProviderError::MalformedStream(
                                "stream closed before [DONE]".into(),
                            ));
                        }
                    }
                }
            }
        }
    })
    .boxed()
}

#[async_trait]
impl ChatProvider for OpenAiCompatible {
    async fn complete_streaming(&self, request: ProviderRequest) -> Result<DeltaStream, ProviderError> {
        request.validate()?;
        let body = chat_request_body(&request, &self.model_name);
        let response = self.send(&body).await?;
        Ok(delta_stream(response, self.timeout))
    }

    async fn health(&self) -> ProviderHealth {
        let probe = self
            .client
            .get(&self.models_url)
            .bearer_auth(&self.api_key)
            .timeout(Duration::from_secs(5))
            .send()
            .await;
        match probe {
            Ok(r) => ProviderHealth {
                backend: "openai-compatible".into(),
                reachable: true,
                detail: format!("GET /models -> HTTP {}", r.status().as_u16()),
            },
            Err(e) => ProviderHealth {
                backend: "openai-compatible".into(),
                reachable: false,
                detail: e.to_string(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::ChatMessage;

    #[test]
    fn body_has_system_plus_messages() {
        let req = ProviderRequest {
            system_prompt: "You are helpful.".into(),
            messages: vec![
                ChatMessage::user("When do I plant garlic?"),
                ChatMessage::agent("Environmental Agent", "In October."),
            ],
            temperature: 0.7,
            max_tokens: 700,
            model_name: String::new(),
        };
        let body = chat_request_body(&req, "gpt-test");
        let messages = body["messages"].as_array().unwrap();
        assert_eq!(messages.len(), 3);
        assert_eq!(messages[0]["role"], "system");
        assert_eq!(messages[2]["content"], "Environmental Agent: In October.");
        assert_eq!(body["model"], "gpt-test");
        assert_eq!(body["stream"], true);
    }

    #[test]
    fn request_model_overrides_default() {
        let req = ProviderRequest {
            system_prompt: String::new(),
            messages: vec![ChatMessage::user("x")],
            temperature: 0.0,
            max_tokens: 1,
            model_name: "selector-model".into(),
        };
        assert_eq!(chat_request_body(&req, "default")["model"], "selector-model");
    }

    #[test]
    fn endpoint_normalization() {
        let a = OpenAiCompatible::new("http://localhost:9/v1/", "k", "m").unwrap();
        let b = OpenAiCompatible::new("http://localhost:9/v1/chat/completions", "k", "m").unwrap();
        assert_eq!(a.completions_url, "http://localhost:9/v1/chat/completions");
        assert_eq!(a.completions_url, b.completions_url);
        assert_eq!(a.models_url, "http://localhost:9/v1/models");
        assert!(OpenAiCompatible::new("http://localhost:9/v1", " ", "m").is_err());
        assert!(OpenAiCompatible::new("not a url", "k", "m").is_err());
    }

    fn state() -> StreamState {
        StreamState {
            body: futures::stream::empty().boxed(),
            decoder: SseDecoder::new(),
            queue: VecDeque::new(),
            finished: false,
            saw_finish_reason: false,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    #[test]
    fn chunk_parsing() {
        let mut s = state();
        s.handle_event(r#"{"choices":[{"index":0,"delta":{"role":"assistant"}}]}"#);
        s.handle_event(r#"{"choices":[{"index":0,"delta":{"content":"Gar"}}]}"#);
        s.handle_event(r#"{"choices":[{"index":0,"delta":{},"finish_reason":"stop"}]}"#);
        s.handle_event("[DONE]");
        let items: Vec<_> = s.queue.drain(..).map(Result::unwrap).collect();
        assert_eq!(items, vec![TokenDelta::fragment("Gar"), TokenDelta::finish("")]);
        assert!(s.saw_finish_reason && s.finished);

        let mut s = state();
        s.handle_event("{not json");
        assert_eq!(s.queue.pop_front().unwrap().unwrap_err().code(), "malformed_stream");
    }
}
