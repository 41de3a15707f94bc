//! Shared fixtures for the integration tests: a local HTTP stub speaking the
//! chat-completions SSE format, and a seeded generator of random scripted
//! scenarios with an adversarial selector.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use cultivagents::agents::{AgentSet, AgentSpec, ColorTag};
use cultivagents::coordinator::CoordinatorConfig;
use cultivagents::profile::{Experience, UserProfile};
use cultivagents::provider::{
    ChatMessage, ChatProvider, ProviderError, ProviderRequest, ScriptRule, ScriptedBackend,
    ScriptedFailure, ScriptedReply,
};
use cultivagents::scenario::{PreparedScenario, Scenario};
use futures::StreamExt;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

// ---------------------------------------------------------------------------
// HTTP stub
// ---------------------------------------------------------------------------

/// What the stub sends back for one request.
#[derive(Debug, Clone)]
pub enum StubReply {
    /// 200 with an SSE body: one chunk per fragment, then (when `finish`)
    /// a finish_reason chunk and `[DONE]`. Without `finish` the connection
    /// simply closes after the fragments.
    Sse { fragments: Vec<String>, finish: bool },
    Status {
        status: u16,
        headers: Vec<(String, String)>,
        body: String,
    },
}

type Handler = Arc<dyn Fn(Value) -> Pin<Box<dyn Future<Output = StubReply> + Send>> + Send + Sync>;

pub struct StubServer {
    pub base_url: String,
    /// Every request body received, in arrival order.
    pub bodies: Arc<Mutex<Vec<Value>>>,
    task: tokio::task::JoinHandle<()>,
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

impl StubServer {
    pub async fn start<F, Fut>(handler: F) -> StubServer
    where
        F: Fn(Value) -> Fut + Send + Sync + 'static,
        Fut: Future<Output = StubReply> + Send + 'static,
    {
        let handler: Handler = Arc::new(move |v| Box::pin(handler(v)));
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let log = bodies.clone();
        let task = tokio::spawn(async move {
            loop {
                let Ok((socket, _)) = listener.accept().await else { return };
                let _ = socket.set_nodelay(true);
                let handler = handler.clone();
                let log = log.clone();
                tokio::spawn(async move {
                    let _ = serve_connection(socket, handler, log).await;
                });
            }
        });
        StubServer {
            base_url: format!("http://{addr}/v1"),
            bodies,
            task,
        }
    }

    /// A stub that answers every request with `replies` in order (the last
    /// one repeats).
    pub async fn sequence(replies: Vec<StubReply>) -> StubServer {
        let replies = Arc::new(replies);
        let next = Arc::new(Mutex::new(0usize));
        Self::start(move |_| {
            let replies = replies.clone();
            let next = next.clone();
            async move {
                let mut i = next.lock().unwrap();
                let reply = replies[(*i).min(replies.len() - 1)].clone();
                *i += 1;
                reply
            }
        })
        .await
    }

    /// A stub that decodes each request back into a [`ProviderRequest`] and
    /// answers with whatever `backend` would have streamed.
    pub async fn wrapping(backend: Arc<ScriptedBackend>) -> StubServer {
        Self::start(move |body| {
            let backend = backend.clone();
            async move { scripted_reply(&backend, &body).await }
        })
        .await
    }

    /// Like [`StubServer::wrapping`], with the backend replaceable between
    /// requests so one server (and one client) can serve many scenarios.
    pub async fn wrapping_slot(slot: Arc<Mutex<Arc<ScriptedBackend>>>) -> StubServer {
        Self::start(move |body| {
            let backend = slot.lock().unwrap().clone();
            async move { scripted_reply(&backend, &body).await }
        })
        .await
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.bodies.lock().unwrap().clone()
    }
}

async fn serve_connection(
    mut socket: TcpStream,
    handler: Handler,
    log: Arc<Mutex<Vec<Value>>>,
) -> std::io::Result<()> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        let n = socket.read(&mut chunk).await?;
        if n == 0 {
            return Ok(());
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break pos + 4;
        }
    };
    let head = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let request_line = head.lines().next().unwrap_or_default().to_string();
    let content_length = head
        .lines()
        .filter_map(|l| l.split_once(':'))
        .find(|(k, _)| k.trim().eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    while buf.len() < header_end + content_length {
        let n = socket.read(&mut chunk).await?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }

    if request_line.starts_with("GET") {
        let body = r#"{"object":"list","data":[]}"#;
        let resp = format!(
            "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        );
        socket.write_all(resp.as_bytes()).await?;
        return socket.shutdown().await;
    }

    let body: Value =
        serde_json::from_slice(&buf[header_end..header_end + content_length]).unwrap_or(Value::Null);
    log.lock().unwrap().push(body.clone());
    match handler(body).await {
        StubReply::Status {
            status,
            headers,
            body,
        } => {
            let mut resp = format!("HTTP/1.1 {status} Stub\r\ncontent-length: {}\r\nconnection: close\r\n", body.len());
            for (k, v) in headers {
                resp.push_str(&format!("{k}: {v}\r\n"));
            }
            resp.push_str("\r\n");
            resp.push_str(&body);
            socket.write_all(resp.as_bytes()).await?;
        }
        StubReply::Sse { fragments, finish } => {
            socket
                .write_all(
                    b"HTTP/1.1 200 OK\r\ncontent-type: text/event-stream\r\ncache-control: no-cache\r\nconnection: close\r\n\r\n",
                )
                .await?;
            for fragment in fragments {
                let chunk = json!({
                    "id": "chatcmpl-stub",
                    "object": "chat.completion.chunk",
                    "choices": [{"index": 0, "delta": {"content": fragment}, "finish_reason": null}],
                });
                socket.write_all(format!("data: {chunk}\n\n").as_bytes()).await?;
                socket.flush().await?;
            }
            if finish {
                let done = json!({
                    "id": "chatcmpl-stub",
                    "object": "chat.completion.chunk",
                    "choices": [{"index": 0, "delta": {}, "finish_reason": "stop"}],
                });
                socket.write_all(format!("data: {done}\n\ndata: [DONE]\n\n").as_bytes()).await?;
            }
        }
    }
    socket.shutdown().await
}

/// Rebuild the provider request a chat-completions body was made from.
pub fn request_from_body(body: &Value) -> ProviderRequest {
    let messages = body["messages"].as_array().cloned().unwrap_or_default();
    let system_prompt = messages
        .first()
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default()
        .to_string();
    let rest = messages
        .iter()
        .skip(1)
        .map(|m| {
            let content = m["content"].as_str().unwrap_or_default();
            match m["role"].as_str() {
                Some("user") => ChatMessage::user(content),
                Some("assistant") => {
                    let (name, text) = content.split_once(": ").unwrap_or(("", content));
                    ChatMessage::agent(name, text)
                }
                _ => ChatMessage::instruction(content),
            }
        })
        .collect();
    ProviderRequest {
        system_prompt,
        messages: rest,
        temperature: body["temperature"].as_f64().unwrap_or(0.0) as f32,
        max_tokens: body["max_tokens"].as_u64().unwrap_or(1) as u32,
        model_name: body["model"].as_str().unwrap_or_default().to_string(),
    }
}

async fn scripted_reply(backend: &ScriptedBackend, body: &Value) -> StubReply {
    let request = request_from_body(body);
    let stream = match backend.complete_streaming(request).await {
        Ok(stream) => stream,
        Err(ProviderError::Auth { status }) => {
            return StubReply::Status {
                status,
                headers: vec![],
                body: r#"{"error":{"message":"invalid key"}}"#.into(),
            }
        }
        Err(other) => panic!("stub cannot express {other:?}"),
    };
    let items: Vec<_> = stream.collect().await;
    let mut fragments = Vec::new();
    for item in items {
        match item {
            Ok(delta) if delta.is_final => {
                if !delta.text.is_empty() {
                    fragments.push(delta.text);
                }
                return StubReply::Sse {
                    fragments,
                    finish: true,
                };
            }
            Ok(delta) => fragments.push(delta.text),
            // A mid-stream fault: send what was produced and cut the stream.
            Err(_) => break,
        }
    }
    StubReply::Sse {
        fragments,
        finish: false,
    }
}

// ---------------------------------------------------------------------------
// Random scenarios
// ---------------------------------------------------------------------------

const LOCATIONS: &[&str] = &[
    "Atlanta, GA",
    "Portland, OR",
    "Tucson, AZ",
    "Duluth, MN",
    "Honolulu, HI",
    "São Paulo, Brazil",
    "Zone 7b",
];
const BACKGROUNDS: &[&str] = &["", "Korean", "Mexican-American", "Yoruba", "Punjabi", "Appalachian"];
const QUESTIONS: &[&str] = &[
    "When should I plant tomatoes?",
    "My basil leaves are turning yellow. Why?",
    "What can I grow in partial shade?",
    "Is it too late to start garlic?",
    "How did my grandmother use lemongrass?",
    "How often should I water seedlings?",
];
const SENTENCES: &[&str] = &[
    "Start seeds indoors six weeks before the last frost.",
    "Water deeply but infrequently so roots grow down.",
    "Your region's soil tends to be clay; add compost.",
    "Many families brew this leaf as a tea after meals.",
    "Mulch keeps the soil cool and moist in **summer**.",
    "Check the extension office's planting calendar.\n\n- kale\n- chard",
];
const NOISE: &[&str] = &["I pick", "hmm", "none of them", "the user", "", "ENVIRONMENT?!"];

/// Shape of the fault injected into a random scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// An agent request fails before streaming (HTTP 401 on the stub).
    Auth,
    /// An agent reply is cut off mid-stream.
    CutOff,
}

pub struct RandomScenario {
    pub seed: u64,
    pub agents: AgentSet,
    pub profile: UserProfile,
    pub messages: Vec<String>,
    pub selector_rules: Vec<ScriptRule>,
    pub selector_default: ScriptedReply,
    pub agent_rules: Vec<ScriptRule>,
    pub agent_default: ScriptedReply,
    pub fault: Fault,
}

pub fn scenario_time() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2025-04-15T14:30:00Z").unwrap().with_timezone(&Utc)
}

pub fn random_profile(rng: &mut impl Rng) -> UserProfile {
    UserProfile::new(
        *Experience::ALL.choose(rng).unwrap(),
        LOCATIONS.choose(rng).unwrap(),
        rng.random_range(1..=12),
        BACKGROUNDS.choose(rng).unwrap(),
    )
    .unwrap()
}

fn plugin(id: &str, name: &str, color: ColorTag) -> AgentSpec {
    AgentSpec::new(
        id,
        name,
        color,
        &format!("Questions about {id}"),
        &format!("You are the {name}. Keep answers short."),
    )
    .unwrap()
}

/// Seeded scenario. The selector is adversarial: from turn 2 on it first
/// nominates the agent that just spoke; its corrective reply is random
/// (eligible id, the same ineligible id again, or noise).
pub fn random_scenario(seed: u64, allow_faults: bool) -> RandomScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agents = AgentSet::builtin();
    if rng.random_bool(0.3) {
        let mut extra = vec![plugin("soil", "Soil Agent", ColorTag::Brown)];
        if rng.random_bool(0.5) {
            extra.push(plugin("pests", "Pest Agent", ColorTag::Red));
        }
        agents = agents.extend(extra).unwrap();
    }
    let ids: Vec<String> = agents.ids().iter().map(|a| a.to_string()).collect();
    let k = CoordinatorConfig::default().round_size;

    let pick_reply = |rng: &mut ChaCha8Rng, ineligible: Option<&str>| -> String {
        match rng.random_range(0..4) {
            0 => NOISE.choose(rng).unwrap().to_string(),
            1 => ineligible.unwrap_or("user").to_string(),
            2 => format!("`{}`.", ids.choose(rng).unwrap().to_uppercase()),
            _ => ids.choose(rng).unwrap().clone(),
        }
    };

    let mut selector_rules = Vec::new();
    for turn in 2..=k {
        for id in &ids {
            selector_rules.push(ScriptRule::new(
                format!("[selector-turn-{turn}] Previous speaker: {id}."),
                ScriptedReply::text(id.clone()),
            ));
            let retry = pick_reply(&mut rng, Some(id));
            selector_rules.push(ScriptRule::new(
                format!("[selector-turn-{turn}-retry] Previous speaker: {id}."),
                ScriptedReply::text(retry),
            ));
        }
    }
    let first = pick_reply(&mut rng, None);
    selector_rules.push(ScriptRule::new("[selector-turn-1]", ScriptedReply::text(first)));
    let first_retry = pick_reply(&mut rng, None);
    selector_rules.push(ScriptRule::new("[selector-turn-1-retry]", ScriptedReply::text(first_retry)));

    let fault = if allow_faults && rng.random_bool(0.15) {
        if rng.random_bool(0.5) {
            Fault::Auth
        } else {
            Fault::CutOff
        }
    } else {
        Fault::None
    };
    let mut agent_rules = Vec::new();
    if fault != Fault::None {
        let turn = rng.random_range(1..=k);
        let id = ids.choose(&mut rng).unwrap();
        let reply = match fault {
            Fault::Auth => ScriptedReply::Fail(ScriptedFailure::Auth),
            _ => ScriptedReply::FailAfter {
                partial: "Half an ans".into(),
                failure: ScriptedFailure::MalformedStream,
            },
        };
        agent_rules.push(ScriptRule::new(format!("[agent-turn-{turn} speaker={id}]"), reply));
    }
    for id in &ids {
        let n = rng.random_range(1..=2);
        let text = (0..n)
            .map(|_| *SENTENCES.choose(&mut rng).unwrap())
            .collect::<Vec<_>>()
            .join(" ");
        agent_rules.push(ScriptRule::new(format!("speaker={id}]"), ScriptedReply::text(text)));
    }

    let message_count = rng.random_range(1..=4);
    let messages = (0..message_count)
        .map(|_| QUESTIONS.choose(&mut rng).unwrap().to_string())
        .collect();

    RandomScenario {
        seed,
        profile: random_profile(&mut rng),
        agents,
        messages,
        selector_rules,
        selector_default: ScriptedReply::text("no idea"),
        agent_rules,
        agent_default: ScriptedReply::text("(no script)"),
        fault,
    }
}

impl RandomScenario {
    pub fn selector_backend(&self) -> ScriptedBackend {
        ScriptedBackend::new(self.selector_rules.clone(), self.selector_default.clone())
    }

    pub fn agent_backend(&self) -> ScriptedBackend {
        ScriptedBackend::new(self.agent_rules.clone(), self.agent_default.clone())
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            session_id: format!("random-{}", self.seed),
            created_at: scenario_time(),
            profile: toml::Value::Table(Default::default()),
            personas: None,
            coordinator: CoordinatorConfig::default(),
            selector: cultivagents::scenario::ScriptSpec {
                default: String::new(),
                rules: vec![],
            },
            agents: cultivagents::scenario::ScriptSpec {
                default: String::new(),
                rules: vec![],
            },
            messages: self.messages.clone(),
        }
    }

    /// Ready to run against the scripted backends.
    pub fn prepared(&self) -> PreparedScenario {
        PreparedScenario {
            scenario: self.scenario(),
            profile: self.profile.clone(),
            agents: self.agents.clone(),
            selector: self.selector_backend(),
            responder: self.agent_backend(),
        }
    }
}

/// Frequencies of a value list, for quick distribution checks.
pub fn histogram<T: Ord + Clone>(items: impl IntoIterator<Item = T>) -> BTreeMap<T, usize> {
    let mut map = BTreeMap::new();
    for item in items {
        *map.entry(item).or_insert(0) += 1;
    }
    map
}
