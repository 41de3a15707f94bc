//! WebSocket chat service.
//!
//! `GET /ws` speaks the JSON frame protocol, one frame per text message.
//! Frames from one connection are handled in arrival order, so a message sent
//! while a round is streaming waits for that round to finish. `GET /healthz`
//! reports service and provider reachability.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use cultivagents::agents::{load_agent_plugins, read_personas, AgentSet};
use cultivagents::config::ServiceConfig;
use cultivagents::profile::validate_profile_json;
use cultivagents::provider::{ChatProvider, OpenAiCompatible, ProviderHealth};
use cultivagents::scenario::{load_scenario, parse_scenario, PreparedScenario};
use cultivagents::session::{FrameSink, ServiceSettings, SessionManager, SessionStore};
use cultivagents::wire::{parse_client_frame, ClientFrame, ServerFrame};
use futures::{SinkExt, StreamExt};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::mpsc::{unbounded_channel, UnboundedSender};

/// Scripts used by `serve --scripted` when no scenario file is given.
pub const DEMO_SCENARIO: &str = include_str!("../scenarios/planting_question.toml");

pub struct AppState {
    pub manager: SessionManager,
    pub responder: Arc<dyn ChatProvider>,
    pub mode: &'static str,
}

/// Where the scripted backends come from in scripted mode.
#[derive(Debug, Clone)]
pub enum Mode {
    Live,
    /// Scripts from this scenario file, or the built-in demo when `None`.
    Scripted(Option<std::path::PathBuf>),
}

fn agent_set(config: &ServiceConfig) -> anyhow::Result<AgentSet> {
    let base = match &config.builtin_personas {
        Some(path) => {
            let specs = read_personas(path).with_context(|| format!("built-in personas {}", path.display()))?;
            AgentSet::new(specs).with_context(|| format!("built-in personas {}", path.display()))?
        }
        None => AgentSet::builtin(),
    };
    match &config.personas {
        Some(path) => load_agent_plugins(&base, path)
            .with_context(|| format!("persona plug-ins {}", path.display())),
        None => Ok(base),
    }
}

fn scripted_backends(scenario: Option<&Path>) -> anyhow::Result<PreparedScenario> {
    match scenario {
        Some(path) => load_scenario(path).with_context(|| format!("scenario {}", path.display())),
        None => parse_scenario(DEMO_SCENARIO, None).context("built-in demo scenario"),
    }
}

/// Build the service state. Fails (before anything binds) on invalid
/// personas, scripts or store, or a missing API key in live mode.
pub fn build_state(config: &ServiceConfig, mode: &Mode) -> anyhow::Result<Arc<AppState>> {
    let agents = agent_set(config)?;
    let (selector, responder, mode_name): (Arc<dyn ChatProvider>, Arc<dyn ChatProvider>, _) = match mode {
        Mode::Live => {
            let key = config.require_api_key()?;
            let p = &config.provider;
            let selector = OpenAiCompatible::with_timeout(&p.endpoint, key, p.selector_model(), p.timeout())
                .context("selector provider")?;
            let responder = OpenAiCompatible::with_timeout(&p.endpoint, key, &p.agent_model, p.timeout())
                .context("agent provider")?;
            (Arc::new(selector), Arc::new(responder), "live")
        }
        Mode::Scripted(path) => {
            let prepared = scripted_backends(path.as_deref())?;
            (Arc::new(prepared.selector), Arc::new(prepared.responder), "scripted")
        }
    };
    let store = SessionStore::open(&config.store_dir)
        .with_context(|| format!("session store {}", config.store_dir.display()))?;
    let settings = ServiceSettings {
        coordinator: config.coordinator.clone(),
        ..ServiceSettings::default()
    };
    let manager = SessionManager::new(agents, selector, responder.clone(), settings, store);
    Ok(Arc::new(AppState {
        manager,
        responder,
        mode: mode_name,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Bind the listener, naming the address on failure.
pub async fn bind(config: &ServiceConfig) -> anyhow::Result<TcpListener> {
    let addr = format!("{}:{}", config.bind, config.port);
    match TcpListener::bind(&addr).await {
        Ok(listener) => Ok(listener),
        Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => {
            bail!("cannot listen on {addr}: port {} is already in use", config.port)
        }
        Err(e) => Err(e).with_context(|| format!("cannot listen on {addr}")),
    }
}

/// Serve until Ctrl-C. `on_ready` receives the bound address.
pub async fn serve(
    config: &ServiceConfig,
    mode: &Mode,
    on_ready: impl FnOnce(SocketAddr),
) -> anyhow::Result<()> {
    let state = build_state(config, mode)?;
    let listener = bind(config).await?;
    let addr = listener.local_addr()?;
    tracing::info!(%addr, mode = state.mode, "chat service listening");
    on_ready(addr);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .context("server error")
}

fn health_json(h: &ProviderHealth) -> serde_json::Value {
    json!({"backend": h.backend, "reachable": h.reachable, "detail": h.detail})
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    let selector = state.manager.selector().health().await;
    let agents = state.responder.health().await;
    let healthy = selector.reachable && agents.reachable;
    let body = json!({
        "status": if healthy { "ok" } else { "degraded" },
        "mode": state.mode,
        "providers": {"selector": health_json(&selector), "agents": health_json(&agents)},
    });
    let status = if healthy {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    (status, Json(body)).into_response()
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, state))
}

async fn connection(socket: WebSocket, state: Arc<AppState>) {
    let (mut sender, mut receiver) = socket.split();
    let (out, mut queue) = unbounded_channel::<ServerFrame>();
    let writer = tokio::spawn(async move {
        while let Some(frame) = queue.recv().await {
            if sender.send(Message::Text(frame.to_json().into())).await.is_err() {
                break;
            }
        }
    });

    let mut sink = out;
    while let Some(Ok(message)) = receiver.next().await {
        match message {
            Message::Text(text) => handle_frame(&state, text.as_str(), &mut sink).await,
            Message::Close(_) => break,
            _ => {}
        }
    }
    drop(sink);
    let _ = writer.await;
}

/// Handle one client frame, sending every response frame to `out`.
pub async fn handle_frame(state: &AppState, text: &str, out: &mut UnboundedSender<ServerFrame>) {
    let manager = &state.manager;
    let frame = match parse_client_frame(text) {
        Ok(frame) => frame,
        Err(e) => return out.frame(ServerFrame::error("invalid_frame", e)),
    };
    match frame {
        ClientFrame::CreateSession { profile } => match validate_profile_json(&profile) {
            Ok(profile) => match manager.create_session(profile) {
                Ok(session) => out.frame(SessionManager::session_created_frame(&session)),
                Err(e) => out.frame(e.to_frame()),
            },
            Err(errors) => out.frame(ServerFrame::error("invalid_profile", errors.to_string())),
        },
        ClientFrame::UserMessage { session_id, text } => {
            if let Err(e) = manager.handle_user_message(&session_id, &text, out).await {
                out.frame(e.to_frame());
            }
        }
        ClientFrame::ExportRequest { session_id } => match manager.export(&session_id).await {
            Ok(text) => out.frame(ServerFrame::ExportPayload { text }),
            Err(e) => out.frame(e.to_frame()),
        },
        ClientFrame::ResumeSession { session_id } => match manager.resume(&session_id).await {
            Ok(frames) => frames.into_iter().for_each(|f| out.frame(f)),
            Err(e) => out.frame(e.to_frame()),
        },
    }
}
