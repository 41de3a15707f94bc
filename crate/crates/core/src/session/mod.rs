//! Sessions: lifecycle, persistence, and the transport-independent half of
//! the chat service.
//!
//! [`SessionManager`] owns every live session. Each session is guarded by
//! its own async mutex so at most one round runs per session, while distinct
//! sessions run concurrently and share only the provider handles.

mod export;
mod store;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use thiserror::Error;
use tokio::sync::mpsc::UnboundedSender;

pub use export::{export_transcript, EXPORT_TITLE};
pub use store::{valid_session_id, SessionStore, StoreError};

use crate::agents::{effective_prompt, AgentId, AgentSet, TemplateError};
use crate::coordinator::{
    default_selector_template, Coordinator, CoordinatorConfig, CoordinatorEvent, CoordinatorState,
    RoundError, RoundInput,
};
use crate::profile::UserProfile;
use crate::provider::ChatProvider;
use crate::transcript::TranscriptEntry;
use crate::wire::{frame_for_event, AgentInfo, ServerFrame};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub session_id: String,
    pub profile: UserProfile,
    pub agent_set: AgentSet,
    /// Effective prompt per agent, bound once at creation.
    pub prompts: BTreeMap<AgentId, String>,
    pub transcript: Vec<TranscriptEntry>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl Session {
    /// Highest round index in the transcript, 0 when empty.
    pub fn round_counter(&self) -> u32 {
        self.transcript.iter().map(|e| e.round_index).max().unwrap_or(0)
    }

    fn push(&mut self, entry: TranscriptEntry) {
        self.updated_at = entry.timestamp;
        self.transcript.push(entry);
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Always reports the same instant; used for reproducible runs.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

pub trait IdSource: Send + Sync {
    fn next_id(&self) -> String;
}

/// Unguessable random ids (UUID v4, hex without dashes).
#[derive(Debug, Default, Clone, Copy)]
pub struct RandomIds;

impl IdSource for RandomIds {
    fn next_id(&self) -> String {
        uuid::Uuid::new_v4().simple().to_string()
    }
}

/// `<prefix>-0001`, `<prefix>-0002`, ... for reproducible runs.
#[derive(Debug)]
pub struct SequentialIds {
    prefix: String,
    next: AtomicU64,
}

impl SequentialIds {
    pub fn new(prefix: &str) -> Self {
        Self {
            prefix: prefix.to_string(),
            next: AtomicU64::new(1),
        }
    }
}

impl IdSource for SequentialIds {
    fn next_id(&self) -> String {
        format!("{}-{:04}", self.prefix, self.next.fetch_add(1, Ordering::Relaxed))
    }
}

/// Always the same id; for single-session reproducible runs.
#[derive(Debug, Clone)]
pub struct FixedId(pub String);

impl IdSource for FixedId {
    fn next_id(&self) -> String {
        self.0.clone()
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("a round is already running for session `{0}`")]
    Busy(String),
    #[error("message text is empty")]
    EmptyMessage,
    #[error("cannot compose agent prompt: {0}")]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for SessionError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(id) | StoreError::InvalidId(id) => SessionError::UnknownSession(id),
            other => SessionError::Store(other),
        }
    }
}

impl SessionError {
    /// Error code sent to clients.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::UnknownSession(_) => "unknown_session",
            SessionError::Busy(_) => "busy",
            SessionError::EmptyMessage => "invalid_message",
            SessionError::Template(_) => "config",
            SessionError::Store(StoreError::Corrupt { .. }) => "corrupt_session",
            SessionError::Store(_) => "persistence",
        }
    }

    pub fn to_frame(&self) -> ServerFrame {
        ServerFrame::error(self.code(), self.to_string())
    }
}

/// Receives the frames (and, optionally, raw coordinator events) produced
/// while handling one client request.
pub trait FrameSink: Send {
    fn frame(&mut self, frame: ServerFrame);

    fn event(&mut self, _event: &CoordinatorEvent) {}
}

impl FrameSink for Vec<ServerFrame> {
    fn frame(&mut self, frame: ServerFrame) {
        self.push(frame);
    }
}

impl FrameSink for UnboundedSender<ServerFrame> {
    fn frame(&mut self, frame: ServerFrame) {
        // A closed channel means the client went away; the round still runs
        // to completion and is persisted.
        let _ = self.send(frame);
    }
}

/// Outcome of one user message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundReport {
    pub round: u32,
    /// Agent messages persisted for this round.
    pub messages: usize,
    /// `None` when the round completed; the error code otherwise.
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ServiceSettings {
    pub coordinator: CoordinatorConfig,
    pub selector_template: String,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        Self {
            coordinator: CoordinatorConfig::default(),
            selector_template: default_selector_template().to_string(),
        }
    }
}

const ID_ATTEMPTS: usize = 8;

struct LiveSession {
    session: Session,
    coordinator: CoordinatorState,
}

type Slot = Arc<tokio::sync::Mutex<LiveSession>>;

pub struct SessionManager {
    agents: AgentSet,
    selector: Arc<dyn ChatProvider>,
    responder: Arc<dyn ChatProvider>,
    settings: ServiceSettings,
    store: SessionStore,
    clock: Arc<dyn Clock>,
    ids: Arc<dyn IdSource>,
    live: Mutex<HashMap<String, Slot>>,
}

impl SessionManager {
    pub fn new(
        agents: AgentSet,
        selector: Arc<dyn ChatProvider>,
        responder: Arc<dyn ChatProvider>,
        settings: ServiceSettings,
        store: SessionStore,
    ) -> Self {
        Self {
            agents,
            selector,
            responder,
            settings,
            store,
            clock: Arc::new(SystemClock),
            ids: Arc::new(RandomIds),
            live: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_ids(mut self, ids: Arc<dyn IdSource>) -> Self {
        self.ids = ids;
        self
    }

    pub fn agents(&self) -> &AgentSet {
        &self.agents
    }

    pub fn settings(&self) -> &ServiceSettings {
        &self.settings
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    pub fn selector(&self) -> &Arc<dyn ChatProvider> {
        &self.selector
    }

    /// Start a session: bind the profile into every agent's effective prompt
    /// (with today's date) and persist the header before returning.
    pub fn create_session(&self, profile: UserProfile) -> Result<Session, SessionError> {
        let now = self.clock.now();
        let today = now.date_naive();
        let prompts = self
            .agents
            .iter()
            .map(|a| Ok((a.id().clone(), effective_prompt(a, &profile, today)?)))
            .collect::<Result<BTreeMap<_, _>, TemplateError>>()?;

        let mut session = Session {
            session_id: self.ids.next_id(),
            profile,
            agent_set: self.agents.clone(),
            prompts,
            transcript: Vec::new(),
            created_at: now,
            updated_at: now,
        };
        // Random ids do not collide in practice; bounded retries keep a
        // deterministic id source from spinning on an occupied store.
        let mut attempts = 1;
        loop {
            match self.store.create(&session) {
                Ok(()) => break,
                Err(StoreError::AlreadyExists(_)) if attempts < ID_ATTEMPTS => {
                    attempts += 1;
                    session.session_id = self.ids.next_id();
                }
                Err(e) => return Err(SessionError::Store(e)),
            }
        }
        let session_id = session.session_id.clone();
        self.live.lock().expect("session map poisoned").insert(
            session_id,
            Arc::new(tokio::sync::Mutex::new(LiveSession {
                session: session.clone(),
                coordinator: CoordinatorState::new(),
            })),
        );
        Ok(session)
    }

    pub fn session_created_frame(session: &Session) -> ServerFrame {
        ServerFrame::SessionCreated {
            session_id: session.session_id.clone(),
            agents: AgentInfo::list(&session.agent_set),
        }
    }

    /// Find a live session, restoring it from the store if needed.
    fn slot(&self, session_id: &str) -> Result<Slot, SessionError> {
        let mut live = self.live.lock().expect("session map poisoned");
        if let Some(slot) = live.get(session_id) {
            return Ok(slot.clone());
        }
        let session = self.store.load(session_id)?;
        let slot = Arc::new(tokio::sync::Mutex::new(LiveSession {
            session,
            coordinator: CoordinatorState::new(),
        }));
        live.insert(session_id.to_string(), slot.clone());
        Ok(slot)
    }

    /// Snapshot of a session's current state.
    pub async fn session(&self, session_id: &str) -> Result<Session, SessionError> {
        let slot = self.slot(session_id)?;
        let guard = slot.lock().await;
        Ok(guard.session.clone())
    }

    /// Run one round for `text`. Fails with [`SessionError::Busy`] when a
    /// round is already running for this session. Provider failures do not
    /// fail the call: they are reported through an error frame and in the
    /// returned [`RoundReport`], with completed messages kept.
    pub async fn handle_user_message(
        &self,
        session_id: &str,
        text: &str,
        out: &mut dyn FrameSink,
    ) -> Result<RoundReport, SessionError> {
        let slot = self.slot(session_id)?;
        let mut guard = slot
            .try_lock()
            .map_err(|_| SessionError::Busy(session_id.to_string()))?;
        if text.trim().is_empty() {
            return Err(SessionError::EmptyMessage);
        }
        let LiveSession {
            session,
            coordinator,
        } = &mut *guard;

        let round = session.round_counter() + 1;
        let user_entry = TranscriptEntry::user(round, text, self.clock.now());
        self.store.append(&session.session_id, &user_entry)?;
        session.push(user_entry);

        let agents = session.agent_set.clone();
        let prompts = session.prompts.clone();
        let prior: Vec<TranscriptEntry> = session
            .transcript
            .iter()
            .filter(|e| e.round_index < round)
            .cloned()
            .collect();
        let transcript_len = session.transcript.len();
        let coordinator_run = Coordinator {
            agents: &agents,
            prompts: &prompts,
            selector: self.selector.as_ref(),
            responder: self.responder.as_ref(),
            selector_template: &self.settings.selector_template,
            config: &self.settings.coordinator,
        };

        let store = &self.store;
        let clock = &self.clock;
        let mut persisted = 0usize;
        let mut sink = |event: CoordinatorEvent| -> Result<(), String> {
            if let CoordinatorEvent::MessageEnd {
                round,
                turn,
                agent_id,
                content,
            } = &event
            {
                let entry = TranscriptEntry::agent(
                    agent_id.clone(),
                    *round,
                    *turn as u32,
                    content.clone(),
                    clock.now(),
                );
                store
                    .append(&session.session_id, &entry)
                    .map_err(|e| e.to_string())?;
                session.push(entry);
                persisted += 1;
            }
            out.event(&event);
            out.frame(frame_for_event(&event));
            Ok(())
        };

        let result = coordinator_run
            .run_round(
                coordinator,
                RoundInput {
                    round_index: round,
                    user_message: text,
                    prior_context: &prior,
                    transcript_len,
                },
                &mut sink,
            )
            .await;
        Ok(RoundReport {
            round,
            messages: persisted,
            error: result.err().map(|e: RoundError| e.code()),
        })
    }

    pub async fn export(&self, session_id: &str) -> Result<String, SessionError> {
        let slot = self.slot(session_id)?;
        let guard = slot.lock().await;
        Ok(export_transcript(&guard.session))
    }

    /// Frames that re-attach a client: `session_created`, one `replay_entry`
    /// per persisted entry, then `replay_complete`.
    pub async fn resume(&self, session_id: &str) -> Result<Vec<ServerFrame>, SessionError> {
        let slot = self.slot(session_id)?;
        let guard = slot.lock().await;
        let session = &guard.session;
        let mut frames = vec![Self::session_created_frame(session)];
        frames.extend(session.transcript.iter().map(ServerFrame::replay));
        frames.push(ServerFrame::ReplayComplete {
            entries: session.transcript.len(),
        });
        Ok(frames)
    }

    /// Drop in-memory state for a session; it is restored from the store on
    /// next use.
    pub fn evict(&self, session_id: &str) {
        self.live.lock().expect("session map poisoned").remove(session_id);
    }
}
