//! JSON frames exchanged with chat clients, one frame per WebSocket text
//! message. Field names and `type` tags are a fixed contract with the web
//! client.

use serde::{Deserialize, Serialize};

use crate::agents::{AgentId, AgentSet, ColorTag};
use crate::coordinator::CoordinatorEvent;
use crate::transcript::TranscriptEntry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientFrame {
    CreateSession {
        /// Validated server-side; kept loose so every invalid field can be
        /// reported.
        profile: serde_json::Value,
    },
    UserMessage {
        session_id: String,
        text: String,
    },
    ExportRequest {
        session_id: String,
    },
    /// Reattach to a persisted session after a reconnect.
    ResumeSession {
        session_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentInfo {
    pub id: AgentId,
    pub display_name: String,
    pub color: ColorTag,
}

impl AgentInfo {
    pub fn list(agents: &AgentSet) -> Vec<AgentInfo> {
        agents
            .iter()
            .map(|a| AgentInfo {
                id: a.id().clone(),
                display_name: a.display_name().to_string(),
                color: a.color(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    SessionCreated {
        session_id: String,
        agents: Vec<AgentInfo>,
    },
    RoundStarted {
        round: u32,
    },
    SpeakerSelected {
        agent_id: AgentId,
        turn: usize,
    },
    MessageStart {
        agent_id: AgentId,
        turn: usize,
    },
    TokenDelta {
        text: String,
    },
    MessageEnd,
    RoundComplete,
    Error {
        code: String,
        detail: String,
    },
    ExportPayload {
        text: String,
    },
    /// One persisted transcript entry, sent after `session_created` when a
    /// client resumes a session.
    ReplayEntry {
        speaker: String,
        round: u32,
        turn: u32,
        content: String,
    },
    ReplayComplete {
        entries: usize,
    },
}

impl ServerFrame {
    pub fn error(code: &str, detail: impl Into<String>) -> Self {
        ServerFrame::Error {
            code: code.to_string(),
            detail: detail.into(),
        }
    }

    pub fn replay(entry: &TranscriptEntry) -> Self {
        ServerFrame::ReplayEntry {
            speaker: entry.speaker.to_string(),
            round: entry.round_index,
            turn: entry.turn_within_round,
            content: entry.content.clone(),
        }
    }

    /// Compact JSON text of the frame (never contains a raw newline).
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames always serialize")
    }
}

/// Client-facing frame for a coordinator event.
pub fn frame_for_event(event: &CoordinatorEvent) -> ServerFrame {
    match event {
        CoordinatorEvent::RoundStarted { round, .. } => ServerFrame::RoundStarted { round: *round },
        CoordinatorEvent::SpeakerSelected { agent_id, turn, .. } => ServerFrame::SpeakerSelected {
            agent_id: agent_id.clone(),
            turn: *turn,
        },
        CoordinatorEvent::MessageStart { agent_id, turn, .. } => ServerFrame::MessageStart {
            agent_id: agent_id.clone(),
            turn: *turn,
        },
        CoordinatorEvent::TokenDelta { text, .. } => ServerFrame::TokenDelta { text: text.clone() },
        CoordinatorEvent::MessageEnd { .. } => ServerFrame::MessageEnd,
        CoordinatorEvent::RoundComplete { .. } => ServerFrame::RoundComplete,
        CoordinatorEvent::RoundError { code, detail, .. } => ServerFrame::Error {
            code: "round_error".into(),
            detail: format!("{code}: {detail}"),
        },
    }
}

pub fn parse_client_frame(text: &str) -> Result<ClientFrame, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}
