//! Multi-agent gardening conversations.
//!
//! Role-specialized agents share one gardener profile, an LLM selector picks
//! who speaks next (never the same agent twice in a row), and every round
//! ends after a fixed number of agent messages. Sessions stream over a JSON
//! frame protocol and persist to append-only records.

pub mod agents;
pub mod checker;
pub mod config;
pub mod coordinator;
pub mod profile;
pub mod provider;
pub mod scenario;
pub mod session;
pub mod transcript;
pub mod wire;

pub use agents::{AgentId, AgentSet, AgentSpec, ColorTag};
pub use coordinator::{
    Coordinator, CoordinatorConfig, CoordinatorEvent, CoordinatorState, DecisionSource,
    RoundState, SelectorDecision,
};
pub use profile::{Experience, UserProfile};
pub use provider::{ChatProvider, ProviderError, ProviderRequest, TokenDelta};
pub use transcript::{Speaker, TranscriptEntry};
pub use session::{Session, SessionManager, SessionStore};
pub use wire::{ClientFrame, ServerFrame};
