//! Round lifecycle: speaker selection with previous-speaker exclusion,
//! fixed-length rounds, and selector-history reset.
//!
//! A round starts with one user message and runs `k` agent turns. Before each
//! turn the eligible set is the full agent set minus the agent that spoke
//! last in this round; the selector model picks one eligible agent (one
//! retry on an unusable reply, then a deterministic round-robin fallback).
//! The chosen agent sees its effective prompt, a window of earlier rounds,
//! and everything said so far in the current round. After turn `k` the
//! round-local selector history is cleared; the session transcript is kept.

use std::collections::BTreeMap;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentId, AgentSet};
use crate::provider::{
    well_formed, ChatMessage, ChatProvider, ProviderError, ProviderRequest, DEFAULT_MAX_TOKENS,
};
use crate::transcript::{Speaker, TranscriptEntry};

pub const DEFAULT_ROUND_SIZE: usize = 3;
pub const DEFAULT_CONTEXT_WINDOW: usize = 30;

const SELECTOR_TEMPLATE: &str = include_str!("../data/selector_prompt.txt");
const ELIGIBLE_PLACEHOLDER: &str = "{{eligible_agents}}";

pub fn default_selector_template() -> &'static str {
    SELECTOR_TEMPLATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordinatorConfig {
    /// Agent messages per round (`k`).
    pub round_size: usize,
    /// Transcript entries from earlier rounds shown to each agent (`W`).
    pub context_window: usize,
    pub selector_temperature: f32,
    pub agent_temperature: f32,
    pub selector_max_tokens: u32,
    pub agent_max_tokens: u32,
    /// Empty selects the backend's configured model.
    pub selector_model: String,
    pub agent_model: String,
    /// Also exclude the previous round's last speaker from turn 1.
    pub exclude_across_rounds: bool,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            round_size: DEFAULT_ROUND_SIZE,
            context_window: DEFAULT_CONTEXT_WINDOW,
            selector_temperature: 0.0,
            agent_temperature: 0.7,
            selector_max_tokens: 16,
            agent_max_tokens: DEFAULT_MAX_TOKENS,
            selector_model: String::new(),
            agent_model: String::new(),
            exclude_across_rounds: false,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("invalid coordinator config: {0}")]
pub struct ConfigError(pub String);

impl CoordinatorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.round_size < 1 {
            return Err(ConfigError("round_size must be >= 1".into()));
        }
        if !(self.selector_temperature >= 0.0 && self.agent_temperature >= 0.0) {
            return Err(ConfigError("temperatures must be >= 0".into()));
        }
        if self.selector_max_tokens == 0 || self.agent_max_tokens == 0 {
            return Err(ConfigError("max token limits must be >= 1".into()));
        }
        Ok(())
    }
}

/// One entry of the round-local selector history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub speaker: Speaker,
    pub content: String,
}

/// State of the round in progress.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundState {
    round_index: u32,
    completed_turns: usize,
    k: usize,
    selector_history: Vec<HistoryEntry>,
    previous_speaker: Option<AgentId>,
}

impl RoundState {
    /// Start round `round_index` with the user's message as the only history
    /// entry.
    fn begin(&mut self, round_index: u32, k: usize, user_message: &str) {
        self.round_index = round_index;
        self.k = k;
        self.completed_turns = 0;
        self.previous_speaker = None;
        self.selector_history.push(HistoryEntry {
            speaker: Speaker::User,
            content: user_message.to_string(),
        });
    }

    fn record(&mut self, agent: &AgentId, content: &str) {
        debug_assert!(self.completed_turns < self.k);
        self.selector_history.push(HistoryEntry {
            speaker: Speaker::Agent(agent.clone()),
            content: content.to_string(),
        });
        self.previous_speaker = Some(agent.clone());
        self.completed_turns += 1;
    }

    /// `H ← ∅`. The previous-speaker context goes with it.
    fn reset(&mut self) {
        self.selector_history.clear();
        self.previous_speaker = None;
        self.completed_turns = 0;
    }

    pub fn round_index(&self) -> u32 {
        self.round_index
    }

    /// The turn about to be selected, in `1..=k`.
    pub fn turn(&self) -> usize {
        (self.completed_turns + 1).min(self.k.max(1))
    }

    pub fn selector_history(&self) -> &[HistoryEntry] {
        &self.selector_history
    }

    pub fn previous_speaker(&self) -> Option<&AgentId> {
        self.previous_speaker.as_ref()
    }
}

/// Per-session coordinator state that outlives individual rounds.
#[derive(Debug, Clone, Default)]
pub struct CoordinatorState {
    round: RoundState,
    fallback_cursor: usize,
    last_round_speaker: Option<AgentId>,
}

impl CoordinatorState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn round(&self) -> &RoundState {
        &self.round
    }

    /// Index into the agent set where the next fallback search starts.
    pub fn fallback_cursor(&self) -> usize {
        self.fallback_cursor
    }

    pub fn set_fallback_cursor(&mut self, cursor: usize) {
        self.fallback_cursor = cursor;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Model,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorDecision {
    pub chosen: AgentId,
    pub source: DecisionSource,
    /// Selector calls made for this decision.
    pub attempts: u32,
}

/// Everything the coordinator reports while running a round. Serialized as
/// one JSON object per line in event logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum CoordinatorEvent {
    RoundStarted {
        round: u32,
        /// Length of the selector history once the user message is queued.
        selector_history_len: usize,
        /// Session transcript length including this round's user message.
        transcript_len: usize,
    },
    SpeakerSelected {
        round: u32,
        turn: usize,
        agent_id: AgentId,
        eligible: Vec<AgentId>,
        source: DecisionSource,
        attempts: u32,
    },
    MessageStart {
        round: u32,
        turn: usize,
        agent_id: AgentId,
    },
    TokenDelta {
        round: u32,
        turn: usize,
        text: String,
    },
    MessageEnd {
        round: u32,
        turn: usize,
        agent_id: AgentId,
        content: String,
    },
    RoundComplete {
        round: u32,
        messages: usize,
    },
    RoundError {
        round: u32,
        turn: usize,
        code: String,
        detail: String,
    },
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RoundError {
    #[error("selector failed at turn {turn}: {source}")]
    Selector { turn: usize, source: ProviderError },
    #[error("agent `{agent}` failed at turn {turn}: {source}")]
    Agent {
        turn: usize,
        agent: AgentId,
        source: ProviderError,
    },
    #[error("event sink rejected an event at turn {turn}: {detail}")]
    Sink { turn: usize, detail: String },
    #[error("no effective prompt cached for agent `{0}`")]
    MissingPrompt(AgentId),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl RoundError {
    pub fn code(&self) -> String {
        match self {
            RoundError::Selector { source, .. } => format!("selector_{}", source.code()),
            RoundError::Agent { source, .. } => format!("agent_{}", source.code()),
            RoundError::Sink { .. } => "persistence".into(),
            RoundError::MissingPrompt(_) => "missing_prompt".into(),
            RoundError::Config(_) => "config".into(),
        }
    }
}

/// Result of a round that ran to completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundSummary {
    pub round: u32,
    pub decisions: Vec<SelectorDecision>,
    pub messages: Vec<(AgentId, String)>,
}

/// `𝒜 \ {previous}` in agent-set order; all agents when there is no
/// previous speaker.
pub fn eligible_agents(all: &AgentSet, previous: Option<&str>) -> Vec<AgentId> {
    all.iter()
        .map(|a| a.id().clone())
        .filter(|id| Some(id.as_str()) != previous)
        .collect()
}

/// Find the eligible id named by a selector reply. Ids are matched
/// case-insensitively as whole tokens; when several eligible ids appear, the
/// first occurrence wins. Ineligible ids are ignored.
pub fn parse_selection(reply: &str, eligible: &[AgentId]) -> Option<AgentId> {
    reply
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
        .filter(|token| !token.is_empty())
        .find_map(|token| {
            eligible
                .iter()
                .find(|id| id.eq_ignore_ascii_case(token))
                .cloned()
        })
}

/// Round-robin fallback: the first eligible agent at or after `cursor` in
/// agent-set order. The cursor moves past the chosen agent.
pub fn fallback_choice(all: &AgentSet, eligible: &[AgentId], cursor: &mut usize) -> AgentId {
    let n = all.len();
    for step in 0..n {
        let idx = (*cursor + step) % n;
        let id = all.iter().nth(idx).expect("index within set").id();
        if eligible.contains(id) {
            *cursor = (idx + 1) % n;
            return id.clone();
        }
    }
    // Unreachable for a valid set: eligible is never empty.
    eligible[0].clone()
}

/// Fill the selector template with the eligible agents' ids and
/// descriptions.
pub fn render_selector_prompt(template: &str, all: &AgentSet, eligible: &[AgentId]) -> String {
    let listing = all
        .iter()
        .filter(|a| eligible.contains(a.id()))
        .map(|a| format!("- {}: {}", a.id(), a.description()))
        .collect::<Vec<_>>()
        .join("\n");
    template.replace(ELIGIBLE_PLACEHOLDER, &listing)
}

fn history_messages(all: &AgentSet, history: &[HistoryEntry]) -> Vec<ChatMessage> {
    history
        .iter()
        .map(|h| match &h.speaker {
            Speaker::User => ChatMessage::user(&h.content),
            Speaker::Agent(id) => ChatMessage::agent(all.display_name(id), &h.content),
        })
        .collect()
}

fn selector_marker(turn: usize, previous: Option<&AgentId>, eligible: &[AgentId]) -> String {
    let previous = previous.map_or("none", |p| p.as_str());
    let ids = eligible.iter().map(AgentId::as_str).collect::<Vec<_>>().join(", ");
    format!("[selector-turn-{turn}] Previous speaker: {previous}. Eligible agents: {ids}.")
}

/// What the selector sees for one turn.
#[derive(Debug, Clone, Copy)]
pub struct SelectionInput<'a> {
    pub turn: usize,
    pub previous: Option<&'a AgentId>,
    pub history: &'a [HistoryEntry],
    pub eligible: &'a [AgentId],
}

/// Ask the selector model for the next speaker. One retry with a corrective
/// instruction when the reply names no eligible agent, then the round-robin
/// fallback. Transport failures are returned to the caller.
pub async fn select_speaker(
    selector: &dyn ChatProvider,
    template: &str,
    all: &AgentSet,
    input: SelectionInput<'_>,
    cursor: &mut usize,
    config: &CoordinatorConfig,
) -> Result<SelectorDecision, ProviderError> {
    let system_prompt = render_selector_prompt(template, all, input.eligible);
    let marker = selector_marker(input.turn, input.previous, input.eligible);
    let mut messages = history_messages(all, input.history);
    messages.push(ChatMessage::instruction(format!(
        "{marker} Reply with exactly one agent id from the eligible list."
    )));

    for attempt in 1..=2u32 {
        let request = ProviderRequest {
            system_prompt: system_prompt.clone(),
            messages: messages.clone(),
            temperature: config.selector_temperature,
            max_tokens: config.selector_max_tokens,
            model_name: config.selector_model.clone(),
        };
        let reply = crate::provider::collect_reply(selector.complete_streaming(request).await?).await?;
        if let Some(chosen) = parse_selection(&reply, input.eligible) {
            return Ok(SelectorDecision {
                chosen,
                source: DecisionSource::Model,
                attempts: attempt,
            });
        }
        tracing::debug!(turn = input.turn, attempt, reply = %reply, "selector reply named no eligible agent");
        let retry_marker = marker.replacen(
            &format!("[selector-turn-{}]", input.turn),
            &format!("[selector-turn-{}-retry]", input.turn),
            1,
        );
        messages.pop();
        messages.push(ChatMessage::instruction(format!(
            "{retry_marker} Your previous reply did not name an eligible agent. Reply with exactly one of the eligible ids and nothing else."
        )));
    }

    Ok(SelectorDecision {
        chosen: fallback_choice(all, input.eligible, cursor),
        source: DecisionSource::Fallback,
        attempts: 2,
    })
}

/// Inputs for one round supplied by the session owner.
#[derive(Debug, Clone)]
pub struct RoundInput<'a> {
    pub round_index: u32,
    pub user_message: &'a str,
    /// Transcript entries from earlier rounds, oldest first. Only the last
    /// `context_window` are used.
    pub prior_context: &'a [TranscriptEntry],
    /// Session transcript length including this round's user message.
    pub transcript_len: usize,
}

/// Drives rounds for one session.
pub struct Coordinator<'a> {
    pub agents: &'a AgentSet,
    /// Effective prompt per agent id.
    pub prompts: &'a BTreeMap<AgentId, String>,
    pub selector: &'a dyn ChatProvider,
    pub responder: &'a dyn ChatProvider,
    pub selector_template: &'a str,
    pub config: &'a CoordinatorConfig,
}

/// Receives events as they happen. Returning an error aborts the round.
pub type EventSink<'s> = dyn FnMut(CoordinatorEvent) -> Result<(), String> + Send + 's;

impl Coordinator<'_> {
    fn agent_request(
        &self,
        agent: &AgentId,
        turn: usize,
        input: &RoundInput<'_>,
        round: &RoundState,
    ) -> Result<ProviderRequest, RoundError> {
        let system_prompt = self
            .prompts
            .get(agent)
            .ok_or_else(|| RoundError::MissingPrompt(agent.clone()))?
            .clone();

        let window_start = input.prior_context.len().saturating_sub(self.config.context_window);
        let mut messages: Vec<ChatMessage> = input.prior_context[window_start..]
            .iter()
            .map(|e| match &e.speaker {
                Speaker::User => ChatMessage::user(&e.content),
                Speaker::Agent(id) => ChatMessage::agent(self.agents.display_name(id), &e.content),
            })
            .collect();
        messages.extend(history_messages(self.agents, round.selector_history()));

        let name = self.agents.display_name(agent);
        let k = self.config.round_size;
        let mut instruction = format!(
            "[agent-turn-{turn} speaker={agent}] You are the {name}, speaking at turn {turn} of {k} in this round."
        );
        let earlier: Vec<String> = round
            .selector_history()
            .iter()
            .filter_map(|h| h.speaker.agent_id())
            .map(|id| self.agents.display_name(id))
            .collect();
        if !earlier.is_empty() {
            instruction.push_str(&format!(
                " Already heard this round: {}. Build on their messages with a complementary perspective from your role, and avoid restating points already made in this round.",
                earlier.join(", ")
            ));
        }
        instruction.push_str(" Respond to the gardener's latest message.");
        messages.push(ChatMessage::instruction(instruction));

        Ok(ProviderRequest {
            system_prompt,
            messages,
            temperature: self.config.agent_temperature,
            max_tokens: self.config.agent_max_tokens,
            model_name: self.config.agent_model.clone(),
        })
    }

    /// Run one round. Turns are strictly sequential: turn `t + 1` is not
    /// selected before turn `t`'s reply stream has completed. On any failure
    /// a `RoundError` event is emitted, the selector history is reset, and
    /// the error is returned; messages completed so far have already been
    /// delivered through `sink`.
    pub async fn run_round(
        &self,
        state: &mut CoordinatorState,
        input: RoundInput<'_>,
        sink: &mut EventSink<'_>,
    ) -> Result<RoundSummary, RoundError> {
        let result = self.run_turns(state, &input, sink).await;
        let round = input.round_index;
        match result {
            Ok(summary) => {
                state.last_round_speaker = summary.messages.last().map(|(id, _)| id.clone());
                state.round.reset();
                sink(CoordinatorEvent::RoundComplete {
                    round,
                    messages: summary.messages.len(),
                })
                .map_err(|detail| RoundError::Sink {
                    turn: self.config.round_size,
                    detail,
                })?;
                Ok(summary)
            }
            Err(err) => {
                let turn = state.round.turn();
                state.last_round_speaker = state.round.previous_speaker.clone();
                state.round.reset();
                // The sink may be the thing that failed; the error is still
                // returned to the caller either way.
                let _ = sink(CoordinatorEvent::RoundError {
                    round,
                    turn,
                    code: err.code(),
                    detail: err.to_string(),
                });
                Err(err)
            }
        }
    }

    async fn run_turns(
        &self,
        state: &mut CoordinatorState,
        input: &RoundInput<'_>,
        sink: &mut EventSink<'_>,
    ) -> Result<RoundSummary, RoundError> {
        self.config.validate()?;
        let round = input.round_index;
        let k = self.config.round_size;

        if !state.round.selector_history.is_empty() {
            tracing::warn!("selector history was not reset before round {round}");
        }
        state.round.begin(round, k, input.user_message);
        let emit = |sink: &mut EventSink<'_>, turn: usize, event: CoordinatorEvent| {
            sink(event).map_err(|detail| RoundError::Sink { turn, detail })
        };
        emit(
            sink,
            0,
            CoordinatorEvent::RoundStarted {
                round,
                selector_history_len: state.round.selector_history.len(),
                transcript_len: input.transcript_len,
            },
        )?;

        let mut summary = RoundSummary {
            round,
            decisions: Vec::with_capacity(k),
            messages: Vec::with_capacity(k),
        };

        for turn in 1..=k {
            let previous = match state.round.previous_speaker.clone() {
                Some(p) => Some(p),
                None if self.config.exclude_across_rounds => state.last_round_speaker.clone(),
                None => None,
            };
            let eligible = eligible_agents(self.agents, previous.as_deref());
            let decision = select_speaker(
                self.selector,
                self.selector_template,
                self.agents,
                SelectionInput {
                    turn,
                    previous: previous.as_ref(),
                    history: &state.round.selector_history,
                    eligible: &eligible,
                },
                &mut state.fallback_cursor,
                self.config,
            )
            .await
            .map_err(|source| RoundError::Selector { turn, source })?;
            let agent = decision.chosen.clone();

            emit(
                sink,
                turn,
                CoordinatorEvent::SpeakerSelected {
                    round,
                    turn,
                    agent_id: agent.clone(),
                    eligible,
                    source: decision.source,
                    attempts: decision.attempts,
                },
            )?;

            let request = self.agent_request(&agent, turn, input, &state.round)?;
            emit(
                sink,
                turn,
                CoordinatorEvent::MessageStart {
                    round,
                    turn,
                    agent_id: agent.clone(),
                },
            )?;

            let agent_err = |source| RoundError::Agent {
                turn,
                agent: agent.clone(),
                source,
            };
            let mut stream = well_formed(
                self.responder
                    .complete_streaming(request)
                    .await
                    .map_err(agent_err)?,
            );
            let mut content = String::new();
            while let Some(delta) = stream.next().await {
                let delta = delta.map_err(agent_err)?;
                if !delta.text.is_empty() {
                    content.push_str(&delta.text);
                    emit(
                        sink,
                        turn,
                        CoordinatorEvent::TokenDelta {
                            round,
                            turn,
                            text: delta.text,
                        },
                    )?;
                }
            }

            emit(
                sink,
                turn,
                CoordinatorEvent::MessageEnd {
                    round,
                    turn,
                    agent_id: agent.clone(),
                    content: content.clone(),
                },
            )?;
            state.round.record(&agent, &content);
            summary.decisions.push(decision);
            summary.messages.push((agent, content));
        }
        Ok(summary)
    }
}
