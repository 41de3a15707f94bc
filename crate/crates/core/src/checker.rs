//! Event-log invariant checker.
//!
//! Replays a recorded run (coordinator events, optionally the wire frames a
//! client received and the persisted transcript) and reports every broken
//! invariant. Used by the scripted runner on every run and by the test
//! suites.

use std::fmt;

use crate::agents::{AgentId, AgentSet};
use crate::coordinator::CoordinatorEvent;
use crate::transcript::{Speaker, TranscriptEntry};
use crate::wire::ServerFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Invariant {
    /// Every completed round has exactly `k` agent messages.
    RoundLength,
    /// No agent speaks twice in a row within a round.
    Exclusion,
    /// Selector history holds only the user message at round start, and the
    /// transcript has grown by exactly the previous rounds' entries.
    HistoryReset,
    /// Every chosen speaker was eligible; turn 1 offers the full set.
    Eligibility,
    /// Events follow the round grammar with consecutive turn numbers.
    EventOrder,
    /// message_start/message_end frames match persisted agent entries.
    WireTranscript,
}

impl Invariant {
    pub fn name(self) -> &'static str {
        match self {
            Invariant::RoundLength => "round_length",
            Invariant::Exclusion => "within_round_exclusion",
            Invariant::HistoryReset => "history_reset",
            Invariant::Eligibility => "eligibility_soundness",
            Invariant::EventOrder => "event_order",
            Invariant::WireTranscript => "wire_transcript_agreement",
        }
    }
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub invariant: Invariant,
    pub round: u32,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} violated in round {}: {}", self.invariant, self.round, self.detail)
    }
}

/// What to check. `frames` and `transcript` are optional; the wire check
/// runs only when both are present.
#[derive(Debug, Clone, Copy)]
pub struct RunLog<'a> {
    pub agents: &'a AgentSet,
    pub round_size: usize,
    pub exclude_across_rounds: bool,
    pub events: &'a [CoordinatorEvent],
    pub frames: Option<&'a [ServerFrame]>,
    pub transcript: Option<&'a [TranscriptEntry]>,
    /// Transcript length before the first logged round (non-zero when a
    /// resumed session is checked).
    pub initial_transcript_len: usize,
}

impl<'a> RunLog<'a> {
    pub fn events(agents: &'a AgentSet, round_size: usize, events: &'a [CoordinatorEvent]) -> Self {
        Self {
            agents,
            round_size,
            exclude_across_rounds: false,
            events,
            frames: None,
            transcript: None,
            initial_transcript_len: 0,
        }
    }
}

struct Checker<'a> {
    log: RunLog<'a>,
    violations: Vec<Violation>,
}

impl Checker<'_> {
    fn fail(&mut self, invariant: Invariant, round: u32, detail: impl Into<String>) {
        self.violations.push(Violation {
            invariant,
            round,
            detail: detail.into(),
        });
    }

    fn expected_eligible(&self, previous: Option<&AgentId>) -> Vec<AgentId> {
        self.log
            .agents
            .ids()
            .into_iter()
            .filter(|id| Some(id) != previous)
            .collect()
    }

    fn check_events(&mut self) {
        let events = self.log.events;
        let k = self.log.round_size;
        let mut transcript_len = self.log.initial_transcript_len;
        let mut last_round_speaker: Option<AgentId> = None;
        let mut i = 0;

        while i < events.len() {
            let CoordinatorEvent::RoundStarted {
                round,
                selector_history_len,
                transcript_len: logged_len,
            } = &events[i]
            else {
                self.fail(
                    Invariant::EventOrder,
                    0,
                    format!("expected round_started at event {i}, found {:?}", events[i]),
                );
                return;
            };
            let round = *round;
            i += 1;
            transcript_len += 1;
            if *selector_history_len != 1 {
                self.fail(
                    Invariant::HistoryReset,
                    round,
                    format!("selector history has {selector_history_len} entries at round start"),
                );
            }
            if *logged_len != transcript_len {
                self.fail(
                    Invariant::HistoryReset,
                    round,
                    format!("transcript length {logged_len} at round start, expected {transcript_len}"),
                );
            }

            let mut previous: Option<AgentId> = None;
            let mut messages = 0usize;
            let mut closed = false;
            while i < events.len() && !closed {
                let event = &events[i];
                i += 1;
                match event {
                    CoordinatorEvent::SpeakerSelected {
                        round: r,
                        turn,
                        agent_id,
                        eligible,
                        ..
                    } => {
                        self.check_round_tag(round, *r);
                        if *turn != messages + 1 {
                            self.fail(
                                Invariant::EventOrder,
                                round,
                                format!("speaker_selected for turn {turn} after {messages} messages"),
                            );
                        }
                        if !eligible.contains(agent_id) {
                            self.fail(
                                Invariant::Eligibility,
                                round,
                                format!("turn {turn}: `{agent_id}` not in eligible set {eligible:?}"),
                            );
                        }
                        let excluded = if *turn == 1 {
                            if self.log.exclude_across_rounds {
                                last_round_speaker.as_ref()
                            } else {
                                None
                            }
                        } else {
                            previous.as_ref()
                        };
                        let want = self.expected_eligible(excluded);
                        if *eligible != want {
                            self.fail(
                                Invariant::Eligibility,
                                round,
                                format!("turn {turn}: eligible set {eligible:?}, expected {want:?}"),
                            );
                        }
                        if *turn > 1 && previous.as_ref() == Some(agent_id) {
                            self.fail(
                                Invariant::Exclusion,
                                round,
                                format!("turn {turn}: `{agent_id}` selected right after speaking"),
                            );
                        }
                        // The message itself must follow.
                        match events.get(i) {
                            Some(CoordinatorEvent::MessageStart {
                                turn: t,
                                agent_id: a,
                                ..
                            }) if t == turn && a == agent_id => i += 1,
                            Some(CoordinatorEvent::RoundError { .. }) => continue,
                            other => {
                                self.fail(
                                    Invariant::EventOrder,
                                    round,
                                    format!("turn {turn}: expected message_start, found {other:?}"),
                                );
                                continue;
                            }
                        }
                        let mut text = String::new();
                        while let Some(CoordinatorEvent::TokenDelta { text: t, turn: dt, .. }) =
                            events.get(i)
                        {
                            if dt != turn {
                                self.fail(
                                    Invariant::EventOrder,
                                    round,
                                    format!("delta for turn {dt} inside turn {turn}"),
                                );
                            }
                            text.push_str(t);
                            i += 1;
                        }
                        match events.get(i) {
                            Some(CoordinatorEvent::MessageEnd {
                                turn: t,
                                agent_id: a,
                                content,
                                ..
                            }) => {
                                i += 1;
                                if t != turn || a != agent_id {
                                    self.fail(
                                        Invariant::EventOrder,
                                        round,
                                        format!("message_end ({a}, {t}) closes ({agent_id}, {turn})"),
                                    );
                                }
                                if *content != text {
                                    self.fail(
                                        Invariant::EventOrder,
                                        round,
                                        format!("turn {turn}: deltas do not concatenate to content"),
                                    );
                                }
                                if previous.as_ref() == Some(agent_id) {
                                    self.fail(
                                        Invariant::Exclusion,
                                        round,
                                        format!("turn {turn}: consecutive messages from `{agent_id}`"),
                                    );
                                }
                                previous = Some(agent_id.clone());
                                messages += 1;
                                transcript_len += 1;
                            }
                            Some(CoordinatorEvent::RoundError { .. }) => {}
                            other => self.fail(
                                Invariant::EventOrder,
                                round,
                                format!("turn {turn}: expected message_end, found {other:?}"),
                            ),
                        }
                    }
                    CoordinatorEvent::RoundComplete { round: r, messages: m } => {
                        self.check_round_tag(round, *r);
                        closed = true;
                        if messages != k || *m != k {
                            self.fail(
                                Invariant::RoundLength,
                                round,
                                format!("completed with {messages} messages (reported {m}), expected {k}"),
                            );
                        }
                        last_round_speaker = previous.clone();
                    }
                    CoordinatorEvent::RoundError { round: r, .. } => {
                        self.check_round_tag(round, *r);
                        closed = true;
                        if messages >= k {
                            self.fail(
                                Invariant::RoundLength,
                                round,
                                format!("round error after {messages} messages"),
                            );
                        }
                        last_round_speaker = previous.clone();
                    }
                    other => self.fail(
                        Invariant::EventOrder,
                        round,
                        format!("unexpected event {other:?}"),
                    ),
                }
                if messages > k {
                    self.fail(
                        Invariant::RoundLength,
                        round,
                        format!("{messages} messages exceed k = {k}"),
                    );
                }
            }
            if !closed {
                self.fail(Invariant::EventOrder, round, "round never closed");
            }
        }
    }

    fn check_round_tag(&mut self, round: u32, tagged: u32) {
        if round != tagged {
            self.fail(
                Invariant::EventOrder,
                round,
                format!("event tagged with round {tagged}"),
            );
        }
    }

    /// Messages (agent, turn, text) a client saw completed, per round.
    fn wire_messages(frames: &[ServerFrame]) -> Vec<(u32, AgentId, u32, String)> {
        let mut out = Vec::new();
        let mut round = 0;
        let mut open: Option<(AgentId, u32, String)> = None;
        for frame in frames {
            match frame {
                ServerFrame::RoundStarted { round: r } => {
                    round = *r;
                    open = None;
                }
                ServerFrame::MessageStart { agent_id, turn } => {
                    open = Some((agent_id.clone(), *turn as u32, String::new()));
                }
                ServerFrame::TokenDelta { text } => {
                    if let Some((_, _, buf)) = open.as_mut() {
                        buf.push_str(text);
                    }
                }
                ServerFrame::MessageEnd => {
                    if let Some((agent, turn, text)) = open.take() {
                        out.push((round, agent, turn, text));
                    }
                }
                ServerFrame::Error { .. } => open = None,
                _ => {}
            }
        }
        out
    }

    fn check_wire(&mut self) {
        let (Some(frames), Some(transcript)) = (self.log.frames, self.log.transcript) else {
            return;
        };
        let seen = Self::wire_messages(frames);
        let rounds: std::collections::BTreeSet<u32> = seen.iter().map(|m| m.0).collect();
        let persisted: Vec<(u32, AgentId, u32, String)> = transcript
            .iter()
            .filter(|e| rounds.contains(&e.round_index) || self.round_in_events(e.round_index))
            .filter_map(|e| match &e.speaker {
                Speaker::Agent(id) => Some((
                    e.round_index,
                    id.clone(),
                    e.turn_within_round,
                    e.content.clone(),
                )),
                Speaker::User => None,
            })
            .collect();
        if seen.len() != persisted.len() {
            self.fail(
                Invariant::WireTranscript,
                seen.last().or(persisted.last()).map_or(0, |m| m.0),
                format!(
                    "{} messages on the wire, {} persisted",
                    seen.len(),
                    persisted.len()
                ),
            );
        }
        for (wire, stored) in seen.iter().zip(&persisted) {
            if wire != stored {
                self.fail(
                    Invariant::WireTranscript,
                    wire.0,
                    format!(
                        "wire ({}, turn {}) differs from persisted ({}, turn {})",
                        wire.1, wire.2, stored.1, stored.2
                    ),
                );
            }
        }
    }

    fn round_in_events(&self, round: u32) -> bool {
        self.log
            .events
            .iter()
            .any(|e| matches!(e, CoordinatorEvent::RoundStarted { round: r, .. } if *r == round))
    }
}

/// Every violation found in `log`, in discovery order. Empty means clean.
pub fn check_run(log: RunLog<'_>) -> Vec<Violation> {
    let mut checker = Checker {
        log,
        violations: Vec::new(),
    };
    checker.check_events();
    checker.check_wire();
    checker.violations
}
