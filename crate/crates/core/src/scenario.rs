//! Scripted scenarios: a profile, provider scripts for the selector and the
//! agents, and the gardener's messages, bundled in one TOML document.
//!
//! ```toml
//! session_id = "planting-question"
//! messages = ["When should I plant tomatoes?"]
//!
//! [profile]
//! experience = "novice"
//! location = "Atlanta, GA"
//! month = 4
//! cultural_background = ""
//!
//! [selector]
//! default = "experience"
//! [[selector.rules]]
//! match = "[selector-turn-1]"
//! reply = "environment"
//!
//! [agents]
//! default = "Happy gardening!"
//! [[agents.rules]]
//! match = "speaker=environment]"
//! reply = "Last frost in Atlanta is usually late March."
//! ```
//!
//! A rule carries exactly one of `reply`, `fail` (optionally with
//! `partial`), or `stall = true`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::Deserialize;
use thiserror::Error;

use crate::agents::{load_agent_plugins, AgentSet, PersonaError};
use crate::checker::{check_run, RunLog, Violation};
use crate::coordinator::{CoordinatorConfig, CoordinatorEvent};
use crate::profile::{validate_profile_json, ProfileErrors, UserProfile};
use crate::provider::{ChatProvider, ScriptRule, ScriptedBackend, ScriptedFailure, ScriptedReply};
use crate::session::{
    FixedClock, FixedId, FrameSink, RoundReport, ServiceSettings, Session, SessionError,
    SessionManager, SessionStore, StoreError,
};
use crate::wire::ServerFrame;

/// Creation instant used when a scenario does not set `created_at`.
pub const DEFAULT_SCENARIO_TIME: &str = "2025-04-15T14:30:00Z";
pub const DEFAULT_SCENARIO_ID: &str = "scenario";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    #[serde(rename = "match")]
    pub matcher: String,
    #[serde(default)]
    pub reply: Option<String>,
    #[serde(default)]
    pub fail: Option<ScriptedFailure>,
    #[serde(default)]
    pub partial: Option<String>,
    #[serde(default)]
    pub stall: bool,
}

impl RuleSpec {
    fn to_rule(&self) -> Result<ScriptRule, String> {
        let reply = match (&self.reply, self.fail, &self.partial, self.stall) {
            (Some(text), None, None, false) => ScriptedReply::Text(text.clone()),
            (None, Some(f), None, false) => ScriptedReply::Fail(f),
            (None, Some(f), Some(p), false) => ScriptedReply::FailAfter {
                partial: p.clone(),
                failure: f,
            },
            (None, None, None, true) => ScriptedReply::Stall,
            _ => {
                return Err(format!(
                    "rule `{}` must set exactly one of reply, fail (with optional partial), stall",
                    self.matcher
                ))
            }
        };
        Ok(ScriptRule::new(self.matcher.clone(), reply))
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptSpec {
    /// Reply used when no rule matches.
    pub default: String,
    #[serde(default)]
    pub rules: Vec<RuleSpec>,
}

impl ScriptSpec {
    pub fn backend(&self) -> Result<ScriptedBackend, String> {
        let rules = self
            .rules
            .iter()
            .map(RuleSpec::to_rule)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ScriptedBackend::new(rules, ScriptedReply::Text(self.default.clone())))
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_id")]
    pub session_id: String,
    #[serde(default = "default_time", with = "crate::transcript::rfc3339")]
    pub created_at: DateTime<Utc>,
    /// Raw profile table; validated with per-field diagnostics.
    pub profile: toml::Value,
    /// Extra persona file, relative to the scenario file.
    #[serde(default)]
    pub personas: Option<String>,
    #[serde(default)]
    pub coordinator: CoordinatorConfig,
    pub selector: ScriptSpec,
    pub agents: ScriptSpec,
    #[serde(default)]
    pub messages: Vec<String>,
}

fn default_id() -> String {
    DEFAULT_SCENARIO_ID.to_string()
}

fn default_time() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339(DEFAULT_SCENARIO_TIME)
        .expect("valid constant")
        .with_timezone(&Utc)
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(String),
    #[error("invalid profile in scenario: {0}")]
    Profile(ProfileErrors),
    #[error("invalid persona file: {0}")]
    Personas(PersonaError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ScenarioError {
    /// Input problems, as opposed to failures while running.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            ScenarioError::Io { .. }
                | ScenarioError::Parse(_)
                | ScenarioError::Profile(_)
                | ScenarioError::Personas(_)
        )
    }
}

/// A scenario with everything resolved and validated.
#[derive(Debug)]
pub struct PreparedScenario {
    pub scenario: Scenario,
    pub profile: UserProfile,
    pub agents: AgentSet,
    pub selector: ScriptedBackend,
    pub responder: ScriptedBackend,
}

pub fn parse_scenario(text: &str, base_dir: Option<&Path>) -> Result<PreparedScenario, ScenarioError> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let profile_json =
        serde_json::to_value(&scenario.profile).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let profile = validate_profile_json(&profile_json).map_err(ScenarioError::Profile)?;
    scenario
        .coordinator
        .validate()
        .map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let agents = match &scenario.personas {
        Some(rel) => {
            let path = base_dir.map_or_else(|| Path::new(rel).to_path_buf(), |d| d.join(rel));
            load_agent_plugins(&AgentSet::builtin(), &path).map_err(ScenarioError::Personas)?
        }
        None => AgentSet::builtin(),
    };
    let selector = scenario.selector.backend().map_err(ScenarioError::Parse)?;
    let responder = scenario.agents.backend().map_err(ScenarioError::Parse)?;
    Ok(PreparedScenario {
        scenario,
        profile,
        agents,
        selector,
        responder,
    })
}

pub fn load_scenario(path: &Path) -> Result<PreparedScenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text, path.parent())
}

/// Everything a scripted run produced.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub session: Session,
    pub events: Vec<CoordinatorEvent>,
    /// Frames in the order a client would receive them, starting with
    /// `session_created`.
    pub frames: Vec<ServerFrame>,
    pub reports: Vec<RoundReport>,
    pub export: String,
    pub violations: Vec<Violation>,
}

impl ScenarioOutcome {
    pub fn all_rounds_completed(&self) -> bool {
        self.reports.iter().all(|r| r.error.is_none())
    }

    /// Event log as JSON lines.
    pub fn events_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("events serialize") + "\n")
            .collect()
    }

    pub fn frames_jsonl(&self) -> String {
        self.frames.iter().map(|f| f.to_json() + "\n").collect()
    }
}

#[derive(Default)]
struct Recorder {
    events: Vec<CoordinatorEvent>,
    frames: Vec<ServerFrame>,
}

impl FrameSink for Recorder {
    fn frame(&mut self, frame: ServerFrame) {
        self.frames.push(frame);
    }

    fn event(&mut self, event: &CoordinatorEvent) {
        self.events.push(event.clone());
    }
}

/// Run the scenario against its scripted backends, persisting into
/// `store_dir`, then check every invariant over the recorded run.
pub async fn run_scenario(
    prepared: PreparedScenario,
    store_dir: &Path,
) -> Result<ScenarioOutcome, ScenarioError> {
    let PreparedScenario {
        scenario,
        profile,
        agents,
        selector,
        responder,
    } = prepared;
    run_with_providers(
        &scenario,
        profile,
        agents,
        Arc::new(selector),
        Arc::new(responder),
        store_dir,
    )
    .await
}

/// Same as [`run_scenario`] with arbitrary providers in place of the
/// scenario's scripts.
pub async fn run_with_providers(
    scenario: &Scenario,
    profile: UserProfile,
    agents: AgentSet,
    selector: Arc<dyn ChatProvider>,
    responder: Arc<dyn ChatProvider>,
    store_dir: &Path,
) -> Result<ScenarioOutcome, ScenarioError> {
    let settings = ServiceSettings {
        coordinator: scenario.coordinator.clone(),
        ..ServiceSettings::default()
    };
    let manager = SessionManager::new(
        agents,
        selector,
        responder,
        settings,
        SessionStore::open(store_dir)?,
    )
    .with_clock(Arc::new(FixedClock(scenario.created_at)))
    .with_ids(Arc::new(FixedId(scenario.session_id.clone())));

    let session = manager.create_session(profile)?;
    let mut recorder = Recorder::default();
    recorder.frames.push(SessionManager::session_created_frame(&session));
    let mut reports = Vec::new();
    for message in &scenario.messages {
        match manager
            .handle_user_message(&session.session_id, message, &mut recorder)
            .await
        {
            Ok(report) => reports.push(report),
            Err(e) => {
                recorder.frames.push(e.to_frame());
                return Err(e.into());
            }
        }
    }
    let session = manager.session(&session.session_id).await?;
    let export = manager.export(&session.session_id).await?;

    let violations = check_run(RunLog {
        agents: &session.agent_set,
        round_size: scenario.coordinator.round_size,
        exclude_across_rounds: scenario.coordinator.exclude_across_rounds,
        events: &recorder.events,
        frames: Some(&recorder.frames),
        transcript: Some(&session.transcript),
        initial_transcript_len: 0,
    });
    Ok(ScenarioOutcome {
        session,
        events: recorder.events,
        frames: recorder.frames,
        reports,
        export,
        violations,
    })
}

/// Text-reply rules from `(matcher, reply)` pairs.
pub fn rules_from_pairs(pairs: &[(&str, &str)]) -> Vec<RuleSpec> {
    pairs
        .iter()
        .map(|(m, r)| RuleSpec {
            matcher: m.to_string(),
            reply: Some(r.to_string()),
            fail: None,
            partial: None,
            stall: false,
        })
        .collect()
}

/// One text-reply rule per agent, matched on the agent-turn marker.
pub fn agent_rules(replies: &BTreeMap<&str, &str>) -> Vec<RuleSpec> {
    replies
        .iter()
        .map(|(id, reply)| RuleSpec {
            matcher: format!("speaker={id}]"),
            reply: Some(reply.to_string()),
            fail: None,
            partial: None,
            stall: false,
        })
        .collect()
}
