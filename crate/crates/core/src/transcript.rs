//! Durable conversation records.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::agents::{AgentId, USER_SPEAKER};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Speaker {
    User,
    Agent(AgentId),
}

impl Speaker {
    pub fn as_str(&self) -> &str {
        match self {
            Speaker::User => USER_SPEAKER,
            Speaker::Agent(id) => id.as_str(),
        }
    }

    pub fn agent_id(&self) -> Option<&AgentId> {
        match self {
            Speaker::User => None,
            Speaker::Agent(id) => Some(id),
        }
    }

    pub fn is_user(&self) -> bool {
        matches!(self, Speaker::User)
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<&str> for Speaker {
    fn from(s: &str) -> Self {
        if s == USER_SPEAKER {
            Speaker::User
        } else {
            Speaker::Agent(AgentId::new(s))
        }
    }
}

impl Serialize for Speaker {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Speaker {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s.is_empty() {
            return Err(serde::de::Error::custom("empty speaker"));
        }
        Ok(Speaker::from(s.as_str()))
    }
}

/// One user or agent message. User entries carry turn 0; agent entries carry
/// their 1-based turn within the round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub speaker: Speaker,
    pub content: String,
    pub round_index: u32,
    pub turn_within_round: u32,
    #[serde(with = "rfc3339")]
    pub timestamp: DateTime<Utc>,
}

impl TranscriptEntry {
    pub fn user(round_index: u32, content: impl Into<String>, timestamp: DateTime<Utc>) -> Self {
        Self {
            speaker: Speaker::User,
            content: content.into(),
            round_index,
            turn_within_round: 0,
            timestamp,
        }
    }

    pub fn agent(
        agent: AgentId,
        round_index: u32,
        turn: u32,
        content: impl Into<String>,
        timestamp: DateTime<Utc>,
    ) -> Self {
        Self {
            speaker: Speaker::Agent(agent),
            content: content.into(),
            round_index,
            turn_within_round: turn,
            timestamp,
        }
    }

    pub fn position(&self) -> (u32, u32) {
        (self.round_index, self.turn_within_round)
    }
}

/// Timestamps persist as RFC 3339 text with second precision and a `Z`
/// suffix.
pub mod rfc3339 {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format(t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let text = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&text)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }

    pub fn format(t: &DateTime<Utc>) -> String {
        t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
    }
}

/// Check the ordering and turn-labeling invariants of a transcript.
pub fn check_transcript(entries: &[TranscriptEntry], k: u32) -> Result<(), String> {
    let mut last: Option<(u32, u32)> = None;
    for (i, e) in entries.iter().enumerate() {
        if e.round_index < 1 {
            return Err(format!("entry {i}: round index must be >= 1"));
        }
        match (&e.speaker, e.turn_within_round) {
            (Speaker::User, 0) => {}
            (Speaker::User, t) => return Err(format!("entry {i}: user entry with turn {t}")),
            (Speaker::Agent(id), 0) => return Err(format!("entry {i}: agent `{id}` with turn 0")),
            (Speaker::Agent(id), t) if t > k => {
                return Err(format!("entry {i}: agent `{id}` turn {t} exceeds k = {k}"))
            }
            _ => {}
        }
        if let Some(prev) = last {
            if e.position() <= prev {
                return Err(format!(
                    "entry {i}: position {:?} does not follow {:?}",
                    e.position(),
                    prev
                ));
            }
        }
        last = Some(e.position());
    }
    Ok(())
}
