//! Plain-text transcript export.

use super::Session;
use crate::profile::serialize_profile;
use crate::transcript::{rfc3339, Speaker};

pub const EXPORT_TITLE: &str = "CultivAgents conversation export";

/// Render the session as a text document: a header block (session id,
/// creation time, the four profile fields), then one block per transcript
/// entry, `[<name>] (round R)` followed by the content. Blocks are separated
/// by blank lines.
pub fn export_transcript(session: &Session) -> String {
    let mut out = String::new();
    out.push_str(EXPORT_TITLE);
    out.push('\n');
    out.push_str(&format!("Session: {}\n", session.session_id));
    out.push_str(&format!("Created: {}\n", rfc3339::format(&session.created_at)));
    out.push_str(&serialize_profile(&session.profile));

    for entry in &session.transcript {
        let name = match &entry.speaker {
            Speaker::User => "You".to_string(),
            Speaker::Agent(id) => session.agent_set.display_name(id),
        };
        out.push('\n');
        out.push_str(&format!("[{name}] (round {})\n", entry.round_index));
        out.push_str(entry.content.trim_end_matches(['\n', '\r']));
        out.push('\n');
    }
    out
}
