//! Persona file validation.

use std::path::Path;

use cultivagents::agents::{load_agent_plugins, read_personas, AgentSet, PersonaError};

/// Outcome of checking one persona file.
#[derive(Debug)]
pub struct PersonaReport {
    pub ids: Vec<String>,
}

/// Validate `path` on its own, or (with `merge`) as a plug-in file added to
/// the built-in agents, which also rejects ids that clash with them.
pub fn check_personas(path: &Path, merge: bool) -> Result<PersonaReport, PersonaError> {
    let ids = if merge {
        load_agent_plugins(&AgentSet::builtin(), path)?
            .ids()
            .into_iter()
            .map(|id| id.to_string())
            .collect()
    } else {
        read_personas(path)?
            .iter()
            .map(|s| s.id().to_string())
            .collect()
    };
    Ok(PersonaReport { ids })
}

/// One diagnostic per line, ready for stderr.
pub fn render_error(path: &Path, err: &PersonaError) -> String {
    let diagnostics = err.diagnostics();
    if diagnostics.is_empty() {
        return format!("{}: {err}", path.display());
    }
    diagnostics
        .iter()
        .map(|d| format!("{}: {d}", path.display()))
        .collect::<Vec<_>>()
        .join("\n")
}
