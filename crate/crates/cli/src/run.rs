//! Headless scripted runs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cultivagents::scenario::{load_scenario, run_scenario, ScenarioOutcome};

use crate::{EXIT_INPUT, EXIT_INVARIANT, EXIT_OK, EXIT_ROUND_ERROR};

pub const EXPORT_FILE: &str = "export.txt";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const FRAMES_FILE: &str = "frames.jsonl";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

/// Result of `run`: the exit status plus the lines to print.
#[derive(Debug)]
pub struct RunSummary {
    pub exit_code: i32,
    pub stdout: Vec<String>,
    pub stderr: Vec<String>,
}

/// Exit status for a finished run.
pub fn exit_code_for(outcome: &ScenarioOutcome) -> i32 {
    if !outcome.violations.is_empty() {
        EXIT_INVARIANT
    } else if !outcome.all_rounds_completed() {
        EXIT_ROUND_ERROR
    } else {
        EXIT_OK
    }
}

/// Write the run's artifacts into `out`: the export document, the
/// coordinator event log, the client frame log and the persisted record.
pub fn write_artifacts(outcome: &ScenarioOutcome, store: &Path, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    let mut write = |name: &str, text: &str| -> anyhow::Result<()> {
        let path = out.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
        Ok(())
    };
    write(EXPORT_FILE, &outcome.export)?;
    write(EVENTS_FILE, &outcome.events_jsonl())?;
    write(FRAMES_FILE, &outcome.frames_jsonl())?;
    let record = store.join(format!("{}.jsonl", outcome.session.session_id));
    let record = fs::read_to_string(&record).with_context(|| format!("reading {}", record.display()))?;
    write(TRANSCRIPT_FILE, &record)?;
    Ok(written)
}

/// Execute a scenario file end to end and write artifacts into `out`.
pub async fn run_scripted(scenario: &Path, out: &Path) -> RunSummary {
    let mut summary = RunSummary {
        exit_code: EXIT_OK,
        stdout: Vec::new(),
        stderr: Vec::new(),
    };
    let prepared = match load_scenario(scenario) {
        Ok(p) => p,
        Err(e) => {
            summary.exit_code = EXIT_INPUT;
            summary.stderr.push(format!("{}: {e}", scenario.display()));
            return summary;
        }
    };
    // The record store lives in a scratch directory so reruns never collide
    // with an earlier run's files; the record is copied out afterwards.
    let store = match tempfile::tempdir() {
        Ok(dir) => dir,
        Err(e) => {
            summary.exit_code = EXIT_INPUT;
            summary.stderr.push(format!("cannot create scratch store: {e}"));
            return summary;
        }
    };
    let outcome = match run_scenario(prepared, store.path()).await {
        Ok(o) => o,
        Err(e) => {
            summary.exit_code = if e.is_input_error() { EXIT_INPUT } else { EXIT_ROUND_ERROR };
            summary.stderr.push(format!("{}: {e}", scenario.display()));
            return summary;
        }
    };
    if let Err(e) = write_artifacts(&outcome, store.path(), out) {
        summary.exit_code = EXIT_INPUT;
        summary.stderr.push(format!("{e:#}"));
        return summary;
    }

    let errored: Vec<_> = outcome.reports.iter().filter(|r| r.error.is_some()).collect();
    summary.stdout.push(format!(
        "session {}: {} round(s), {} completed, {} with errors; {} transcript entries",
        outcome.session.session_id,
        outcome.reports.len(),
        outcome.reports.len() - errored.len(),
        errored.len(),
        outcome.session.transcript.len()
    ));
    for report in &errored {
        summary.stderr.push(format!(
            "round {} ended with error `{}` after {} message(s)",
            report.round,
            report.error.as_deref().unwrap_or_default(),
            report.messages
        ));
    }
    for violation in &outcome.violations {
        summary.stderr.push(format!("invariant violated: {violation}"));
    }
    summary.stdout.push(format!("artifacts written to {}", out.display()));
    summary.exit_code = exit_code_for(&outcome);
    summary
}
