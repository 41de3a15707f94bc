//! The `run` and `check-personas` subcommands, driven through the binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cultivagents"))
}

fn manifest_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn run(scenario: &str, out: &Path) -> Output {
    bin()
        .arg("run")
        .arg("--scenario")
        .arg(manifest_path(scenario))
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn events(out: &Path) -> Vec<Value> {
    std::fs::read_to_string(out.join("events.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn count(events: &[Value], kind: &str) -> usize {
    events.iter().filter(|e| e["event"] == kind).count()
}

#[test]
fn two_message_scenario_completes_two_rounds() {
    let out = tempfile::tempdir().unwrap();
    let result = run("scenarios/planting_question.toml", out.path());
    assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    let events = events(out.path());
    assert_eq!(count(&events, "round_complete"), 2);
    assert_eq!(count(&events, "message_end"), 6);
    assert_eq!(count(&events, "round_error"), 0);

    let frames = std::fs::read_to_string(out.path().join("frames.jsonl")).unwrap();
    let first: Value = serde_json::from_str(frames.lines().next().unwrap()).unwrap();
    assert_eq!(first["type"], "session_created");
    assert_eq!(first["session_id"], "planting-question");

    let export = std::fs::read_to_string(out.path().join("export.txt")).unwrap();
    assert!(export.contains("Location: Atlanta, GA\n"), "{export}");
    assert!(export.contains("[Environmental Agent] (round 2)"));
    // Header line plus one line per transcript entry (2 user + 6 agent).
    let record = std::fs::read_to_string(out.path().join("transcript.jsonl")).unwrap();
    assert_eq!(record.lines().count(), 9);
}

#[test]
fn selector_fallback_still_completes_the_round() {
    let out = tempfile::tempdir().unwrap();
    let result = run("scenarios/selector_fallback.toml", out.path());
    assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    let events = events(out.path());
    let selections: Vec<&Value> = events.iter().filter(|e| e["event"] == "speaker_selected").collect();
    assert_eq!(selections.len(), 3);
    assert_eq!(selections[0]["source"], "model");
    assert_eq!(selections[1]["source"], "fallback");
    assert_eq!(selections[1]["attempts"], 2);
    let speakers: Vec<&str> = selections.iter().map(|s| s["agent_id"].as_str().unwrap()).collect();
    assert!(speakers.windows(2).all(|w| w[0] != w[1]), "{speakers:?}");
    for s in &selections {
        let eligible = s["eligible"].as_array().unwrap();
        assert!(eligible.contains(&s["agent_id"]), "{s}");
    }
    assert_eq!(count(&events, "round_complete"), 1);
}

#[test]
fn cultural_background_reaches_every_prompt() {
    let out = tempfile::tempdir().unwrap();
    let result = run("scenarios/cultural_background.toml", out.path());
    assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    let record = std::fs::read_to_string(out.path().join("transcript.jsonl")).unwrap();
    let header: Value = serde_json::from_str(record.lines().next().unwrap()).unwrap();
    let prompts = header["prompts"].as_object().unwrap();
    assert_eq!(prompts.len(), 3);
    for prompt in prompts.values() {
        assert!(prompt.as_str().unwrap().ends_with("Cultural background: Mexican\n"), "{prompt}");
    }
    let first = events(out.path()).into_iter().find(|e| e["event"] == "message_end").unwrap();
    assert_eq!(first["agent_id"], "ethnobotany");
}

#[test]
fn empty_message_list_exports_only_the_header() {
    let out = tempfile::tempdir().unwrap();
    let result = run("tests/data/empty_messages.toml", out.path());
    assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    assert!(events(out.path()).is_empty());
    let export = std::fs::read_to_string(out.path().join("export.txt")).unwrap();
    assert!(export.contains("Location: Leeds, UK\n"));
    assert!(!export.contains("(round "), "{export}");
}

#[test]
fn malformed_scenario_is_an_input_error() {
    let out = tempfile::tempdir().unwrap();
    let result = run("tests/data/malformed.toml", out.path());
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("malformed.toml"), "{stderr}");

    let missing = run("tests/data/does_not_exist.toml", out.path());
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run("scenarios/planting_question.toml", a.path()).status.code(), Some(0));
    assert_eq!(run("scenarios/planting_question.toml", b.path()).status.code(), Some(0));
    for file in ["export.txt", "events.jsonl", "frames.jsonl", "transcript.jsonl"] {
        let left = std::fs::read(a.path().join(file)).unwrap();
        let right = std::fs::read(b.path().join(file)).unwrap();
        assert!(left == right, "{file} differs between runs");
    }
}

fn check_personas(path: &Path, merge: bool) -> Output {
    let mut cmd = bin();
    cmd.arg("check-personas").arg(path);
    if merge {
        cmd.arg("--merge");
    }
    cmd.output().unwrap()
}

#[test]
fn builtin_persona_file_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/personas.toml");
    let result = check_personas(&path, false);
    assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("experience, environment, ethnobotany"), "{stdout}");

    // Merged onto the built-ins every id collides.
    let merged = check_personas(&path, true);
    assert_eq!(merged.status.code(), Some(2));
}

#[test]
fn duplicate_ids_are_rejected_by_name() {
    let result = check_personas(&manifest_path("tests/data/duplicate_id.toml"), false);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("soil"), "{stderr}");
}

#[test]
fn unknown_placeholders_are_rejected_by_name() {
    let result = check_personas(&manifest_path("tests/data/unknown_placeholder.toml"), true);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("hardiness_zone"), "{stderr}");
    assert!(stderr.contains("pests"), "{stderr}");
}
