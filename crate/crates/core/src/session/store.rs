//! Append-only per-session record files.
//!
//! Each session is one JSON-lines file `<session_id>.jsonl` in the store
//! directory. The first line is the session header; every following line is
//! one transcript entry, written and synced as soon as the entry completes.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Session;
use crate::agents::{AgentId, AgentSet};
use crate::profile::UserProfile;
use crate::transcript::{check_transcript, rfc3339, TranscriptEntry};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("session `{0}` not found in store")]
    NotFound(String),
    #[error("session `{0}` already exists in store")]
    AlreadyExists(String),
    #[error("invalid session id `{0}`")]
    InvalidId(String),
    #[error("corrupt record {file}:{line}: {detail}")]
    Corrupt {
        file: String,
        line: usize,
        detail: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct SessionHeader {
    session_id: String,
    #[serde(with = "rfc3339")]
    created_at: DateTime<Utc>,
    profile: UserProfile,
    agents: AgentSet,
    prompts: BTreeMap<AgentId, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Session(SessionHeader),
    Entry(TranscriptEntry),
}

/// Session ids double as file names, so only a safe alphabet is accepted.
pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| StoreError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, session_id: &str) -> Result<PathBuf, StoreError> {
        if !valid_session_id(session_id) {
            return Err(StoreError::InvalidId(session_id.to_string()));
        }
        Ok(self.dir.join(format!("{session_id}.jsonl")))
    }

    pub fn exists(&self, session_id: &str) -> bool {
        self.path_for(session_id).map(|p| p.exists()).unwrap_or(false)
    }

    fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
        move |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn write_line(file: &mut File, path: &Path, record: &Record) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(record).expect("records always serialize");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(Self::io_err(path))?;
        file.sync_data().map_err(Self::io_err(path))
    }

    /// Write a new session file holding the header and any existing entries.
    /// Never overwrites an existing file.
    pub fn create(&self, session: &Session) -> Result<(), StoreError> {
        let path = self.path_for(&session.session_id)?;
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|source| {
                if source.kind() == std::io::ErrorKind::AlreadyExists {
                    StoreError::AlreadyExists(session.session_id.clone())
                } else {
                    StoreError::Io {
                        path: path.display().to_string(),
                        source,
                    }
                }
            })?;
        let header = Record::Session(SessionHeader {
            session_id: session.session_id.clone(),
            created_at: session.created_at,
            profile: session.profile.clone(),
            agents: session.agent_set.clone(),
            prompts: session.prompts.clone(),
        });
        Self::write_line(&mut file, &path, &header)?;
        for entry in &session.transcript {
            Self::write_line(&mut file, &path, &Record::Entry(entry.clone()))?;
        }
        Ok(())
    }

    /// Durably append one entry to an existing session file.
    pub fn append(&self, session_id: &str, entry: &TranscriptEntry) -> Result<(), StoreError> {
        let path = self.path_for(session_id)?;
        let mut file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|source| {
                if source.kind() == std::io::ErrorKind::NotFound {
                    StoreError::NotFound(session_id.to_string())
                } else {
                    StoreError::Io {
                        path: path.display().to_string(),
                        source,
                    }
                }
            })?;
        Self::write_line(&mut file, &path, &Record::Entry(entry.clone()))
    }

    /// Rebuild a session from its record file. Any unreadable record fails
    /// the whole restore with the file and line named.
    pub fn load(&self, session_id: &str) -> Result<Session, StoreError> {
        let path = self.path_for(session_id)?;
        let file = File::open(&path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                StoreError::NotFound(session_id.to_string())
            } else {
                StoreError::Io {
                    path: path.display().to_string(),
                    source,
                }
            }
        })?;
        let file_name = path.display().to_string();
        let corrupt = |line: usize, detail: String| StoreError::Corrupt {
            file: file_name.clone(),
            line,
            detail,
        };

        let mut header: Option<SessionHeader> = None;
        let mut transcript = Vec::new();
        for (index, line) in BufReader::new(file).lines().enumerate() {
            let line_no = index + 1;
            let line = line.map_err(|e| corrupt(line_no, e.to_string()))?;
            if line.trim().is_empty() {
                return Err(corrupt(line_no, "empty record".into()));
            }
            let record: Record =
                serde_json::from_str(&line).map_err(|e| corrupt(line_no, e.to_string()))?;
            match (record, &header) {
                (Record::Session(h), None) if line_no == 1 => {
                    if h.session_id != session_id {
                        return Err(corrupt(
                            line_no,
                            format!("header names session `{}`", h.session_id),
                        ));
                    }
                    header = Some(h);
                }
                (Record::Session(_), _) => {
                    return Err(corrupt(line_no, "unexpected session header".into()))
                }
                (Record::Entry(_), None) => {
                    return Err(corrupt(line_no, "entry before session header".into()))
                }
                (Record::Entry(e), Some(_)) => transcript.push(e),
            }
        }
        let Some(header) = header else {
            return Err(corrupt(1, "missing session header".into()));
        };
        // Round size is a service setting, so only ordering is checked here.
        check_transcript(&transcript, u32::MAX)
            .map_err(|detail| corrupt(transcript.len() + 1, detail))?;

        let updated_at = transcript.last().map_or(header.created_at, |e| e.timestamp);
        Ok(Session {
            session_id: header.session_id,
            profile: header.profile,
            agent_set: header.agents,
            prompts: header.prompts,
            transcript,
            created_at: header.created_at,
            updated_at,
        })
    }

    /// Ids of every session file in the store, sorted.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut ids: Vec<String> = fs::read_dir(&self.dir)
            .map_err(Self::io_err(&self.dir))?
            .filter_map(Result::ok)
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".jsonl").map(str::to_string)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }
}
