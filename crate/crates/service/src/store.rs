//! Append-only JSONL persistence for sessions, turns and annotations.
//!
//! Every state change is one line. Opening a file replays it to rebuild the
//! in-memory index; a torn last line (crash during a write) is skipped.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tod_core::config::PipelineConfig;
use tod_core::dialogue::GoalSpec;
use tod_core::eval::AnnotationRecord;
use tod_core::pipeline::{Session, TurnRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        goal_id: String,
        goal: GoalSpec,
        config: PipelineConfig,
        at_ms: u64,
    },
    Turn {
        session_id: String,
        record: Box<TurnRecord>,
        /// Session state after the turn.
        state: Box<Session>,
        at_ms: u64,
    },
    Annotation {
        session_id: String,
        annotation: AnnotationRecord,
        at_ms: u64,
    },
}

impl Event {
    pub fn session_id(&self) -> &str {
        match self {
            Event::Created { session_id, .. }
            | Event::Turn { session_id, .. }
            | Event::Annotation { session_id, .. } => session_id,
        }
    }
}

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl EventLog {
    /// Opens (creating if needed) a log and returns the events already in it.
    pub fn open(path: &Path) -> io::Result<(Self, Vec<Event>)> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut events = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str(&line) {
                    Ok(e) => events.push(e),
                    Err(e) => log::warn!("{}:{}: skipping unreadable record: {e}", path.display(), i + 1),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((
            Self {
                path: path.to_path_buf(),
                file: Mutex::new(file),
            },
            events,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, event: &Event) -> io::Result<()> {
        let mut line = serde_json::to_string(event).map_err(io::Error::other)?;
        line.push('\n');
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(line.as_bytes())?;
        file.flush()
    }
}
