//! Append-only JSON lines, one file per session.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use active_testing::dataset::ItemId;
use active_testing::engine::RunConfig;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Created {
        session_id: Uuid,
        dataset: String,
        config: RunConfig,
        at: DateTime<Utc>,
    },
    BatchIssued {
        batch: usize,
        items: Vec<ItemId>,
        at: DateTime<Utc>,
    },
    VetSubmitted {
        item: ItemId,
        truth: bool,
        at: DateTime<Utc>,
    },
}

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
}

fn log_err(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Log {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

impl EventLog {
    /// Fails if the file already exists.
    pub fn create(path: &Path) -> Result<Self, ServiceError> {
        let file = OpenOptions::new()
            .append(true)
            .create_new(true)
            .open(path)
            .map_err(|e| log_err(path, e))?;
        Ok(EventLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| log_err(path, e))?;
        Ok(EventLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// One `write` per event, so a reader never sees half a line from a
    /// live writer.
    pub fn append(&mut self, event: &SessionEvent) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(event).map_err(|e| log_err(&self.path, e))?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .map_err(|e| log_err(&self.path, e))
    }

    pub fn sync(&self) -> Result<(), ServiceError> {
        self.file.sync_data().map_err(|e| log_err(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<SessionEvent>, ServiceError> {
        let file = File::open(path).map_err(|e| log_err(path, e))?;
        let mut events = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| log_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let event = serde_json::from_str(&line)
                .map_err(|e| log_err(path, format!("line {}: {e}", n + 1)))?;
            events.push(event);
        }
        Ok(events)
    }
}
