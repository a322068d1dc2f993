//! Append-only JSON-lines event logs, one file per session, with periodic
//! snapshots.
//!
//! Each append is flushed to disk before it returns. A final line without a
//! trailing newline can only come from a write interrupted before its commit
//! was acknowledged, so loading drops it and truncates the file.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{Result, SessionError};
use crate::session::{replay, Event, SessionState};

/// Events between snapshots.
pub const SNAPSHOT_INTERVAL: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    /// Events folded into `state`.
    events: usize,
    state: SessionState,
    secret_sha256: String,
}

/// How stored sessions are rebuilt on open.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LoadMode {
    /// Start from the latest snapshot and apply the events after it.
    #[default]
    Snapshot,
    /// Replay every log from its first event, ignoring snapshots.
    FullReplay,
}

#[derive(Debug, Clone)]
pub struct EventStore {
    root: PathBuf,
}

/// A session rebuilt from disk.
#[derive(Debug)]
pub struct Loaded {
    pub state: SessionState,
    pub events: usize,
    /// Bytes dropped from an interrupted final write.
    pub truncated_bytes: u64,
}

impl EventStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log_path(&self, id: Uuid) -> PathBuf {
        self.root.join(format!("{id}.jsonl"))
    }

    fn snapshot_path(&self, id: Uuid) -> PathBuf {
        self.root.join(format!("{id}.snapshot.json"))
    }

    /// Starts a new log with its creation event.
    pub fn create(&self, id: Uuid, event: &Event) -> Result<()> {
        let mut file = OpenOptions::new().write(true).create_new(true).open(self.log_path(id))?;
        write_line(&mut file, event)?;
        sync_dir(&self.root)
    }

    /// Appends one event and flushes it to disk.
    pub fn append(&self, id: Uuid, event: &Event) -> Result<()> {
        let mut file = OpenOptions::new().append(true).open(self.log_path(id))?;
        write_line(&mut file, event)
    }

    /// Writes a snapshot atomically. `events` is the log length it reflects.
    pub fn write_snapshot(&self, state: &SessionState, events: usize) -> Result<()> {
        let snap = Snapshot { events, state: state.clone(), secret_sha256: state.secret_sha256.clone() };
        let path = self.snapshot_path(state.id);
        let tmp = path.with_extension("json.tmp");
        let mut file = File::create(&tmp)?;
        serde_json::to_writer(&mut file, &snap).map_err(std::io::Error::from)?;
        file.sync_all()?;
        fs::rename(&tmp, &path)?;
        sync_dir(&self.root)
    }

    /// Reads a log, dropping an interrupted final line.
    pub fn read_log(&self, id: Uuid) -> Result<(Vec<Event>, u64)> {
        read_log_file(&self.log_path(id), true)
    }

    /// Rebuilds one session.
    pub fn load(&self, id: Uuid, mode: LoadMode) -> Result<Loaded> {
        let (events, truncated_bytes) = self.read_log(id)?;
        let snapshot = match mode {
            LoadMode::Snapshot => self.read_snapshot(id)?.filter(|s| s.events <= events.len() && s.events > 0),
            LoadMode::FullReplay => None,
        };
        let state = match snapshot {
            Some(snap) => {
                let mut state = snap.state;
                state.secret_sha256 = snap.secret_sha256;
                for event in &events[snap.events..] {
                    state.apply(event)?;
                }
                state
            }
            None => replay(&events)?,
        };
        if state.id != id {
            return Err(SessionError::CorruptLog { id: id.to_string(), detail: format!("log holds session {}", state.id) });
        }
        Ok(Loaded { state, events: events.len(), truncated_bytes })
    }

    /// Ids of every stored session, in sorted order.
    pub fn session_ids(&self) -> Result<Vec<Uuid>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let name = entry?.file_name();
            let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".jsonl")) else {
                continue;
            };
            if let Ok(id) = Uuid::parse_str(stem) {
                ids.push(id);
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn read_snapshot(&self, id: Uuid) -> Result<Option<Snapshot>> {
        let path = self.snapshot_path(id);
        if !path.exists() {
            return Ok(None);
        }
        // an unreadable snapshot is only a lost shortcut
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?)).ok())
    }
}

fn write_line(file: &mut File, event: &Event) -> Result<()> {
    let mut line = serde_json::to_vec(event).map_err(std::io::Error::from)?;
    line.push(b'\n');
    file.write_all(&line)?;
    file.sync_data()?;
    Ok(())
}

#[cfg(unix)]
fn sync_dir(dir: &Path) -> Result<()> {
    File::open(dir)?.sync_all()?;
    Ok(())
}

#[cfg(not(unix))]
fn sync_dir(_dir: &Path) -> Result<()> {
    Ok(())
}

/// Parses an event log. With `repair`, an unterminated final line is cut
/// from the file; otherwise it is ignored in place.
pub fn read_log_file(path: &Path, repair: bool) -> Result<(Vec<Event>, u64)> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("?").to_string();
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => SessionError::UnknownSession(name.clone()),
        _ => SessionError::Storage(e),
    })?;
    let mut reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut good_len = 0u64;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        if buf.last() != Some(&b'\n') {
            let dropped = n as u64;
            if repair {
                OpenOptions::new().write(true).open(path)?.set_len(good_len)?;
            }
            return Ok((events, dropped));
        }
        let event = serde_json::from_slice(&buf).map_err(|e| SessionError::CorruptLog {
            id: name.clone(),
            detail: format!("line {}: {e}", events.len() + 1),
        })?;
        events.push(event);
        good_len += n as u64;
    }
    Ok((events, 0))
}
