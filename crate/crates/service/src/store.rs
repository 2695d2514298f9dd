//! One append-only JSONL event file per session.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::ServiceError;
use crate::session::{Event, Session};

type Slot = Arc<Mutex<Session>>;

pub struct SessionStore {
    dir: PathBuf,
    sessions: Mutex<HashMap<String, Slot>>,
    next_id: AtomicU64,
}

fn storage(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Storage(e.to_string())
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, ServiceError> {
    let file = File::open(path).map_err(storage)?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(storage)?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line)
            .map_err(|e| ServiceError::Storage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        events.push(event);
    }
    Ok(events)
}

impl SessionStore {
    /// Opens a store directory, replaying every session file in it.
    pub fn open(dir: &Path) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(dir).map_err(storage)?;
        let mut sessions = HashMap::new();
        let mut max_seq = 0;
        for entry in std::fs::read_dir(dir).map_err(storage)? {
            let path = entry.map_err(storage)?.path();
            if path.extension().is_none_or(|e| e != "jsonl") {
                continue;
            }
            let events = read_events(&path)?;
            let Some(session) = Session::replay(&events)? else {
                continue;
            };
            if let Some(seq) = session.session_id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                max_seq = max_seq.max(seq);
            }
            sessions.insert(session.session_id.clone(), Arc::new(Mutex::new(session)));
        }
        Ok(SessionStore {
            dir: dir.to_path_buf(),
            sessions: Mutex::new(sessions),
            next_id: AtomicU64::new(max_seq + 1),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    fn append(&self, id: &str, event: &Event, create: bool) -> Result<(), ServiceError> {
        let mut line = serde_json::to_string(event).map_err(storage)?;
        line.push('\n');
        let mut opts = OpenOptions::new();
        if create {
            opts.write(true).create_new(true);
        } else {
            opts.append(true);
        }
        let mut file = opts.open(self.log_path(id)).map_err(storage)?;
        file.write_all(line.as_bytes()).map_err(storage)?;
        file.sync_data().map_err(storage)
    }

    /// Creates a session; its first event is on disk before this returns.
    pub fn create(&self, sl: &str) -> Result<Session, ServiceError> {
        let sl = ragmt::text::normalize(sl);
        let id = format!("s{:06}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let event = Event::Created {
            session_id: id.clone(),
            sl,
        };
        let session = Session::apply(None, &event)?;
        self.append(&id, &event, true)?;
        self.sessions
            .lock()
            .expect("store lock")
            .insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    fn slot(&self, id: &str) -> Result<Slot, ServiceError> {
        self.sessions
            .lock()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub fn get(&self, id: &str) -> Result<Session, ServiceError> {
        Ok(self.slot(id)?.lock().expect("session lock").clone())
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.lock().expect("store lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Runs `decide` against the current state with the session locked, then
    /// validates, persists and applies the event it returns. Operations on one
    /// session are serialized; different sessions proceed independently.
    pub fn update<F>(&self, id: &str, decide: F) -> Result<Session, ServiceError>
    where
        F: FnOnce(&Session) -> Result<Event, ServiceError>,
    {
        let slot = self.slot(id)?;
        let mut current = slot.lock().expect("session lock");
        current.check_open()?;
        let event = decide(&current)?;
        let next = Session::apply(Some(current.clone()), &event)?;
        self.append(id, &event, false)?;
        *current = next.clone();
        Ok(next)
    }

    pub fn events(&self, id: &str) -> Result<Vec<Event>, ServiceError> {
        self.slot(id)?;
        read_events(&self.log_path(id))
    }
}
