//! In-memory session registry backed by an [`EventStore`].
//!
//! Commits to one session are serialized by a per-session writer lock. Each
//! session publishes an immutable snapshot that readers clone cheaply, so
//! reads and what-ifs never wait on a commit's disk flush and never observe a
//! half-applied event.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use crate::clock::{Clock, SystemClock};
use crate::error::{Result, SessionError};
use crate::session::{
    Constraint, CreateSession, Evaluation, Event, Gap, SessionState, SessionStatus, WhatIfQuery, WhatIfResult,
};
use crate::store::{EventStore, LoadMode, SNAPSHOT_INTERVAL};

pub const MAX_TOKEN_LEN: usize = 128;

struct Entry {
    writer: Mutex<usize>,
    current: RwLock<Arc<SessionState>>,
}

impl Entry {
    fn snapshot(&self) -> Arc<SessionState> {
        self.current.read().unwrap().clone()
    }
}

pub struct SessionService {
    store: EventStore,
    clock: Arc<dyn Clock>,
    sessions: RwLock<HashMap<Uuid, Arc<Entry>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub id: Uuid,
    /// Shown once; required in the `X-Session-Secret` header afterwards.
    pub secret: String,
    pub session: SessionView,
}

/// Response to a measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submitted {
    pub step: usize,
    #[serde(flatten)]
    pub eval: Evaluation,
    pub gap: Option<Gap>,
    /// True when the token had already been committed.
    pub replayed: bool,
    /// The dose is zero and the session can be completed.
    pub can_complete: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintUpdate {
    #[serde(default)]
    pub y_min: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAck {
    pub effective_step: usize,
    #[serde(flatten)]
    pub constraint: Constraint,
    pub changed: bool,
}

/// Running prefix-average margin over committed measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginView {
    /// Margin after `T = 1, 2, ...` measurements beyond the first.
    pub per_step: Vec<f64>,
    pub latest: Option<f64>,
    pub on_track: bool,
}

/// Everything a client needs to render a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub state: SessionState,
    pub next_step: usize,
    pub current_constraint: Constraint,
    pub margin: MarginView,
}

impl From<&SessionState> for SessionView {
    fn from(state: &SessionState) -> Self {
        let per_step = state.average_margins();
        let latest = per_step.last().copied();
        Self {
            next_step: state.next_step(),
            current_constraint: state.current_constraint(),
            margin: MarginView { on_track: latest.is_none_or(|m| m >= -1e-9), latest, per_step },
            state: state.clone(),
        }
    }
}

pub fn hash_secret(secret: &str) -> String {
    Sha256::digest(secret.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn new_secret() -> String {
    format!("{}{}", Uuid::new_v4().simple(), Uuid::new_v4().simple())
}

impl SessionService {
    /// Opens a store and rebuilds every session in it.
    pub fn open(store: EventStore, clock: Arc<dyn Clock>, mode: LoadMode) -> Result<Self> {
        let mut sessions = HashMap::new();
        for id in store.session_ids()? {
            let loaded = store.load(id, mode)?;
            sessions.insert(
                id,
                Arc::new(Entry { writer: Mutex::new(loaded.events), current: RwLock::new(Arc::new(loaded.state)) }),
            );
        }
        Ok(Self { store, clock, sessions: RwLock::new(sessions) })
    }

    pub fn with_system_clock(store: EventStore) -> Result<Self> {
        Self::open(store, Arc::new(SystemClock), LoadMode::Snapshot)
    }

    pub fn store(&self) -> &EventStore {
        &self.store
    }

    pub fn len(&self) -> usize {
        self.sessions.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn entry(&self, id: &str, secret: Option<&str>) -> Result<Arc<Entry>> {
        let uuid = Uuid::parse_str(id).map_err(|_| SessionError::UnknownSession(id.to_string()))?;
        let entry = self
            .sessions
            .read()
            .unwrap()
            .get(&uuid)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSession(id.to_string()))?;
        let secret = secret.ok_or(SessionError::MissingSecret)?;
        if hash_secret(secret) != entry.snapshot().secret_sha256 {
            return Err(SessionError::InvalidSecret);
        }
        Ok(entry)
    }

    /// Validates an event against the published state, persists it, then
    /// publishes the new state. Callers hold the writer lock.
    fn commit(&self, entry: &Entry, count: &mut usize, event: Event) -> Result<Arc<SessionState>> {
        let mut next = (*entry.snapshot()).clone();
        next.apply(&event)?;
        self.store.append(next.id, &event)?;
        *count += 1;
        if (*count).is_multiple_of(SNAPSHOT_INTERVAL) {
            self.store.write_snapshot(&next, *count)?;
        }
        let next = Arc::new(next);
        *entry.current.write().unwrap() = next.clone();
        Ok(next)
    }

    pub fn create(&self, request: CreateSession) -> Result<Created> {
        let (config, constraint) = request.into_config()?;
        let id = Uuid::new_v4();
        let secret = new_secret();
        let event = Event::Created { id, at: self.clock.now(), config, constraint, secret_sha256: hash_secret(&secret) };
        let state = SessionState::from_created(&event)?;
        self.store.create(id, &event)?;
        let view = SessionView::from(&state);
        self.sessions
            .write()
            .unwrap()
            .insert(id, Arc::new(Entry { writer: Mutex::new(1), current: RwLock::new(Arc::new(state)) }));
        Ok(Created { id, secret, session: view })
    }

    /// Commits a measurement and returns the dose for the next step. A token
    /// seen before returns the original recommendation unchanged.
    pub fn submit(&self, id: &str, secret: Option<&str>, y: f64, token: &str) -> Result<Submitted> {
        if !y.is_finite() {
            return Err(SessionError::InvalidInput(format!("y must be finite, got {y}")));
        }
        if token.is_empty() || token.len() > MAX_TOKEN_LEN {
            return Err(SessionError::InvalidInput(format!("token must have 1 to {MAX_TOKEN_LEN} bytes")));
        }
        let entry = self.entry(id, secret)?;
        let mut count = entry.writer.lock().unwrap();
        let state = entry.snapshot();
        if let Some(step) = state.find_token(token) {
            let m = &state.measurements[step];
            if m.y.to_bits() != y.to_bits() {
                return Err(SessionError::TokenConflict { token: token.to_string(), committed: m.y });
            }
            let eval = state.recommendations[step].eval;
            let can_complete =
                state.status == SessionStatus::Active && state.u_prev == 0.0 && step + 1 == state.next_step();
            return Ok(Submitted { step, eval, gap: m.gap, replayed: true, can_complete });
        }
        if state.status != SessionStatus::Active {
            return Err(SessionError::NotActive(state.status));
        }
        let now = self.clock.now();
        let gap = state
            .measurements
            .last()
            .and_then(|m| Gap::detect(m.at, now, state.config.step_interval_hours));
        let step = state.next_step();
        let eval = state.evaluate_next(y);
        let event = Event::Measured { step, at: now, y, token: token.to_string(), dose: eval.dose, gap };
        self.commit(&entry, &mut count, event)?;
        Ok(Submitted { step, eval, gap, replayed: false, can_complete: eval.dose == 0.0 })
    }

    /// Evaluates a hypothetical without committing anything.
    pub fn what_if(&self, id: &str, secret: Option<&str>, query: &WhatIfQuery) -> Result<WhatIfResult> {
        self.entry(id, secret)?.snapshot().what_if(query)
    }

    /// Changes the threshold or padding from the next step on.
    pub fn update_constraint(&self, id: &str, secret: Option<&str>, update: &ConstraintUpdate) -> Result<ConstraintAck> {
        if update.y_min.is_none() && update.delta.is_none() {
            return Err(SessionError::InvalidInput("give y_min, delta or both".into()));
        }
        for (name, v) in [("y_min", update.y_min), ("delta", update.delta)] {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(SessionError::InvalidInput(format!("{name} must be finite")));
            }
        }
        let entry = self.entry(id, secret)?;
        let mut count = entry.writer.lock().unwrap();
        let state = entry.snapshot();
        let old = state.current_constraint();
        let constraint = Constraint { y_min: update.y_min.unwrap_or(old.y_min), delta: update.delta.unwrap_or(old.delta) };
        let effective_step = state.next_step();
        if constraint == old {
            if state.status != SessionStatus::Active {
                return Err(SessionError::NotActive(state.status));
            }
            return Ok(ConstraintAck { effective_step, constraint, changed: false });
        }
        let event = Event::ConstraintChanged { effective_step, at: self.clock.now(), constraint };
        self.commit(&entry, &mut count, event)?;
        Ok(ConstraintAck { effective_step, constraint, changed: true })
    }

    pub fn get(&self, id: &str, secret: Option<&str>) -> Result<SessionView> {
        Ok(SessionView::from(&*self.entry(id, secret)?.snapshot()))
    }

    /// Confirms completion after a zero dose.
    pub fn complete(&self, id: &str, secret: Option<&str>) -> Result<SessionView> {
        let entry = self.entry(id, secret)?;
        let mut count = entry.writer.lock().unwrap();
        let event = Event::Completed { at: self.clock.now() };
        Ok(SessionView::from(&*self.commit(&entry, &mut count, event)?))
    }

    pub fn abort(&self, id: &str, secret: Option<&str>, reason: Option<String>) -> Result<SessionView> {
        let entry = self.entry(id, secret)?;
        let mut count = entry.writer.lock().unwrap();
        let event = Event::Aborted { at: self.clock.now(), reason };
        Ok(SessionView::from(&*self.commit(&entry, &mut count, event)?))
    }
}
