//! Interactive tapering sessions.
//!
//! A session runs the dual-gain integral law on measurements a person submits
//! one step at a time. Every commit is an event in an append-only JSON-lines
//! log, flushed to disk before the response goes out, and the session state
//! is the fold of that log. [`session::replay`] rebuilds a session and rejects
//! any log whose recorded doses the law does not reproduce bit for bit.
//!
//! ```no_run
//! use std::sync::Arc;
//! use taper_session::{EventStore, SessionService};
//!
//! # async fn run() -> std::io::Result<()> {
//! let store = EventStore::open("sessions").unwrap();
//! let service = Arc::new(SessionService::with_system_clock(store).unwrap());
//! taper_session::http::serve(service, "127.0.0.1:8080".parse().unwrap()).await
//! # }
//! ```

pub mod clock;
pub mod error;
pub mod http;
pub mod service;
pub mod session;
pub mod store;

pub use clock::{Clock, ManualClock, SystemClock};
pub use error::{Result, SessionError};
pub use service::{SessionService, SessionView};
pub use session::{replay, CreateSession, Event, GainSpec, SessionState, WhatIfQuery};
pub use store::{EventStore, LoadMode};
