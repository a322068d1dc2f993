//! Serves the session API on `TAPER_ADDR` (default 127.0.0.1:8080), storing
//! logs under `TAPER_STORE` (default ./sessions). Stop with Ctrl-C.
//!
//! ```text
//! curl -s -X POST localhost:8080/sessions -H 'content-type: application/json' \
//!   -d '{"gains": {"method": "explicit", "k_plus": 0.5, "k_minus": 2}, "y_min": 0, "u_init": 1}'
//! curl -s -X POST localhost:8080/sessions/<id>/measurements -H 'x-session-secret: <secret>' \
//!   -H 'content-type: application/json' -d '{"y": 0.3, "token": "visit-1"}'
//! ```

use std::sync::Arc;

use taper_session::{http, EventStore, SessionService};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let addr = std::env::var("TAPER_ADDR").unwrap_or_else(|_| "127.0.0.1:8080".into()).parse()?;
    let store = EventStore::open(std::env::var("TAPER_STORE").unwrap_or_else(|_| "sessions".into()))?;
    let service = Arc::new(SessionService::with_system_clock(store)?);
    println!("listening on http://{addr}");
    http::serve(service, addr).await?;
    Ok(())
}
