//! A session from creation to completion, with a restart in the middle.

use std::sync::Arc;

use taper_session::service::ConstraintUpdate;
use taper_session::{CreateSession, EventStore, GainSpec, LoadMode, SessionService, SystemClock, WhatIfQuery};

fn open(dir: &std::path::Path) -> taper_session::Result<SessionService> {
    SessionService::open(EventStore::open(dir)?, Arc::new(SystemClock), LoadMode::Snapshot)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let svc = open(dir.path())?;
    let created = svc.create(CreateSession {
        gains: GainSpec::RuleOfThumb { dose: 5.0, dy_lo: 1.0, dy_hi: 2.0 },
        y_min: -1.0,
        delta: 0.2,
        u_init: 5.0,
        dose_cap: None,
        step_interval_hours: None,
    })?;
    let (id, secret) = (created.id.to_string(), created.secret.clone());
    println!("session {id}, gains {:?}", created.session.state.config.gains);

    for (i, y) in [-0.5, 0.4, 1.1, 0.9].into_iter().enumerate() {
        let r = svc.submit(&id, Some(&secret), y, &format!("visit-{i}"))?;
        println!("step {}: y = {y:>5}, next dose {:.3}", r.step, r.eval.dose);
    }
    let peek = svc.what_if(&id, Some(&secret), &WhatIfQuery { y: Some(0.0), ..Default::default() })?;
    println!("if the next reading were 0.0 the dose would be {:.3}", peek.eval.dose);

    svc.update_constraint(&id, Some(&secret), &ConstraintUpdate { y_min: Some(-0.5), delta: None })?;
    drop(svc);

    let svc = open(dir.path())?;
    let mut step = svc.get(&id, Some(&secret))?.next_step;
    loop {
        let r = svc.submit(&id, Some(&secret), 2.0, &format!("visit-{step}"))?;
        println!("after restart, step {}: next dose {:.3}", r.step, r.eval.dose);
        step += 1;
        if r.can_complete {
            break;
        }
    }
    let done = svc.complete(&id, Some(&secret))?;
    println!("status {:?}, margin on track: {}", done.state.status, done.margin.on_track);
    Ok(())
}
