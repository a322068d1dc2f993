use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Duration};
use proptest::prelude::*;
use taper::dynamics::ProtocolFrame;
use taper::models::ImpulseResponse;
use taper::oracles::check_average_bound;
use taper_session::service::ConstraintUpdate;
use taper_session::session::{evaluate, WhatIfBasis};
use taper_session::store::{read_log_file, SNAPSHOT_INTERVAL};
use taper_session::{
    replay, CreateSession, EventStore, GainSpec, LoadMode, ManualClock, SessionError, SessionService, WhatIfQuery,
};

fn open(dir: &Path, mode: LoadMode) -> SessionService {
    let clock = Arc::new(ManualClock::new(DateTime::UNIX_EPOCH + Duration::days(20_000)));
    SessionService::open(EventStore::open(dir).unwrap(), clock, mode).unwrap()
}

fn request() -> CreateSession {
    CreateSession {
        gains: GainSpec::G0Range { g0_lo: 0.25, g0_hi: 1.0 },
        y_min: 0.0,
        delta: 0.25,
        u_init: 2.0,
        dose_cap: None,
        step_interval_hours: None,
    }
}

#[test]
fn state_survives_a_restart_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let (id, secret, view, next_dose) = {
        let svc = open(dir.path(), LoadMode::Snapshot);
        let c = svc.create(request()).unwrap();
        let id = c.id.to_string();
        for (i, y) in [0.1, 0.6, -0.4, 0.2].into_iter().enumerate() {
            svc.submit(&id, Some(&c.secret), y, &format!("t{i}")).unwrap();
        }
        svc.update_constraint(&id, Some(&c.secret), &ConstraintUpdate { y_min: Some(0.2), delta: None }).unwrap();
        let view = svc.get(&id, Some(&c.secret)).unwrap();
        let expected = evaluate(view.state.config.gains, None, view.state.u_prev, 0.9, view.current_constraint).dose;
        (id, c.secret, view, expected)
        // dropped without any shutdown step
    };
    let svc = open(dir.path(), LoadMode::Snapshot);
    assert_eq!(svc.len(), 1);
    assert_eq!(svc.get(&id, Some(&secret)).unwrap(), view);
    let next = svc.submit(&id, Some(&secret), 0.9, "t4").unwrap();
    assert_eq!(next.eval.dose, next_dose);
    assert_eq!(next.step, 4);
    // retried tokens from before the restart are still recognized
    assert!(svc.submit(&id, Some(&secret), 0.6, "t1").unwrap().replayed);
}

#[test]
fn an_interrupted_final_write_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), LoadMode::Snapshot);
    let c = svc.create(request()).unwrap();
    let id = c.id.to_string();
    svc.submit(&id, Some(&c.secret), 0.5, "a").unwrap();
    let before = svc.get(&id, Some(&c.secret)).unwrap();
    drop(svc);

    let log = EventStore::open(dir.path()).unwrap().log_path(c.id);
    let intact = fs::metadata(&log).unwrap().len();
    OpenOptions::new().append(true).open(&log).unwrap().write_all(br#"{"event":"measured","step":1,"#).unwrap();

    let svc = open(dir.path(), LoadMode::Snapshot);
    assert_eq!(svc.get(&id, Some(&c.secret)).unwrap(), before);
    assert_eq!(fs::metadata(&log).unwrap().len(), intact);
    let r = svc.submit(&id, Some(&c.secret), 0.5, "b").unwrap();
    assert_eq!(r.step, 1);
    assert_eq!(read_log_file(&log, false).unwrap().0.len(), 3);
}

#[test]
fn snapshots_and_full_replay_agree() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), LoadMode::Snapshot);
    let c = svc.create(request()).unwrap();
    let id = c.id.to_string();
    for i in 0..(2 * SNAPSHOT_INTERVAL + 3) {
        let y = ((i as f64) * 0.9).sin();
        svc.submit(&id, Some(&c.secret), y, &format!("t{i}")).unwrap();
    }
    let view = svc.get(&id, Some(&c.secret)).unwrap();
    drop(svc);
    assert!(dir.path().join(format!("{}.snapshot.json", c.id)).exists());
    let fast = open(dir.path(), LoadMode::Snapshot).get(&id, Some(&c.secret)).unwrap();
    let full = open(dir.path(), LoadMode::FullReplay).get(&id, Some(&c.secret)).unwrap();
    assert_eq!(fast, view);
    assert_eq!(full, view);
}

#[test]
fn tampered_doses_fail_replay() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), LoadMode::Snapshot);
    let c = svc.create(request()).unwrap();
    let id = c.id.to_string();
    let r = svc.submit(&id, Some(&c.secret), 0.3, "a").unwrap();
    drop(svc);

    let store = EventStore::open(dir.path()).unwrap();
    let path = store.log_path(c.id);
    let (events, _) = read_log_file(&path, false).unwrap();
    assert_eq!(replay(&events).unwrap().recommendations[0].eval.dose, r.eval.dose);

    // one ulp off
    let text = fs::read_to_string(&path).unwrap();
    let nudged = f64::from_bits(r.eval.dose.to_bits() + 1);
    let edited = text.replace(&format!("\"dose\":{}", r.eval.dose), &format!("\"dose\":{nudged}"));
    assert_ne!(edited, text);
    fs::write(&path, edited).unwrap();
    let err = store.load(c.id, LoadMode::FullReplay).unwrap_err();
    assert!(matches!(err, SessionError::ReplayMismatch { step: 0, .. }), "{err}");

    fs::write(&path, text.replacen("\n", "\nnot json\n", 1)).unwrap();
    assert!(matches!(store.load(c.id, LoadMode::FullReplay), Err(SessionError::CorruptLog { .. })));
}

#[test]
fn concurrent_commits_are_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(open(dir.path(), LoadMode::Snapshot));
    let c = svc.create(request()).unwrap();
    let id = c.id.to_string();
    std::thread::scope(|s| {
        for w in 0..4 {
            let (svc, id, secret) = (svc.clone(), id.clone(), c.secret.clone());
            s.spawn(move || {
                for i in 0..10 {
                    svc.submit(&id, Some(&secret), 0.1 * (w as f64) - 0.1, &format!("w{w}-{i}")).unwrap();
                    svc.what_if(&id, Some(&secret), &WhatIfQuery { y: Some(0.0), ..Default::default() }).unwrap();
                }
            });
        }
    });
    let view = svc.get(&id, Some(&c.secret)).unwrap();
    assert_eq!(view.state.measurements.len(), 40);
    assert!(view.state.measurements.iter().enumerate().all(|(i, m)| m.step == i));
    let (events, _) = read_log_file(&svc.store().log_path(c.id), false).unwrap();
    assert_eq!(replay(&events).unwrap(), view.state);
}

#[derive(Debug, Clone)]
enum Op {
    Measure(f64),
    WhatIf(Option<f64>, Option<f64>, Option<f64>, bool),
    Constraint(Option<f64>, Option<f64>),
    Retry(usize),
}

fn op() -> impl Strategy<Value = Op> {
    let opt = |r: std::ops::Range<f64>| proptest::option::of(r);
    prop_oneof![
        4 => (-2.0..2.0f64).prop_map(Op::Measure),
        2 => (opt(-2.0..2.0), opt(-1.0..1.0), opt(0.0..1.0), any::<bool>()).prop_map(|(a, b, c, d)| Op::WhatIf(a, b, c, d)),
        1 => (opt(-1.0..1.0), opt(0.0..1.0)).prop_map(|(a, b)| Op::Constraint(a, b)),
        1 => (0usize..50).prop_map(Op::Retry),
    ]
}

/// Runs `ops`, optionally skipping what-ifs, and returns the service view and
/// the committed log.
fn run(ops: &[Op], with_what_ifs: bool, cap: Option<f64>) -> (taper_session::SessionView, Vec<taper_session::Event>) {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), LoadMode::Snapshot);
    let c = svc.create(CreateSession { dose_cap: cap, ..request() }).unwrap();
    let id = c.id.to_string();
    let s = Some(c.secret.as_str());
    let mut ys = Vec::new();
    for op in ops {
        match *op {
            Op::Measure(y) => {
                svc.submit(&id, s, y, &format!("t{}", ys.len())).unwrap();
                ys.push(y);
            }
            Op::WhatIf(y, y_min, delta, last) if with_what_ifs => {
                let basis = if last { WhatIfBasis::Last } else { WhatIfBasis::Next };
                let q = WhatIfQuery { y: y.or(Some(0.0)), y_min, delta, basis };
                match svc.what_if(&id, s, &q) {
                    Ok(r) => assert!(r.hypothetical),
                    Err(e) => assert!(matches!(e, SessionError::NoCommits)),
                }
            }
            Op::WhatIf(..) => {}
            Op::Constraint(y_min, delta) => {
                if y_min.is_some() || delta.is_some() {
                    svc.update_constraint(&id, s, &ConstraintUpdate { y_min, delta }).unwrap();
                }
            }
            Op::Retry(k) => {
                if !ys.is_empty() {
                    let k = k % ys.len();
                    assert!(svc.submit(&id, s, ys[k], &format!("t{k}")).unwrap().replayed);
                }
            }
        }
    }
    let view = svc.get(&id, s).unwrap();
    let (events, _) = read_log_file(&svc.store().log_path(c.id), false).unwrap();
    (view, events)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replaying_the_log_reproduces_every_recommendation(ops in proptest::collection::vec(op(), 0..40), capped in any::<bool>()) {
        let (view, events) = run(&ops, true, capped.then_some(2.5));
        let state = replay(&events).unwrap();
        prop_assert_eq!(&state, &view.state);
        for (a, b) in state.recommendations.iter().zip(&view.state.recommendations) {
            prop_assert_eq!(a.eval.dose.to_bits(), b.eval.dose.to_bits());
        }
        // the log also survives a text round trip
        let text: String = events.iter().map(|e| serde_json::to_string(e).unwrap() + "\n").collect();
        let parsed: Vec<taper_session::Event> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        prop_assert_eq!(replay(&parsed).unwrap(), state);
    }

    #[test]
    fn what_ifs_never_change_commits(ops in proptest::collection::vec(op(), 0..40)) {
        let (with, _) = run(&ops, true, None);
        let (without, _) = run(&ops, false, None);
        let doses = |v: &taper_session::SessionView| v.state.recommendations.iter().map(|r| r.eval.dose.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(doses(&with), doses(&without));
        prop_assert_eq!(with.margin, without.margin);
    }

    #[test]
    fn margin_matches_the_average_bound_oracle(ops in proptest::collection::vec(op(), 2..40)) {
        let (view, _) = run(&ops, false, None);
        let s = &view.state;
        prop_assume!(s.measurements.len() >= 2);
        let y: Vec<f64> = s.measurements.iter().map(|m| m.y).collect();
        let setpoints: Vec<f64> = (0..y.len()).map(|t| s.constraint_at(t).setpoint()).collect();
        let doses: Vec<f64> = s.recommendations[..y.len() - 1].iter().map(|r| r.eval.dose).collect();
        // the stated form does not depend on the response kernel
        let g = ImpulseResponse::from_values(vec![1.0]).unwrap();
        let frame = ProtocolFrame::new(&g, y, doses, setpoints).unwrap();
        let report = check_average_bound(&frame, 0.0, s.config.gains, 1.0);
        let min = view.margin.per_step.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(view.margin.per_step.len(), frame.horizon());
        prop_assert!((min - report.stated.min_margin).abs() <= 1e-12 * (1.0 + min.abs()));
        prop_assert_eq!(view.margin.per_step.iter().all(|&m| m >= -1e-9), report.stated.passed);
    }

    #[test]
    fn padding_weakly_raises_the_hypothetical_dose(y in -2.0..2.0f64, d1 in 0.0..1.0f64, d2 in 0.0..1.0f64) {
        let dir = tempfile::tempdir().unwrap();
        let svc = open(dir.path(), LoadMode::Snapshot);
        let c = svc.create(request()).unwrap();
        let id = c.id.to_string();
        svc.submit(&id, Some(&c.secret), 0.4, "a").unwrap();
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let q = |delta| WhatIfQuery { y: Some(y), delta: Some(delta), ..Default::default() };
        let a = svc.what_if(&id, Some(&c.secret), &q(lo)).unwrap();
        let b = svc.what_if(&id, Some(&c.secret), &q(hi)).unwrap();
        prop_assert!(b.eval.dose >= a.eval.dose);
    }
}

#[test]
fn raising_the_threshold_lowers_the_decrement() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), LoadMode::Snapshot);
    let c = svc.create(request()).unwrap();
    let id = c.id.to_string();
    let s = Some(c.secret.as_str());
    let before = svc.what_if(&id, s, &WhatIfQuery { y: Some(1.0), ..Default::default() }).unwrap();
    svc.update_constraint(&id, s, &ConstraintUpdate { y_min: Some(0.5), delta: None }).unwrap();
    let after = svc.submit(&id, s, 1.0, "a").unwrap();
    assert!(after.eval.dose > before.eval.dose);
    assert_eq!(after.eval.u_prev, 2.0);
    // and the same value again changes nothing
    let ack = svc.update_constraint(&id, s, &ConstraintUpdate { y_min: Some(0.5), delta: None }).unwrap();
    assert!(!ack.changed);
    let q = WhatIfQuery { y: Some(1.0), basis: WhatIfBasis::Last, ..Default::default() };
    assert_eq!(svc.what_if(&id, s, &q).unwrap().eval.dose, after.eval.dose);
}
