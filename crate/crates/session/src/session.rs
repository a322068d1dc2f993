//! Session state as a fold over its event log.
//!
//! Every recommendation is recomputed from the committed history when an
//! event is applied, so [`replay`] doubles as an audit: a log whose recorded
//! doses differ from the recomputed ones by even one bit is rejected.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use taper::oracles::stated_average_margins;
use taper::protocols::{integral_dose, Gains};
use uuid::Uuid;

use crate::error::{Result, SessionError};

/// How the controller gains were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum GainSpec {
    Explicit { k_plus: f64, k_minus: f64 },
    /// Bounds on the immediate effect of one dose unit.
    G0Range { g0_lo: f64, g0_hi: f64 },
    /// `dose` units move well-being by between `dy_lo` and `dy_hi`.
    RuleOfThumb { dose: f64, dy_lo: f64, dy_hi: f64 },
}

impl GainSpec {
    pub fn resolve(&self) -> Result<Gains> {
        let gains = match *self {
            Self::Explicit { k_plus, k_minus } => Gains::new(k_plus, k_minus),
            Self::G0Range { g0_lo, g0_hi } => Gains::from_g0_range(g0_lo, g0_hi),
            Self::RuleOfThumb { dose, dy_lo, dy_hi } => Gains::from_rule_of_thumb(dose, dy_lo, dy_hi),
        };
        gains.map_err(|e| SessionError::InvalidGains(e.to_string()))
    }
}

pub const DEFAULT_STEP_INTERVAL_HOURS: f64 = 24.0;

/// Request body for creating a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub gains: GainSpec,
    pub y_min: f64,
    #[serde(default)]
    pub delta: f64,
    pub u_init: f64,
    #[serde(default)]
    pub dose_cap: Option<f64>,
    #[serde(default)]
    pub step_interval_hours: Option<f64>,
}

/// Fixed per-session settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub gains: Gains,
    pub gain_source: GainSpec,
    pub u_init: f64,
    pub dose_cap: Option<f64>,
    pub step_interval_hours: f64,
}

fn finite(name: &str, x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(SessionError::InvalidInput(format!("{name} must be finite, got {x}")))
    }
}

impl CreateSession {
    /// Validates the request and resolves gains.
    pub fn into_config(self) -> Result<(SessionConfig, Constraint)> {
        let gains = self.gains.resolve()?;
        finite("y_min", self.y_min)?;
        finite("delta", self.delta)?;
        if !(finite("u_init", self.u_init)? >= 0.0) {
            return Err(SessionError::InvalidInput(format!("u_init must be non-negative, got {}", self.u_init)));
        }
        if let Some(cap) = self.dose_cap {
            if !(finite("dose_cap", cap)? > 0.0) {
                return Err(SessionError::InvalidInput(format!("dose_cap must be positive, got {cap}")));
            }
        }
        let interval = self.step_interval_hours.unwrap_or(DEFAULT_STEP_INTERVAL_HOURS);
        if !(finite("step_interval_hours", interval)? > 0.0) {
            return Err(SessionError::InvalidInput(format!("step_interval_hours must be positive, got {interval}")));
        }
        let config = SessionConfig {
            gains,
            gain_source: self.gains,
            u_init: self.u_init,
            dose_cap: self.dose_cap,
            step_interval_hours: interval,
        };
        Ok((config, Constraint { y_min: self.y_min, delta: self.delta }))
    }
}

/// Threshold and padding; the controller tracks `y_min + delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub y_min: f64,
    pub delta: f64,
}

impl Constraint {
    pub fn setpoint(&self) -> f64 {
        self.y_min + self.delta
    }
}

/// A measurement arriving well after the expected interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub elapsed_hours: f64,
    /// Whole protocol steps with no measurement.
    pub missed_steps: u64,
}

impl Gap {
    /// A gap is flagged once the elapsed time exceeds one and a half intervals.
    pub fn detect(previous: DateTime<Utc>, now: DateTime<Utc>, interval_hours: f64) -> Option<Self> {
        let elapsed_hours = (now - previous).num_milliseconds() as f64 / 3.6e6;
        if elapsed_hours <= 1.5 * interval_hours {
            return None;
        }
        let missed_steps = ((elapsed_hours / interval_hours).round() as u64).saturating_sub(1).max(1);
        Some(Self { elapsed_hours, missed_steps })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        id: Uuid,
        at: DateTime<Utc>,
        config: SessionConfig,
        constraint: Constraint,
        secret_sha256: String,
    },
    Measured {
        step: usize,
        at: DateTime<Utc>,
        y: f64,
        token: String,
        /// The dose issued in response.
        dose: f64,
        gap: Option<Gap>,
    },
    ConstraintChanged {
        effective_step: usize,
        at: DateTime<Utc>,
        constraint: Constraint,
    },
    Completed {
        at: DateTime<Utc>,
    },
    Aborted {
        at: DateTime<Utc>,
        reason: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub step: usize,
    pub at: DateTime<Utc>,
    pub y: f64,
    pub token: String,
    pub gap: Option<Gap>,
}

/// One evaluation of the integral law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub u_prev: f64,
    pub y: f64,
    pub y_min: f64,
    pub delta: f64,
    pub setpoint: f64,
    /// The law's output before any cap.
    pub raw_dose: f64,
    pub dose: f64,
    pub capped: bool,
    /// Whether the dose went up.
    pub increase: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub step: usize,
    #[serde(flatten)]
    pub eval: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintChange {
    pub effective_step: usize,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub constraint: Constraint,
}

/// Full session state. Recommendations are a pure function of the config,
/// the committed measurements and the constraint log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: Uuid,
    pub created_at: DateTime<Utc>,
    pub config: SessionConfig,
    #[serde(skip_serializing, default)]
    pub secret_sha256: String,
    pub status: SessionStatus,
    pub ended_at: Option<DateTime<Utc>>,
    pub abort_reason: Option<String>,
    pub measurements: Vec<Measurement>,
    pub recommendations: Vec<Recommendation>,
    /// Starts with the creation-time constraint at step 0.
    pub constraint_log: Vec<ConstraintChange>,
    pub u_prev: f64,
}

/// Evaluates the integral law with an optional cap.
pub fn evaluate(gains: Gains, dose_cap: Option<f64>, u_prev: f64, y: f64, constraint: Constraint) -> Evaluation {
    let raw = integral_dose(u_prev, y, constraint.y_min, gains.k_plus, gains.k_minus, constraint.delta);
    let (dose, capped) = match dose_cap {
        Some(cap) if raw > cap => (cap, true),
        _ => (raw, false),
    };
    Evaluation {
        u_prev,
        y,
        y_min: constraint.y_min,
        delta: constraint.delta,
        setpoint: constraint.setpoint(),
        raw_dose: raw,
        dose,
        capped,
        increase: dose > u_prev,
    }
}

impl SessionState {
    /// Starts a state from a creation event.
    pub fn from_created(event: &Event) -> Result<Self> {
        let Event::Created { id, at, config, constraint, secret_sha256 } = event else {
            return Err(SessionError::CorruptLog {
                id: "?".into(),
                detail: "log does not start with a creation event".into(),
            });
        };
        Ok(Self {
            id: *id,
            created_at: *at,
            config: config.clone(),
            secret_sha256: secret_sha256.clone(),
            status: SessionStatus::Active,
            ended_at: None,
            abort_reason: None,
            measurements: Vec::new(),
            recommendations: Vec::new(),
            constraint_log: vec![ConstraintChange { effective_step: 0, at: *at, constraint: *constraint }],
            u_prev: config.u_init,
        })
    }

    /// Index of the next measurement.
    pub fn next_step(&self) -> usize {
        self.measurements.len()
    }

    /// The constraint in force at `step`.
    pub fn constraint_at(&self, step: usize) -> Constraint {
        self.constraint_log
            .iter()
            .rev()
            .find(|c| c.effective_step <= step)
            .map(|c| c.constraint)
            .expect("constraint log starts at step 0")
    }

    pub fn current_constraint(&self) -> Constraint {
        self.constraint_at(self.next_step())
    }

    pub fn find_token(&self, token: &str) -> Option<usize> {
        self.measurements.iter().position(|m| m.token == token)
    }

    /// What the law would issue next for `y`.
    pub fn evaluate_next(&self, y: f64) -> Evaluation {
        evaluate(self.config.gains, self.config.dose_cap, self.u_prev, y, self.current_constraint())
    }

    fn corrupt(&self, detail: impl Into<String>) -> SessionError {
        SessionError::CorruptLog { id: self.id.to_string(), detail: detail.into() }
    }

    fn ensure_active(&self) -> Result<()> {
        match self.status {
            SessionStatus::Active => Ok(()),
            other => Err(SessionError::NotActive(other)),
        }
    }

    /// Applies one event after checking it against the current state. A
    /// measurement's recorded dose must equal the recomputed one exactly.
    pub fn apply(&mut self, event: &Event) -> Result<()> {
        match event {
            Event::Created { .. } => return Err(self.corrupt("duplicate creation event")),
            Event::Measured { step, at, y, token, dose, gap } => {
                self.ensure_active()?;
                if *step != self.next_step() {
                    return Err(self.corrupt(format!("measurement step {step}, expected {}", self.next_step())));
                }
                if self.find_token(token).is_some() {
                    return Err(self.corrupt(format!("token {token:?} committed twice")));
                }
                let eval = self.evaluate_next(*y);
                if eval.dose.to_bits() != dose.to_bits() {
                    return Err(SessionError::ReplayMismatch {
                        id: self.id,
                        step: *step,
                        recorded: *dose,
                        recomputed: eval.dose,
                    });
                }
                self.measurements.push(Measurement { step: *step, at: *at, y: *y, token: token.clone(), gap: *gap });
                self.recommendations.push(Recommendation { step: *step, eval });
                self.u_prev = eval.dose;
            }
            Event::ConstraintChanged { effective_step, at, constraint } => {
                self.ensure_active()?;
                if *effective_step != self.next_step() {
                    return Err(self.corrupt(format!(
                        "constraint change effective at {effective_step}, expected {}",
                        self.next_step()
                    )));
                }
                self.constraint_log.push(ConstraintChange { effective_step: *effective_step, at: *at, constraint: *constraint });
            }
            Event::Completed { at } => {
                self.ensure_active()?;
                if self.u_prev != 0.0 {
                    return Err(SessionError::DoseNotZero(self.u_prev));
                }
                self.status = SessionStatus::Completed;
                self.ended_at = Some(*at);
            }
            Event::Aborted { at, reason } => {
                self.ensure_active()?;
                self.status = SessionStatus::Aborted;
                self.ended_at = Some(*at);
                self.abort_reason = reason.clone();
            }
        }
        Ok(())
    }

    /// Running margins of the prefix-average bound on the committed
    /// measurements, one per prefix length `T >= 1`, with the first
    /// measurement as `y_0`. Non-negative means on track.
    pub fn average_margins(&self) -> Vec<f64> {
        let y: Vec<f64> = self.measurements.iter().map(|m| m.y).collect();
        let setpoints: Vec<f64> = (0..y.len()).map(|t| self.constraint_at(t).setpoint()).collect();
        stated_average_margins(&y, &setpoints)
    }
}

/// Rebuilds a session from its log, recomputing every recommendation.
pub fn replay(events: &[Event]) -> Result<SessionState> {
    let (first, rest) = events.split_first().ok_or_else(|| SessionError::CorruptLog {
        id: "?".into(),
        detail: "empty log".into(),
    })?;
    let mut state = SessionState::from_created(first)?;
    for event in rest {
        state.apply(event)?;
    }
    Ok(state)
}

/// Which committed state a what-if starts from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhatIfBasis {
    /// The next measurement: `u_prev` is the last issued dose.
    #[default]
    Next,
    /// Re-evaluates the last commit with some inputs changed.
    Last,
}

/// Hypothetical inputs. Omitted fields default to the basis's committed values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WhatIfQuery {
    #[serde(default)]
    pub y: Option<f64>,
    #[serde(default)]
    pub y_min: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub basis: WhatIfBasis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResult {
    pub basis: WhatIfBasis,
    pub step: usize,
    pub hypothetical: bool,
    #[serde(flatten)]
    pub eval: Evaluation,
}

impl SessionState {
    /// Evaluates the law on hypothetical inputs without touching the state.
    pub fn what_if(&self, query: &WhatIfQuery) -> Result<WhatIfResult> {
        for (name, v) in [("y", query.y), ("y_min", query.y_min), ("delta", query.delta)] {
            if let Some(v) = v {
                finite(name, v)?;
            }
        }
        let last = self.measurements.last();
        let (step, u_prev, base) = match query.basis {
            WhatIfBasis::Next => (self.next_step(), self.u_prev, self.current_constraint()),
            WhatIfBasis::Last => {
                let last = last.ok_or(SessionError::NoCommits)?;
                let u_prev = self.recommendations[last.step].eval.u_prev;
                (last.step, u_prev, self.constraint_at(last.step))
            }
        };
        let y = match (query.y, last) {
            (Some(y), _) => y,
            (None, Some(m)) => m.y,
            (None, None) => {
                return Err(SessionError::InvalidInput("y is required before the first measurement".into()))
            }
        };
        let constraint = Constraint {
            y_min: query.y_min.unwrap_or(base.y_min),
            delta: query.delta.unwrap_or(base.delta),
        };
        Ok(WhatIfResult {
            basis: query.basis,
            step,
            hypothetical: true,
            eval: evaluate(self.config.gains, self.config.dose_cap, u_prev, y, constraint),
        })
    }
}
