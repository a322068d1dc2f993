//! Independent checks of the tapering guarantees.
//!
//! [`brute_force_min_dose`] enumerates every schedule on a dose grid and is
//! the reference for MED optimality. The `check_*` functions evaluate the
//! integral-controller guarantees on a recorded run and return serializable
//! reports.

pub mod suites;

use serde::{Deserialize, Serialize};

use crate::dynamics::{convolve, ProtocolFrame};
use crate::error::{Error, Result};
use crate::models::{certify_opponent, DoseResponse, ImpulseResponse};
use crate::protocols::{integral_dose, Gains};

/// Slack on well-being comparisons in the inequality checks.
pub const CHECK_TOL: f64 = 1e-8;

/// Slack on constraint satisfaction inside the exhaustive search.
pub const FEAS_TOL: f64 = 1e-9;

/// Largest number of schedules the exhaustive search will consider.
pub const DEFAULT_STATE_CAP: f64 = 1e7;

/// Longest horizon the exhaustive search accepts.
pub const MAX_ORACLE_HORIZON: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseGrid {
    pub max_dose: f64,
    pub resolution: f64,
}

impl Default for DoseGrid {
    fn default() -> Self {
        Self { max_dose: 2.0, resolution: 0.05 }
    }
}

impl DoseGrid {
    pub fn new(max_dose: f64, resolution: f64) -> Result<Self> {
        let grid = Self { max_dose, resolution };
        grid.validate()?;
        Ok(grid)
    }

    fn validate(&self) -> Result<()> {
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(Error::param("resolution", format!("{} must be positive", self.resolution)));
        }
        if !(self.max_dose.is_finite() && self.max_dose >= 0.0) {
            return Err(Error::param("max_dose", format!("{} must be nonnegative", self.max_dose)));
        }
        Ok(())
    }

    /// Number of grid points, `0` and `max_dose` included.
    pub fn levels(&self) -> usize {
        (self.max_dose / self.resolution + 1e-9).floor() as usize + 1
    }

    pub fn dose(&self, level: usize) -> f64 {
        level as f64 * self.resolution
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub schedule: Vec<f64>,
    pub cum_dose: f64,
    /// Schedules whose prefix was evaluated.
    pub visited: u64,
}

/// Cheapest schedule on `grid` keeping `y_t >= y_min_t` for `t = 1..=T`.
///
/// `y_nat` and `y_min_path` cover times `0..=T`. Among schedules of equal
/// cumulative dose the lexicographically smallest is returned.
pub fn brute_force_min_dose<R: DoseResponse + ?Sized>(
    response: &R,
    y_nat: &[f64],
    y_min_path: &[f64],
    horizon: usize,
    grid: DoseGrid,
) -> Result<OracleSolution> {
    grid.validate()?;
    if horizon == 0 || horizon > MAX_ORACLE_HORIZON {
        return Err(Error::param(
            "horizon",
            format!("{horizon} must lie in 1..={MAX_ORACLE_HORIZON}"),
        ));
    }
    for (what, len) in [("natural progression", y_nat.len()), ("constraint path", y_min_path.len())] {
        if len != horizon + 1 {
            return Err(Error::LengthMismatch { what, expected: horizon + 1, found: len });
        }
    }
    let levels = grid.levels();
    let states = (levels as f64).powi(horizon as i32);
    if states > DEFAULT_STATE_CAP {
        return Err(Error::SearchTooLarge { states, cap: DEFAULT_STATE_CAP });
    }

    let mut search = Search {
        response,
        y_nat,
        y_min_path,
        grid,
        levels,
        horizon,
        prefix: Vec::with_capacity(horizon),
        doses: Vec::with_capacity(horizon),
        best: None,
        visited: 0,
    };
    search.descend(0);
    let visited = search.visited;
    let (_, best) = search.best.ok_or(Error::NoFeasibleSchedule)?;
    let schedule: Vec<f64> = best.iter().map(|&l| grid.dose(l)).collect();
    let cum_dose = best.iter().sum::<usize>() as f64 * grid.resolution;
    Ok(OracleSolution { schedule, cum_dose, visited })
}

struct Search<'a, R: ?Sized> {
    response: &'a R,
    y_nat: &'a [f64],
    y_min_path: &'a [f64],
    grid: DoseGrid,
    levels: usize,
    horizon: usize,
    prefix: Vec<usize>,
    doses: Vec<f64>,
    best: Option<(usize, Vec<usize>)>,
    visited: u64,
}

impl<R: DoseResponse + ?Sized> Search<'_, R> {
    fn descend(&mut self, spent: usize) {
        let t = self.prefix.len();
        if t == self.horizon {
            self.best = Some((spent, self.prefix.clone()));
            return;
        }
        for level in 0..self.levels {
            // Equal totals found later are lexicographically larger.
            if matches!(&self.best, Some((b, _)) if spent + level >= *b) {
                break;
            }
            self.visited += 1;
            self.prefix.push(level);
            self.doses.push(self.grid.dose(level));
            let y_next = convolve(self.response, &self.doses) + self.y_nat[t + 1];
            if y_next >= self.y_min_path[t + 1] - FEAS_TOL {
                self.descend(spent + level);
            }
            self.prefix.pop();
            self.doses.pop();
        }
    }
}

/// Outcome of one inequality evaluated at every step of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub passed: bool,
    pub violations: usize,
    pub first_violation: Option<usize>,
    /// Smallest `lhs - rhs` over all steps; `inf` for an empty run.
    pub min_margin: f64,
}

impl BoundCheck {
    /// Each item is `(step, margin, scale)`; a margin fails when it is below
    /// `-CHECK_TOL * max(1, scale)`, `scale` being the magnitude of the terms
    /// compared, so roundoff on large doses is not reported as a violation.
    fn from_margins(margins: impl IntoIterator<Item = (usize, f64, f64)>) -> Self {
        let mut check = Self {
            passed: true,
            violations: 0,
            first_violation: None,
            min_margin: f64::INFINITY,
        };
        for (t, margin, scale) in margins {
            check.min_margin = check.min_margin.min(margin);
            if margin < -CHECK_TOL * scale.max(1.0) {
                check.passed = false;
                check.violations += 1;
                check.first_violation.get_or_insert(t);
            }
        }
        check
    }
}

/// Prefix-average bound on a controller run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageBoundReport {
    pub horizon: usize,
    /// Whether `k_plus <= 1/g0 <= k_minus`; when false the report is
    /// informational only.
    pub hypothesis_holds: bool,
    /// `(sum_{t=1}^T y_t)/T >= s_bar_T - (y_0 - s_0)/T`.
    pub stated: BoundCheck,
    /// The same bound with the dose issued at `T` added to the penalty:
    /// `(sum_{t=1}^T y_t)/T >= s_bar_T - (y_0 - s_0 + g0 u_T)/T`.
    pub with_final_dose: BoundCheck,
}

/// Checks the prefix-average bound of an integral-controller run for every
/// prefix length `T`, where `s_t = y_min_t + delta` is the setpoint and
/// `s_bar_T` its mean over `1..=T`.
///
/// Summing the per-step bound and telescoping leaves a `g0 u_T` term, so only
/// `with_final_dose` follows from the step bound for an arbitrary natural
/// progression. `stated` can fail when the progression drops faster than the
/// controller reacts. The dose after the last observation is recomputed from
/// the controller law.
pub fn check_average_bound(
    frame: &ProtocolFrame,
    delta: f64,
    gains: Gains,
    g0: f64,
) -> AverageBoundReport {
    let y = &frame.wellbeing;
    let horizon = frame.horizon();
    let setpoint = |t: usize| frame.y_min[t] + delta;
    let dose_after = |t: usize| {
        if t < horizon {
            frame.doses[t]
        } else {
            integral_dose(frame.doses[t - 1], y[t], frame.y_min[t], gains.k_plus, gains.k_minus, delta)
        }
    };
    let setpoints: Vec<f64> = (0..=horizon).map(setpoint).collect();
    let stated = stated_average_margins(y, &setpoints);
    let penalty0 = (y[0] - setpoints[0]).abs();
    let mut abs_sum = 0.0;
    let scales: Vec<f64> = (1..=horizon)
        .map(|t| {
            abs_sum += y[t].abs() + setpoints[t].abs();
            (abs_sum + penalty0) / t as f64
        })
        .collect();
    let final_dose = |t: usize| g0 * dose_after(t) / t as f64;
    let corrected = stated
        .iter()
        .zip(&scales)
        .enumerate()
        .map(|(i, (m, s))| (i + 1, m + final_dose(i + 1), s + final_dose(i + 1).abs()));
    AverageBoundReport {
        horizon,
        hypothesis_holds: gains.brackets(g0),
        stated: BoundCheck::from_margins(stated.iter().zip(&scales).enumerate().map(|(i, (&m, &s))| (i + 1, m, s))),
        with_final_dose: BoundCheck::from_margins(corrected),
    }
}

/// Margins of the prefix-average bound without the final-dose term, one per
/// prefix length `T = 1..wellbeing.len()`:
/// `(sum_{t=1}^T y_t)/T - s_bar_T + (y_0 - s_0)/T`.
///
/// `setpoints[t]` is the setpoint in force when `wellbeing[t]` was observed.
pub fn stated_average_margins(wellbeing: &[f64], setpoints: &[f64]) -> Vec<f64> {
    let Some((&y0, rest)) = wellbeing.split_first() else {
        return Vec::new();
    };
    let penalty0 = y0 - setpoints[0];
    let mut sum_y = 0.0;
    let mut sum_s = 0.0;
    rest.iter()
        .zip(&setpoints[1..])
        .enumerate()
        .map(|(i, (&y, &s))| {
            sum_y += y;
            sum_s += s;
            let n = (i + 1) as f64;
            sum_y / n - (sum_s / n - penalty0 / n)
        })
        .collect()
}

/// Checks, for every step `t`,
/// `y_{t+1} >= s_t + (y_nat_{t+1} - y_nat_t) - sum_{k=1}^t g(k) (u_{t-k-1} - u_{t-k})`
/// with `u_{-1} = 0` and `s_t = y_min_t + delta`.
pub fn check_step_bound(frame: &ProtocolFrame, g: &ImpulseResponse, delta: f64) -> BoundCheck {
    let u = |i: isize| if i < 0 { 0.0 } else { frame.doses[i as usize] };
    BoundCheck::from_margins((0..frame.horizon()).map(|t| {
        let (memory, memory_scale) = (1..=t.min(g.horizon().saturating_sub(1)))
            .map(|k| {
                let i = t as isize - k as isize;
                (g.at(k) * (u(i - 1) - u(i)), g.at(k).abs() * (u(i - 1).abs() + u(i).abs()))
            })
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        let rhs = frame.y_min[t] + delta + (frame.nat[t + 1] - frame.nat[t]) - memory;
        let scale = frame.wellbeing[t + 1].abs()
            + frame.y_min[t].abs()
            + delta.abs()
            + frame.nat[t + 1].abs()
            + frame.nat[t].abs()
            + memory_scale;
        (t, frame.wellbeing[t + 1] - rhs, scale)
    }))
}

/// Hypotheses of the finite-time taper guarantee, each checked on the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaperPreconditions {
    pub instantaneous_crossover: bool,
    pub first_step_feasible: bool,
    pub positive_margin: bool,
    /// First `t >= 1` where `y_nat_{t+1} < y_nat_t - g(t) u_0 + margin/t`.
    pub drift_violation: Option<usize>,
}

impl TaperPreconditions {
    pub fn hold(&self) -> bool {
        self.instantaneous_crossover
            && self.first_step_feasible
            && self.positive_margin
            && self.drift_violation.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneTaperReport {
    pub preconditions: TaperPreconditions,
    pub u0: f64,
    /// `ceil(exp(u0 / (k_plus * margin)))`, saturated at `usize::MAX`.
    pub zero_by: usize,
    pub first_increase: Option<usize>,
    pub first_constraint_violation: Option<usize>,
    pub first_late_dose: Option<usize>,
    /// All three conclusions hold. Meaningful when the preconditions hold.
    pub passed: bool,
}

/// Checks non-increasing doses, `y_t >= y_min`, and `u_t = 0` for
/// `t >= ceil(exp(u_0/(k_plus margin)))` on a run over a kernel with
/// `tau0 = 1`. `margin` is the drift margin of the natural progression.
pub fn check_monotone_taper(
    frame: &ProtocolFrame,
    g: &ImpulseResponse,
    k_plus: f64,
    margin: f64,
) -> MonotoneTaperReport {
    let horizon = frame.horizon();
    let u0 = frame.doses.first().copied().unwrap_or(0.0);
    let y_min = &frame.y_min;

    let drift_violation = (1..horizon).find(|&t| {
        frame.nat[t + 1] < frame.nat[t] - g.at(t) * u0 + margin / t as f64 - CHECK_TOL
    });
    let preconditions = TaperPreconditions {
        instantaneous_crossover: matches!(certify_opponent(g), Ok(c) if c.tau0 == 1),
        first_step_feasible: horizon == 0 || frame.wellbeing[1] >= y_min[1] - CHECK_TOL,
        positive_margin: margin > 0.0,
        drift_violation,
    };

    let zero_by = {
        let bound = (u0 / (k_plus * margin)).exp().ceil();
        if bound.is_finite() && bound < usize::MAX as f64 {
            bound as usize
        } else {
            usize::MAX
        }
    };
    let first_increase = (1..horizon).find(|&t| frame.doses[t] > frame.doses[t - 1]);
    let first_constraint_violation =
        (1..=horizon).find(|&t| frame.wellbeing[t] < y_min[t] - CHECK_TOL);
    let first_late_dose = (zero_by.min(horizon)..horizon).find(|&t| frame.doses[t] != 0.0);

    MonotoneTaperReport {
        preconditions,
        u0,
        zero_by,
        first_increase,
        first_constraint_violation,
        first_late_dose,
        passed: first_increase.is_none()
            && first_constraint_violation.is_none()
            && first_late_dose.is_none(),
    }
}

/// The exchange step of the greedy-optimality argument: moves `eps` of the
/// dose at `t0` to `alpha * eps` at `t0 + 1`.
pub fn apply_lpop_modification(schedule: &[f64], t0: usize, eps: f64, alpha: f64) -> Result<Vec<f64>> {
    if t0 + 1 >= schedule.len() {
        return Err(Error::param("t0", format!("{t0} leaves no following step")));
    }
    let mut out = schedule.to_vec();
    out[t0] -= eps;
    out[t0 + 1] += alpha * eps;
    Ok(out)
}
