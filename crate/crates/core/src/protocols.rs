//! Dosing policies: minimum effective dose, the dual-gain integral
//! controller, and the non-adaptive linear and exponential baselines.

use serde::{Deserialize, Serialize};

use crate::dynamics::convolve;
use crate::error::{Error, Result};
use crate::models::{GeneralizedResponse, ImpulseResponse};

/// Default bisection tolerance, in well-being units.
pub const DEFAULT_BISECTION_EPS: f64 = 1e-8;

/// Hard stop for the bisection loop regardless of tolerance.
pub const MAX_BISECTION_ITERATIONS: u32 = 200;

/// Controller gains, `k_plus` applied above the setpoint and `k_minus` below.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub k_plus: f64,
    pub k_minus: f64,
}

impl Gains {
    pub fn new(k_plus: f64, k_minus: f64) -> Result<Self> {
        if !(k_plus.is_finite() && k_plus > 0.0) {
            return Err(Error::param("k_plus", format!("{k_plus} must be positive")));
        }
        if !(k_minus.is_finite() && k_minus >= k_plus) {
            return Err(Error::param(
                "k_minus",
                format!("{k_minus} must be finite and at least k_plus = {k_plus}"),
            ));
        }
        Ok(Self { k_plus, k_minus })
    }

    /// Gains that bracket every `g(0)` in `[g0_lo, g0_hi]`.
    pub fn from_g0_range(g0_lo: f64, g0_hi: f64) -> Result<Self> {
        if !(g0_lo.is_finite() && g0_lo > 0.0) {
            return Err(Error::param("g0_lo", format!("{g0_lo} must be positive")));
        }
        if !(g0_hi.is_finite() && g0_hi >= g0_lo) {
            return Err(Error::param("g0_hi", format!("{g0_hi} must be at least g0_lo = {g0_lo}")));
        }
        Self::new(1.0 / g0_hi, 1.0 / g0_lo)
    }

    /// Gains from bounds stated as fractions of the true `g(0)`:
    /// `k_minus = 1 / (lo * g0)` and `k_plus = 1 / (hi * g0)`.
    pub fn from_g0_fractions(g0: f64, lo: f64, hi: f64) -> Result<Self> {
        Self::from_g0_range(lo * g0, hi * g0)
    }

    /// Gains from a clinical rule of thumb: `dose` units move well-being by
    /// somewhere between `dy_lo` and `dy_hi`.
    pub fn from_rule_of_thumb(dose: f64, dy_lo: f64, dy_hi: f64) -> Result<Self> {
        if !(dose.is_finite() && dose > 0.0) {
            return Err(Error::param("dose", format!("{dose} must be positive")));
        }
        Self::from_g0_range(dy_lo / dose, dy_hi / dose)
    }

    /// Whether `k_plus <= 1/g0 <= k_minus`.
    pub fn brackets(&self, g0: f64) -> bool {
        g0 > 0.0 && self.k_plus * g0 <= 1.0 && 1.0 <= self.k_minus * g0
    }
}

pub fn gains_from_g0_range(g0_lo: f64, g0_hi: f64) -> Result<(f64, f64)> {
    Gains::from_g0_range(g0_lo, g0_hi).map(|g| (g.k_plus, g.k_minus))
}

/// How the MED policy lower-bounds the next natural progression value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NatBound {
    /// The progression never decreases.
    #[default]
    Monotone,
    /// The progression falls by at most `l_nat` per step.
    Lipschitz { l_nat: f64 },
    /// The true next value, available only in simulation.
    Clairvoyant,
}

/// Lower bound on `y_nat_{t+1}` from the current value. The clairvoyant mode
/// has no closed form here and returns the current value.
pub fn nat_lower_bound(mode: NatBound, y_nat_current: f64) -> f64 {
    match mode {
        NatBound::Lipschitz { l_nat } => y_nat_current - l_nat,
        NatBound::Monotone | NatBound::Clairvoyant => y_nat_current,
    }
}

/// The well-being floor, fixed or varying per taper step. A schedule holds its
/// last value past the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConstraintPath {
    Constant(f64),
    Schedule(Vec<f64>),
}

impl ConstraintPath {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            Self::Constant(v) => *v,
            Self::Schedule(values) => values[t.min(values.len() - 1)],
        }
    }

    /// Checks finiteness and, for schedules, that `len` steps are covered.
    pub fn validate(&self, len: usize) -> Result<()> {
        match self {
            Self::Constant(v) if !v.is_finite() => Err(Error::param("y_min", "must be finite")),
            Self::Schedule(values) => {
                if values.iter().any(|v| !v.is_finite()) {
                    Err(Error::param("y_min", "schedule must be finite"))
                } else if values.len() < len {
                    Err(Error::LengthMismatch {
                        what: "constraint schedule",
                        expected: len,
                        found: values.len(),
                    })
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// What a policy sees when choosing the dose at taper step `step`.
///
/// `wellbeing` runs through the current observation and `doses` through the
/// previous dose, both from the start of the run (warm-up included).
#[derive(Debug, Clone)]
pub struct Observation<'a> {
    pub step: usize,
    pub wellbeing: &'a [f64],
    pub doses: &'a [f64],
    pub kernel: &'a ImpulseResponse,
    pub constraint_now: f64,
    pub constraint_next: f64,
    pub warmup_dose: f64,
    true_nat_next: Option<f64>,
}

impl<'a> Observation<'a> {
    pub fn new(
        step: usize,
        wellbeing: &'a [f64],
        doses: &'a [f64],
        kernel: &'a ImpulseResponse,
        constraint_now: f64,
        constraint_next: f64,
        warmup_dose: f64,
    ) -> Self {
        Self {
            step,
            wellbeing,
            doses,
            kernel,
            constraint_now,
            constraint_next,
            warmup_dose,
            true_nat_next: None,
        }
    }

    pub fn with_true_nat_next(mut self, value: f64) -> Self {
        self.true_nat_next = Some(value);
        self
    }

    fn current_wellbeing(&self) -> f64 {
        *self.wellbeing.last().expect("an observation always holds y_0")
    }

    /// Natural progression at the current time, recovered from the record.
    fn current_nat(&self) -> f64 {
        self.current_wellbeing() - convolve(self.kernel, self.doses)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseDecision {
    pub dose: f64,
    pub capped: bool,
}

impl DoseDecision {
    fn uncapped(dose: f64) -> Self {
        Self { dose, capped: false }
    }
}

/// A dosing policy as a plain value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaperPolicy {
    Med {
        #[serde(default)]
        nat_bound: NatBound,
    },
    Integral {
        k_plus: f64,
        k_minus: f64,
        #[serde(default)]
        delta: f64,
        /// Dose assumed at the step before the first decision; the warm-up
        /// dose when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        u_init: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dose_cap: Option<f64>,
    },
    Linear { u0: f64, rate: f64 },
    Exponential { u0: f64, rate: f64 },
    Fixed { u: f64 },
}

impl TaperPolicy {
    pub fn integral(gains: Gains, delta: f64) -> Self {
        Self::Integral {
            k_plus: gains.k_plus,
            k_minus: gains.k_minus,
            delta,
            u_init: None,
            dose_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} must be finite and nonnegative")))
            }
        };
        match *self {
            Self::Med { nat_bound: NatBound::Lipschitz { l_nat } } => nonneg("l_nat", l_nat),
            Self::Med { .. } => Ok(()),
            Self::Integral { k_plus, k_minus, delta, u_init, dose_cap } => {
                Gains::new(k_plus, k_minus)?;
                if !delta.is_finite() {
                    return Err(Error::param("delta", "must be finite"));
                }
                if let Some(u) = u_init {
                    nonneg("u_init", u)?;
                }
                if let Some(cap) = dose_cap {
                    nonneg("dose_cap", cap)?;
                }
                Ok(())
            }
            Self::Linear { u0, rate } => {
                nonneg("u0", u0)?;
                if rate.is_finite() && rate > 0.0 {
                    Ok(())
                } else {
                    Err(Error::param("rate", format!("{rate} must be positive")))
                }
            }
            Self::Exponential { u0, rate } => {
                nonneg("u0", u0)?;
                if rate > 0.0 && rate < 1.0 {
                    Ok(())
                } else {
                    Err(Error::param("rate", format!("{rate} must lie in (0, 1)")))
                }
            }
            Self::Fixed { u } => nonneg("u", u),
        }
    }

    pub fn is_clairvoyant(&self) -> bool {
        matches!(self, Self::Med { nat_bound: NatBound::Clairvoyant })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Med { .. } => "med",
            Self::Integral { .. } => "integral",
            Self::Linear { .. } => "linear",
            Self::Exponential { .. } => "exponential",
            Self::Fixed { .. } => "fixed",
        }
    }

    pub fn decide(&self, obs: &Observation<'_>) -> Result<DoseDecision> {
        match *self {
            Self::Med { nat_bound } => {
                let lb = match nat_bound {
                    NatBound::Clairvoyant => obs.true_nat_next.ok_or_else(|| {
                        Error::param("nat_bound", "clairvoyant bound needs the true progression")
                    })?,
                    bound => nat_lower_bound(bound, obs.current_nat()),
                };
                med_dose(obs.kernel, obs.doses, obs.constraint_next, lb).map(DoseDecision::uncapped)
            }
            Self::Integral { k_plus, k_minus, delta, u_init, dose_cap } => {
                let u_prev = if obs.step == 0 {
                    u_init.unwrap_or(obs.warmup_dose)
                } else {
                    *obs.doses.last().expect("taper steps after the first follow a dose")
                };
                let u = integral_dose(
                    u_prev,
                    obs.current_wellbeing(),
                    obs.constraint_now,
                    k_plus,
                    k_minus,
                    delta,
                );
                Ok(match dose_cap {
                    Some(cap) if u > cap => DoseDecision { dose: cap, capped: true },
                    _ => DoseDecision::uncapped(u),
                })
            }
            Self::Linear { u0, rate } => Ok(DoseDecision::uncapped(linear_dose(u0, rate, obs.step))),
            Self::Exponential { u0, rate } => {
                Ok(DoseDecision::uncapped(exponential_dose(u0, rate, obs.step)))
            }
            Self::Fixed { u } => Ok(DoseDecision::uncapped(u)),
        }
    }
}

/// Effect still arriving from past doses: `sum_{k=1}^{t} g(k) u_{t-k}` where
/// `history` is `u_0..u_{t-1}`.
pub fn carryover(g: &ImpulseResponse, history: &[f64]) -> f64 {
    let t = history.len();
    (1..=t.min(g.horizon().saturating_sub(1)))
        .map(|k| g.at(k) * history[t - k])
        .sum()
}

/// The smallest dose that lifts the next well-being value to `y_min_next`
/// when the natural progression sits at `y_nat_lb_next`.
pub fn med_dose(
    g: &ImpulseResponse,
    history: &[f64],
    y_min_next: f64,
    y_nat_lb_next: f64,
) -> Result<f64> {
    let g0 = g.head();
    if !(g0 > 0.0) {
        return Err(Error::NonPositiveHead(g0));
    }
    Ok(((y_min_next - y_nat_lb_next - carryover(g, history)) / g0).max(0.0))
}

/// One step of the dual-gain integral law against the setpoint `y_min + delta`.
///
/// Above the setpoint the dose falls by `k_plus` per unit of excess; below it
/// rises by `k_minus` per unit of shortfall.
pub fn integral_dose(
    u_prev: f64,
    y: f64,
    y_min: f64,
    k_plus: f64,
    k_minus: f64,
    delta: f64,
) -> f64 {
    let e = y - (y_min + delta);
    (u_prev - k_plus * e.max(0.0) - k_minus * e.min(0.0)).max(0.0)
}

pub fn linear_dose(u0: f64, rate: f64, t: usize) -> f64 {
    (u0 - rate * t as f64).max(0.0)
}

pub fn exponential_dose(u0: f64, rate: f64, t: usize) -> f64 {
    rate.powi(t as i32) * u0
}

/// Baseline schedule value at step `t`; `None` for adaptive policies.
pub fn baseline_dose(policy: &TaperPolicy, t: usize) -> Option<f64> {
    match *policy {
        TaperPolicy::Linear { u0, rate } => Some(linear_dose(u0, rate, t)),
        TaperPolicy::Exponential { u0, rate } => Some(exponential_dose(u0, rate, t)),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BisectionOutcome {
    pub dose: f64,
    /// Number of midpoint evaluations performed.
    pub iterations: u32,
    pub target: f64,
}

/// Iterations guaranteed to reach tolerance `eps` on `[0, dose_cap]` when the
/// immediate response has slope at most `slope_hi`.
pub fn bisection_iteration_bound(dose_cap: f64, eps: f64, slope_hi: f64) -> u32 {
    let eps_u = eps / slope_hi;
    (dose_cap / eps_u).log2().ceil().max(0.0) as u32
}

/// Minimum effective dose for a nonlinear response, solving
/// `g(0, u) = target` by bisection.
pub fn generalized_med_dose(
    gr: &GeneralizedResponse,
    history: &[f64],
    y_min_next: f64,
    y_nat_lb_next: f64,
    eps: f64,
) -> Result<BisectionOutcome> {
    if !(eps > 0.0) {
        return Err(Error::param("eps", format!("{eps} must be positive")));
    }
    let t = history.len();
    let carry: f64 = (1..=t.min(gr.slope_lo().len().saturating_sub(1)))
        .map(|k| gr.eval(k, history[t - k]))
        .sum();
    let target = y_min_next - y_nat_lb_next - carry;
    if target <= 0.0 {
        return Ok(BisectionOutcome { dose: 0.0, iterations: 0, target });
    }
    let cap = gr.dose_cap();
    let reachable = gr.eval(0, cap);
    if reachable < target - eps {
        return Err(Error::InfeasibleTarget { target, reachable, dose_cap: cap });
    }
    if (reachable - target).abs() <= eps {
        return Ok(BisectionOutcome { dose: cap, iterations: 0, target });
    }
    let (mut lo, mut hi) = (0.0, cap);
    for iterations in 1..=MAX_BISECTION_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let value = gr.eval(0, mid);
        if (value - target).abs() <= eps {
            return Ok(BisectionOutcome { dose: mid, iterations, target });
        }
        if value < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NoConvergence { eps, iterations: MAX_BISECTION_ITERATIONS })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn g() -> ImpulseResponse {
        ImpulseResponse::from_values(vec![0.5, 0.05, -0.155, -0.2395]).unwrap()
    }

    #[test]
    fn med_examples() {
        let g = g();
        assert_eq!(med_dose(&g, &[], -1.0, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(med_dose(&g, &[], 0.25, 0.0).unwrap(), 0.5);
        assert_abs_diff_eq!(med_dose(&g, &[1.0], 0.25, 0.0).unwrap(), 0.4, epsilon = 1e-15);
        let bad = ImpulseResponse::from_values(vec![-0.1, 0.2]).unwrap();
        assert!(matches!(med_dose(&bad, &[], 0.0, 0.0), Err(Error::NonPositiveHead(_))));
    }

    #[test]
    fn nat_bounds() {
        assert_eq!(nat_lower_bound(NatBound::Monotone, 0.2), 0.2);
        assert_abs_diff_eq!(nat_lower_bound(NatBound::Lipschitz { l_nat: 0.1 }, 0.2), 0.1);
        assert_eq!(nat_lower_bound(NatBound::Lipschitz { l_nat: 0.0 }, 0.2), 0.2);
    }

    #[test]
    fn integral_examples() {
        assert_abs_diff_eq!(integral_dose(1.0, 0.0, -1.0, 0.5, 2.0, 0.0), 0.5);
        assert_abs_diff_eq!(integral_dose(1.0, -2.0, -1.0, 0.5, 2.0, 0.0), 3.0);
        assert_eq!(integral_dose(0.1, 10.0, 0.0, 0.5, 2.0, 0.0), 0.0);
        // padding moves the setpoint up
        assert_abs_diff_eq!(integral_dose(1.0, 0.0, -1.0, 0.5, 2.0, 0.5), 0.75);
    }

    #[test]
    fn gain_selection() {
        let rule = Gains::from_rule_of_thumb(5.0, 1.0, 2.0).unwrap();
        assert_abs_diff_eq!(rule.k_plus, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(rule.k_minus, 5.0, epsilon = 1e-12);

        let g0 = 0.8;
        let six = Gains::from_g0_fractions(g0, 0.5, 1.5).unwrap();
        assert_abs_diff_eq!(six.k_plus, (2.0 / 3.0) / g0, epsilon = 1e-12);
        assert_abs_diff_eq!(six.k_minus, 2.0 / g0, epsilon = 1e-12);
        assert!(six.brackets(g0));

        let exact = Gains::from_g0_range(g0, g0).unwrap();
        assert_eq!(exact.k_plus, exact.k_minus);
        assert!(exact.brackets(g0));

        assert!(Gains::from_g0_range(0.4, 0.2).is_err());
        assert!(Gains::from_g0_range(0.0, 0.2).is_err());
        assert!(Gains::new(2.0, 1.0).is_err());
    }

    #[test]
    fn baselines() {
        assert_abs_diff_eq!(linear_dose(1.0, 0.1, 4), 0.6, epsilon = 1e-15);
        assert_eq!(linear_dose(1.0, 0.1, 20), 0.0);
        assert_abs_diff_eq!(exponential_dose(1.0, 0.9, 2), 0.81, epsilon = 1e-15);
        let p = TaperPolicy::Linear { u0: 1.0, rate: 0.1 };
        assert_eq!(baseline_dose(&p, 0), Some(1.0));
        assert_eq!(baseline_dose(&TaperPolicy::Fixed { u: 1.0 }, 0), None);
    }

    #[test]
    fn policy_validation() {
        let bad = TaperPolicy::Integral {
            k_plus: 2.0,
            k_minus: 1.0,
            delta: 0.0,
            u_init: None,
            dose_cap: None,
        };
        assert!(bad.validate().is_err());
        assert!(TaperPolicy::Exponential { u0: 1.0, rate: 1.0 }.validate().is_err());
        assert!(TaperPolicy::Linear { u0: 1.0, rate: 0.0 }.validate().is_err());
        assert!(TaperPolicy::Fixed { u: -1.0 }.validate().is_err());
    }

    #[test]
    fn policy_json_shape() {
        let p: TaperPolicy =
            serde_json::from_str(r#"{"type":"integral","k_plus":1.0,"k_minus":2.0,"delta":0.5}"#).unwrap();
        assert_eq!(p, TaperPolicy::integral(Gains::new(1.0, 2.0).unwrap(), 0.5));
        let m: TaperPolicy =
            serde_json::from_str(r#"{"type":"med","nat_bound":{"mode":"lipschitz","l_nat":0.1}}"#).unwrap();
        assert_eq!(m, TaperPolicy::Med { nat_bound: NatBound::Lipschitz { l_nat: 0.1 } });
        let m: TaperPolicy = serde_json::from_str(r#"{"type":"med"}"#).unwrap();
        assert_eq!(m, TaperPolicy::Med { nat_bound: NatBound::Monotone });
    }

    #[test]
    fn constraint_paths() {
        let c: ConstraintPath = serde_json::from_str("[0.0, -1.0]").unwrap();
        assert_eq!(c.at(1), -1.0);
        assert_eq!(c.at(7), -1.0);
        assert!(c.validate(3).is_err());
        let c: ConstraintPath = serde_json::from_str("-0.5").unwrap();
        assert_eq!(c.at(100), -0.5);
    }

    #[test]
    fn bisection_saturating_response() {
        let gr = GeneralizedResponse::new(
            |k, u: f64| if k == 0 { 1.0 - (-u).exp() } else { 0.0 },
            vec![0.0],
            vec![1.0],
            10.0,
        )
        .unwrap();
        let out = generalized_med_dose(&gr, &[], 0.5, 0.0, 1e-9).unwrap();
        assert!((gr.eval(0, out.dose) - 0.5).abs() <= 1e-9);
        assert_abs_diff_eq!(out.dose, 2f64.ln(), epsilon = 1e-8);
        assert!(out.iterations <= bisection_iteration_bound(10.0, 1e-9, 1.0));

        let zero = generalized_med_dose(&gr, &[], 0.0, 0.0, 1e-9).unwrap();
        assert_eq!(zero.dose, 0.0);
        assert!(matches!(
            generalized_med_dose(&gr, &[], 2.0, 0.0, 1e-9),
            Err(Error::InfeasibleTarget { .. })
        ));
    }

    #[test]
    fn bisection_linear_case_matches_closed_form() {
        let g = g();
        let gr = GeneralizedResponse::linear(&g, 50.0).unwrap();
        let history = [1.0, 0.8, 0.3];
        let exact = med_dose(&g, &history, 0.4, -0.1).unwrap();
        let out = generalized_med_dose(&gr, &history, 0.4, -0.1, 1e-9).unwrap();
        assert_abs_diff_eq!(out.dose, exact, epsilon = 1e-6);
    }
}
