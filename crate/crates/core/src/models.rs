//! Opponent-process response kernels.
//!
//! A kernel is the discretized impulse response `g(0..H-1)` of a dose on
//! well-being. This module builds kernels from geometric modes, certifies the
//! opponent-process sign pattern and the linearly-progressing rate condition,
//! block-averages kernels to a coarser time step, and certifies nonlinear
//! responses given per-lag slope bounds.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when deciding the sign of a kernel value and when guarding
/// ratio denominators.
pub const SIGN_TOL: f64 = 1e-12;

/// Default truncation bound on the ignored kernel tail.
pub const DEFAULT_TAIL_TOL: f64 = 1e-9;

/// Default cap on the number of kernel steps built from modes.
pub const DEFAULT_HORIZON_CAP: usize = 4096;

/// Largest `f64` strictly below one. Used as the upper end of the feasible
/// rate interval when no decay-side ratio constrains it.
pub const ALPHA_SUP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Slack on rate comparisons, absorbing rounding in the ratio computations.
pub const RATE_TOL: f64 = 1e-12;

/// One geometric component `c * decay^t` of an impulse response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    #[serde(rename = "c")]
    pub coefficient: f64,
    #[serde(rename = "lambda")]
    pub decay: f64,
}

impl Mode {
    pub fn new(coefficient: f64, decay: f64) -> Result<Self> {
        let mode = Self { coefficient, decay };
        mode.validate(0)?;
        Ok(mode)
    }

    fn validate(&self, index: usize) -> Result<()> {
        if !self.coefficient.is_finite() || self.coefficient == 0.0 {
            return Err(Error::InvalidMode {
                index,
                reason: format!("coefficient {} must be finite and nonzero", self.coefficient),
            });
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::InvalidMode {
                index,
                reason: format!("decay {} must lie in [0, 1)", self.decay),
            });
        }
        Ok(())
    }

    pub fn value(&self, t: usize) -> f64 {
        self.coefficient * self.decay.powi(t as i32)
    }
}

/// Anything that maps a (lag, dose) pair to a well-being contribution.
///
/// Linear kernels and nonlinear per-lag responses both implement this, so the
/// simulator and the brute-force oracle can run against either.
pub trait DoseResponse {
    fn effect(&self, lag: usize, dose: f64) -> f64;

    /// Number of lags with a (possibly) nonzero effect.
    fn memory(&self) -> usize;
}

/// Finite impulse response `g(0..H-1)`; `g(t)` is treated as zero for `t >= H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    values: Vec<f64>,
    tail_tol: f64,
}

impl ImpulseResponse {
    pub fn from_modes(modes: &[Mode], tail_tol: f64) -> Result<Self> {
        Self::from_modes_capped(modes, tail_tol, DEFAULT_HORIZON_CAP)
    }

    /// Evaluates `g(t) = sum c * decay^t` up to and including the first step
    /// `n` at which `sum |c| * decay_max^n <= tail_tol`. The last stored value
    /// is therefore itself below the tail bound.
    pub fn from_modes_capped(modes: &[Mode], tail_tol: f64, cap: usize) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::EmptyModes);
        }
        for (i, m) in modes.iter().enumerate() {
            m.validate(i)?;
        }
        if !(tail_tol.is_finite() && tail_tol > 0.0) {
            return Err(Error::param("tail_tol", format!("{tail_tol} must be positive")));
        }
        let mass: f64 = modes.iter().map(|m| m.coefficient.abs()).sum();
        let slowest = modes.iter().map(|m| m.decay).fold(0.0, f64::max);
        let bound = |n: usize| mass * slowest.powi(n as i32);

        let mut n = if slowest == 0.0 {
            1
        } else {
            let estimate = ((tail_tol / mass).ln() / slowest.ln()).ceil();
            if !estimate.is_finite() || estimate > (cap as f64) + 1.0 {
                let required = if estimate.is_finite() { estimate as usize + 1 } else { usize::MAX };
                return Err(Error::HorizonCap { required, cap, tail_tol });
            }
            (estimate.max(1.0)) as usize
        };
        while bound(n) > tail_tol {
            n += 1;
        }
        while n > 1 && bound(n - 1) <= tail_tol {
            n -= 1;
        }
        let horizon = n + 1;
        if horizon > cap {
            return Err(Error::HorizonCap { required: horizon, cap, tail_tol });
        }
        let values = (0..horizon)
            .map(|t| modes.iter().map(|m| m.value(t)).sum())
            .collect();
        Ok(Self { values, tail_tol })
    }

    /// Wraps an explicit kernel. The tail beyond the last value is exactly zero.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidKernel("kernel must have at least one value".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidKernel(format!("value at lag {i} is not finite")));
        }
        Ok(Self { values, tail_tol: 0.0 })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    pub fn tail_tol(&self) -> f64 {
        self.tail_tol
    }

    /// `g(lag)`, zero past the horizon.
    pub fn at(&self, lag: usize) -> f64 {
        self.values.get(lag).copied().unwrap_or(0.0)
    }

    /// Instantaneous response `g(0)`.
    pub fn head(&self) -> f64 {
        self.values[0]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            tail_tol: self.tail_tol * factor.abs(),
        }
    }

    /// Well-being after `len` steps of a constant unit dose starting from rest:
    /// the running sums of the kernel.
    pub fn step_response(&self, len: usize) -> Vec<f64> {
        let mut acc = 0.0;
        (0..len)
            .map(|t| {
                acc += self.at(t);
                acc
            })
            .collect()
    }

    /// Sum of the stored kernel values: the steady-state response to a unit
    /// dose held forever.
    pub fn dc_gain(&self) -> f64 {
        self.values.iter().sum()
    }
}

impl DoseResponse for ImpulseResponse {
    fn effect(&self, lag: usize, dose: f64) -> f64 {
        self.at(lag) * dose
    }

    fn memory(&self) -> usize {
        self.horizon()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    NonPositiveHead,
    NeverCrosses,
    PositiveAfterCrossover,
    RateAboveOne,
    EmptyRateInterval,
    MissingSlopeBounds,
    SlopeSign,
    NonzeroAtZeroDose,
}

/// Why a kernel failed certification, and where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub index: usize,
    pub detail: String,
}

impl Violation {
    fn new(kind: ViolationKind, index: usize, detail: impl Into<String>) -> Self {
        Self { kind, index, detail: detail.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (index {})", self.detail, self.index)
    }
}

impl std::error::Error for Violation {}

/// Witness that the kernel is positive strictly before `tau0` and
/// non-positive from `tau0` on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpponentCertificate {
    pub tau0: usize,
}

/// Feasible interval of progression rates for a linearly progressing
/// opponent process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpopCertificate {
    pub tau0: usize,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    /// Indices whose denominator was within [`SIGN_TOL`] of zero and so
    /// imposed no ratio constraint.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<usize>,
}

impl LpopCertificate {
    pub fn contains(&self, alpha: f64) -> bool {
        alpha >= self.alpha_lo - RATE_TOL && alpha <= self.alpha_hi + RATE_TOL
    }
}

pub fn certify_opponent(g: &ImpulseResponse) -> Result<OpponentCertificate, Violation> {
    let v = g.values();
    if v[0] <= SIGN_TOL {
        return Err(Violation::new(
            ViolationKind::NonPositiveHead,
            0,
            format!("g(0) = {} is not positive", v[0]),
        ));
    }
    let tau0 = match v.iter().position(|&x| x <= SIGN_TOL) {
        Some(t) => t,
        None => {
            return Err(Violation::new(
                ViolationKind::NeverCrosses,
                v.len() - 1,
                "no τ₀ found: the kernel never becomes non-positive",
            ))
        }
    };
    if let Some(offset) = v[tau0..].iter().position(|&x| x > SIGN_TOL) {
        let i = tau0 + offset;
        return Err(Violation::new(
            ViolationKind::PositiveAfterCrossover,
            i,
            format!("g({i}) = {} is positive after the crossover at {tau0}", v[i]),
        ));
    }
    Ok(OpponentCertificate { tau0 })
}

/// Certifies the rate condition: `g(t+1) <= a g(t)` on the positive phase
/// (`t < tau0 - 1`) and `|g(t+1)| >= a |g(t)|` on the negative phase
/// (`t >= tau0`). The crossover step `t = tau0 - 1` is unconstrained.
pub fn certify_lpop(g: &ImpulseResponse) -> Result<LpopCertificate, Violation> {
    let OpponentCertificate { tau0 } = certify_opponent(g)?;
    let v = g.values();

    let mut alpha_lo: f64 = 0.0;
    for t in 0..tau0.saturating_sub(1) {
        alpha_lo = alpha_lo.max(v[t + 1] / v[t]);
    }

    let mut alpha_hi = ALPHA_SUP;
    let mut skipped = Vec::new();
    for t in tau0..v.len().saturating_sub(1) {
        if v[t].abs() <= SIGN_TOL {
            skipped.push(t);
            continue;
        }
        alpha_hi = alpha_hi.min(v[t + 1].abs() / v[t].abs());
    }

    rate_interval(tau0, alpha_lo, alpha_hi, skipped)
}

fn rate_interval(
    tau0: usize,
    alpha_lo: f64,
    alpha_hi: f64,
    skipped: Vec<usize>,
) -> Result<LpopCertificate, Violation> {
    if alpha_lo >= 1.0 {
        return Err(Violation::new(
            ViolationKind::RateAboveOne,
            tau0,
            format!("positive phase needs a rate of at least {alpha_lo}, not below one"),
        ));
    }
    if alpha_lo > alpha_hi + RATE_TOL {
        return Err(Violation::new(
            ViolationKind::EmptyRateInterval,
            tau0,
            format!("rate interval [{alpha_lo}, {alpha_hi}] is empty"),
        ));
    }
    Ok(LpopCertificate { tau0, alpha_lo, alpha_hi, skipped })
}

/// The three sufficient conditions on a mode expansion that make the kernel
/// linearly progressing, with the slowest negative decay as a witness rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeConditions {
    pub separated: bool,
    pub positive_mass: bool,
    pub crosses: bool,
    pub slowest_positive: Option<f64>,
    pub fastest_negative: Option<f64>,
}

impl ModeConditions {
    pub fn check(modes: &[Mode], g: &ImpulseResponse) -> Self {
        let slowest_positive = modes
            .iter()
            .filter(|m| m.coefficient >= 0.0)
            .map(|m| m.decay)
            .reduce(f64::max);
        let fastest_negative = modes
            .iter()
            .filter(|m| m.coefficient < 0.0)
            .map(|m| m.decay)
            .reduce(f64::min);
        let separated = match (slowest_positive, fastest_negative) {
            (Some(p), Some(n)) => p <= n,
            _ => true,
        };
        let positive_mass = modes.iter().map(|m| m.coefficient).sum::<f64>() > 0.0;
        let crosses = g.values().iter().any(|&x| x <= SIGN_TOL);
        Self { separated, positive_mass, crosses, slowest_positive, fastest_negative }
    }

    pub fn holds(&self) -> bool {
        self.separated && self.positive_mass && self.crosses
    }

    /// The rate the mode argument certifies, when the conditions hold.
    pub fn witness_rate(&self) -> Option<f64> {
        if self.holds() {
            Some(self.fastest_negative.unwrap_or(0.0))
        } else {
            None
        }
    }
}

/// Block-averages the kernel: `g'(t) = (1/b) * sum_{t'=tb}^{(t+1)b-1} g(t')`.
///
/// A trailing partial block is averaged over the full block length, the
/// missing values being part of the (zero) tail.
pub fn coarsen(g: &ImpulseResponse, block: usize) -> Result<ImpulseResponse> {
    let h = g.horizon();
    if block == 0 || (block >= h && block > 1) {
        return Err(Error::InvalidBlock { block, horizon: h });
    }
    let inv = 1.0 / block as f64;
    let values = g
        .values()
        .chunks(block)
        .map(|chunk| chunk.iter().sum::<f64>() * inv)
        .collect();
    Ok(ImpulseResponse { values, tail_tol: g.tail_tol })
}

pub type ResponseFn = Arc<dyn Fn(usize, f64) -> f64 + Send + Sync>;

/// Nonlinear per-lag response `g(k, u)` with known slope bounds
/// `slope_lo[k] <= d/du g(k, u) <= slope_hi[k]` on `[0, dose_cap]`.
#[derive(Clone)]
pub struct GeneralizedResponse {
    eval: ResponseFn,
    slope_lo: Vec<f64>,
    slope_hi: Vec<f64>,
    dose_cap: f64,
}

impl fmt::Debug for GeneralizedResponse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralizedResponse")
            .field("slope_lo", &self.slope_lo)
            .field("slope_hi", &self.slope_hi)
            .field("dose_cap", &self.dose_cap)
            .finish_non_exhaustive()
    }
}

impl GeneralizedResponse {
    pub fn new<F>(eval: F, slope_lo: Vec<f64>, slope_hi: Vec<f64>, dose_cap: f64) -> Result<Self>
    where
        F: Fn(usize, f64) -> f64 + Send + Sync + 'static,
    {
        if slope_lo.len() != slope_hi.len() {
            return Err(Error::LengthMismatch {
                what: "slope bounds",
                expected: slope_lo.len(),
                found: slope_hi.len(),
            });
        }
        if let Some(k) = (0..slope_lo.len()).find(|&k| slope_lo[k] > slope_hi[k]) {
            return Err(Error::param(
                "slope_lo",
                format!("lower slope bound exceeds upper at lag {k}"),
            ));
        }
        if !(dose_cap.is_finite() && dose_cap > 0.0) {
            return Err(Error::param("dose_cap", format!("{dose_cap} must be positive")));
        }
        Ok(Self { eval: Arc::new(eval), slope_lo, slope_hi, dose_cap })
    }

    /// The linear special case `g(k, u) = g(k) * u`.
    pub fn linear(g: &ImpulseResponse, dose_cap: f64) -> Result<Self> {
        let kernel = g.clone();
        Self::new(
            move |k, u| kernel.at(k) * u,
            g.values().to_vec(),
            g.values().to_vec(),
            dose_cap,
        )
    }

    pub fn eval(&self, lag: usize, dose: f64) -> f64 {
        if lag >= self.slope_lo.len() {
            0.0
        } else {
            (self.eval)(lag, dose)
        }
    }

    pub fn slope_lo(&self) -> &[f64] {
        &self.slope_lo
    }

    pub fn slope_hi(&self) -> &[f64] {
        &self.slope_hi
    }

    pub fn dose_cap(&self) -> f64 {
        self.dose_cap
    }
}

impl DoseResponse for GeneralizedResponse {
    fn effect(&self, lag: usize, dose: f64) -> f64 {
        self.eval(lag, dose)
    }

    fn memory(&self) -> usize {
        self.slope_lo.len()
    }
}

/// Certifies a nonlinear response over `horizon` lags from its slope bounds.
///
/// The sign pattern requires nonnegative slopes before `tau0` and
/// non-positive slopes from `tau0` on (with `g(k, 0) = 0`, this fixes the sign
/// of every value). The rate conditions are the worst case of the exchange
/// argument: `slope_hi[t+1] <= a * slope_lo[t]` on the positive phase and
/// `|slope_hi[t+1]| >= a * |slope_lo[t]|` on the negative phase, which reduce
/// to [`certify_lpop`] when `slope_lo == slope_hi`.
pub fn certify_g_lpop(
    gr: &GeneralizedResponse,
    horizon: usize,
) -> Result<LpopCertificate, Violation> {
    if gr.slope_lo.len() < horizon || horizon == 0 {
        return Err(Violation::new(
            ViolationKind::MissingSlopeBounds,
            gr.slope_lo.len(),
            format!("slope bounds cover {} lags, {horizon} requested", gr.slope_lo.len()),
        ));
    }
    let lo = &gr.slope_lo[..horizon];
    let hi = &gr.slope_hi[..horizon];

    for k in 0..horizon {
        let at_zero = gr.eval(k, 0.0);
        if at_zero.abs() > SIGN_TOL {
            return Err(Violation::new(
                ViolationKind::NonzeroAtZeroDose,
                k,
                format!("g({k}, 0) = {at_zero} is not zero"),
            ));
        }
    }
    if hi[0] <= SIGN_TOL {
        return Err(Violation::new(
            ViolationKind::NonPositiveHead,
            0,
            "the immediate response is not increasing in the dose",
        ));
    }
    let tau0 = match hi.iter().position(|&s| s <= SIGN_TOL) {
        Some(t) => t,
        None => {
            return Err(Violation::new(
                ViolationKind::NeverCrosses,
                horizon - 1,
                "no τ₀ found: upper slope bound never becomes non-positive",
            ))
        }
    };
    if let Some(k) = (0..tau0).find(|&k| lo[k] < -SIGN_TOL) {
        return Err(Violation::new(
            ViolationKind::SlopeSign,
            k,
            format!("lower slope bound {} is negative before τ₀ = {tau0}", lo[k]),
        ));
    }
    if let Some(k) = (tau0..horizon).find(|&k| hi[k] > SIGN_TOL) {
        return Err(Violation::new(
            ViolationKind::PositiveAfterCrossover,
            k,
            format!("upper slope bound {} is positive after τ₀ = {tau0}", hi[k]),
        ));
    }

    let mut alpha_lo: f64 = 0.0;
    for t in 0..tau0.saturating_sub(1) {
        if lo[t] <= SIGN_TOL {
            if hi[t + 1] > SIGN_TOL {
                return Err(Violation::new(
                    ViolationKind::RateAboveOne,
                    t,
                    format!("slope at lag {} is positive while lag {t} may be flat", t + 1),
                ));
            }
            continue;
        }
        alpha_lo = alpha_lo.max(hi[t + 1] / lo[t]);
    }

    let mut alpha_hi = ALPHA_SUP;
    let mut skipped = Vec::new();
    for t in tau0..horizon - 1 {
        if lo[t].abs() <= SIGN_TOL {
            skipped.push(t);
            continue;
        }
        alpha_hi = alpha_hi.min(hi[t + 1].abs() / lo[t].abs());
    }

    rate_interval(tau0, alpha_lo, alpha_hi, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_mode() -> ImpulseResponse {
        ImpulseResponse::from_modes(
            &[Mode::new(1.0, 0.5).unwrap(), Mode::new(-0.5, 0.9).unwrap()],
            DEFAULT_TAIL_TOL,
        )
        .unwrap()
    }

    #[test]
    fn mode_sum_matches_direct_evaluation() {
        let g = two_mode();
        for (t, expected) in [0.5, 0.05, -0.155, -0.2395].into_iter().enumerate() {
            assert_abs_diff_eq!(g.at(t), expected, epsilon = 1e-15);
        }
        assert!(g.values().last().unwrap().abs() <= DEFAULT_TAIL_TOL);
    }

    #[test]
    fn zero_decay_is_a_pure_impulse() {
        let g = ImpulseResponse::from_modes(&[Mode::new(1.0, 0.0).unwrap()], 1e-9).unwrap();
        assert_eq!(g.values(), &[1.0, 0.0]);
        assert_eq!(certify_opponent(&g).unwrap().tau0, 1);
    }

    #[test]
    fn cancelling_coefficients_collapse_to_one_mode() {
        let a = ImpulseResponse::from_modes(
            &[Mode::new(2.0, 0.5).unwrap(), Mode::new(-1.0, 0.5).unwrap()],
            1e-9,
        )
        .unwrap();
        let b = ImpulseResponse::from_modes(&[Mode::new(1.0, 0.5).unwrap()], 1e-9).unwrap();
        for t in 0..b.horizon() {
            assert_abs_diff_eq!(a.at(t), b.at(t), epsilon = 1e-15);
        }
    }

    #[test]
    fn build_errors() {
        assert!(matches!(ImpulseResponse::from_modes(&[], 1e-9), Err(Error::EmptyModes)));
        let slow = [Mode::new(1.0, 0.999).unwrap()];
        match ImpulseResponse::from_modes(&slow, 1e-9) {
            Err(Error::HorizonCap { required, cap, .. }) => {
                assert_eq!(cap, DEFAULT_HORIZON_CAP);
                assert!(required > cap);
            }
            other => panic!("expected horizon cap error, got {other:?}"),
        }
        assert!(Mode::new(1.0, 1.0).is_err());
        assert!(Mode::new(0.0, 0.5).is_err());
        assert!(ImpulseResponse::from_values(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn opponent_tau0() {
        assert_eq!(certify_opponent(&two_mode()).unwrap().tau0, 2);
        let positive = ImpulseResponse::from_modes(&[Mode::new(1.0, 0.5).unwrap()], 1e-9).unwrap();
        let v = certify_opponent(&positive).unwrap_err();
        assert_eq!(v.kind, ViolationKind::NeverCrosses);
        assert_eq!(v.index, positive.horizon() - 1);
    }

    #[test]
    fn zero_before_crossover_is_a_violation() {
        let g = ImpulseResponse::from_values(vec![1.0, 0.0, 0.5, -0.2]).unwrap();
        let v = certify_opponent(&g).unwrap_err();
        assert_eq!(v.kind, ViolationKind::PositiveAfterCrossover);
        assert_eq!(v.index, 2);
    }

    #[test]
    fn lpop_interval_of_two_mode_kernel() {
        let cert = certify_lpop(&two_mode()).unwrap();
        assert_eq!(cert.tau0, 2);
        assert_abs_diff_eq!(cert.alpha_lo, 0.1, epsilon = 1e-15);
        // Mode argument: the slowest negative decay is a feasible rate.
        assert!(cert.contains(0.9));
    }

    #[test]
    fn instantaneous_crossover_is_always_lpop() {
        let g = ImpulseResponse::from_values(vec![2.0, -1.0, -0.5, -0.1]).unwrap();
        let cert = certify_lpop(&g).unwrap();
        assert_eq!(cert.tau0, 1);
        assert_eq!(cert.alpha_lo, 0.0);
    }

    #[test]
    fn lpop_violation_when_positive_phase_decays_slower_than_negative() {
        // A-phase ratio 0.9, B-phase ratio 0.5.
        let g = ImpulseResponse::from_values(vec![1.0, 0.9, -1.0, -0.5, -0.25]).unwrap();
        let v = certify_lpop(&g).unwrap_err();
        assert_eq!(v.kind, ViolationKind::EmptyRateInterval);
    }

    #[test]
    fn coarsen_block_means() {
        let g = ImpulseResponse::from_values(vec![0.5, 0.05, -0.155, -0.2395]).unwrap();
        let c = coarsen(&g, 2).unwrap();
        assert_abs_diff_eq!(c.at(0), 0.275, epsilon = 1e-15);
        assert_abs_diff_eq!(c.at(1), -0.19725, epsilon = 1e-15);
        assert_eq!(c.horizon(), 2);
        assert_eq!(coarsen(&g, 1).unwrap(), g);
        assert!(coarsen(&g, 0).is_err());
        assert!(coarsen(&g, 4).is_err());
    }

    #[test]
    fn coarsened_kernel_crosses_immediately() {
        let g = two_mode();
        let tau0 = certify_lpop(&g).unwrap().tau0;
        let c = coarsen(&g, tau0).unwrap();
        assert_eq!(certify_opponent(&c).unwrap().tau0, 1);
    }

    #[test]
    fn generalized_linear_case_matches_linear_certificate() {
        let g = two_mode();
        let gr = GeneralizedResponse::linear(&g, 10.0).unwrap();
        let a = certify_lpop(&g).unwrap();
        let b = certify_g_lpop(&gr, g.horizon()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generalized_rate_above_one() {
        let lo = vec![0.1, 0.1, -0.3, -0.2];
        let hi = vec![0.3, 0.2, -0.1, -0.1];
        let gr = GeneralizedResponse::new(
            |k, u| [0.2, 0.15, -0.2, -0.15][k] * u,
            lo,
            hi,
            5.0,
        )
        .unwrap();
        let v = certify_g_lpop(&gr, 4).unwrap_err();
        assert_eq!(v.kind, ViolationKind::RateAboveOne);
    }

    #[test]
    fn generalized_flat_negative_phase_leaves_rate_unbounded_above() {
        let gr = GeneralizedResponse::new(
            |k, u| if k < 2 { [1.0, 0.1][k] * u } else { 0.0 },
            vec![1.0, 0.1, 0.0, 0.0],
            vec![1.0, 0.1, 0.0, 0.0],
            5.0,
        )
        .unwrap();
        let cert = certify_g_lpop(&gr, 4).unwrap();
        assert_abs_diff_eq!(cert.alpha_lo, 0.1, epsilon = 1e-15);
        assert_eq!(cert.alpha_hi, ALPHA_SUP);
        assert_eq!(cert.skipped, vec![2]);
    }

    #[test]
    fn generalized_missing_bounds() {
        let gr = GeneralizedResponse::new(|_, u| u, vec![1.0], vec![1.0], 1.0).unwrap();
        let v = certify_g_lpop(&gr, 3).unwrap_err();
        assert_eq!(v.kind, ViolationKind::MissingSlopeBounds);
    }
}
