//! Randomized instance generators and batch runs of the oracle checks.
//!
//! Every instance draws from its own generator seeded by
//! `derive_seed(seed, index, stream)`, so results do not depend on thread
//! count or on how many instances are requested.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    brute_force_min_dose, check_average_bound, check_monotone_taper, check_step_bound, DoseGrid,
    CHECK_TOL,
};
use crate::dynamics::{derive_seed, run_closed_loop, simulate_open_loop, NaturalProgression, Scenario};
use crate::error::{Error, Result};
use crate::models::{
    certify_lpop, certify_opponent, coarsen, GeneralizedResponse, ImpulseResponse, Mode, ModeConditions,
    DEFAULT_TAIL_TOL,
};
use crate::protocols::{
    bisection_iteration_bound, generalized_med_dose, integral_dose, med_dose, ConstraintPath, Gains, TaperPolicy,
};

const STREAM_CONTROLLER: u64 = 1;
const STREAM_TAPER: u64 = 2;
const STREAM_MED: u64 = 3;
const STREAM_BISECTION: u64 = 4;

fn rng_for(seed: u64, index: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index, stream))
}

/// Two or three modes satisfying the separation, positive-mass and crossing
/// conditions: every positive decay below every negative one, and the
/// coefficients summing to a positive value.
pub fn random_lpop_modes<R: Rng + ?Sized>(rng: &mut R) -> Vec<Mode> {
    let lam_pos = rng.random_range(0.0..0.8);
    let lam_neg = rng.random_range((lam_pos + 0.02)..0.97);
    let c_pos = rng.random_range(0.3..2.0);
    let c_neg = -c_pos * rng.random_range(0.05..0.95);
    let mut modes = vec![
        Mode { coefficient: c_pos, decay: lam_pos },
        Mode { coefficient: c_neg, decay: lam_neg },
    ];
    if rng.random_bool(0.5) {
        let total: f64 = c_pos + c_neg;
        if rng.random_bool(0.5) {
            let lam = rng.random_range(0.0..=lam_pos);
            modes.push(Mode { coefficient: rng.random_range(0.05..1.0), decay: lam });
        } else {
            let lam = rng.random_range(lam_pos.max(0.01)..0.97).max(lam_pos + 0.01);
            modes.push(Mode { coefficient: -total * rng.random_range(0.05..0.9), decay: lam });
        }
    }
    modes
}

/// A certified LPOP kernel built from [`random_lpop_modes`]. Mode sets whose
/// truncated kernel never crosses zero are redrawn.
pub fn random_lpop_kernel<R: Rng + ?Sized>(rng: &mut R) -> Result<(Vec<Mode>, ImpulseResponse)> {
    loop {
        let modes = random_lpop_modes(rng);
        let g = ImpulseResponse::from_modes(&modes, DEFAULT_TAIL_TOL)?;
        if !ModeConditions::check(&modes, &g).crosses {
            continue;
        }
        certify_lpop(&g).map_err(|v| Error::InvalidKernel(v.to_string()))?;
        return Ok((modes, g));
    }
}

/// A natural progression mixing noise, sustained downward drifts, sudden
/// drops and recoveries.
pub fn adversarial_progression<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut y = rng.random_range(-1.0..1.0);
    let mut out = Vec::with_capacity(len);
    let mut drift = 0.0;
    let mut remaining = 0usize;
    for _ in 0..len {
        out.push(y);
        if remaining == 0 {
            drift = match rng.random_range(0..4) {
                0 => rng.random_range(-0.3..-0.05),
                1 => rng.random_range(0.0..0.1),
                _ => 0.0,
            };
            remaining = rng.random_range(1..20);
        }
        remaining -= 1;
        y += drift + rng.random_range(-0.3..0.3);
        if rng.random_bool(0.03) {
            y -= rng.random_range(0.5..3.0);
        }
        if rng.random_bool(0.02) {
            y += rng.random_range(0.5..2.0);
        }
    }
    out
}

/// Gains `a/g0` and `b/g0` with `a` in `(0.1, 1]` and `b` in `[1, 3]`.
pub fn random_bracketing_gains<R: Rng + ?Sized>(rng: &mut R, g0: f64) -> Gains {
    let a = rng.random_range(0.1..=1.0);
    let b = rng.random_range(1.0..=3.0);
    Gains { k_plus: a / g0, k_minus: b / g0 }
}

/// One controller run that failed a check, with enough to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    pub index: u64,
    pub check: String,
    pub step: usize,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSuiteReport {
    pub runs: usize,
    pub steps: usize,
    /// Runs violating the prefix-average bound without the final-dose term.
    pub stated_average_failures: usize,
    /// Runs violating the prefix-average bound with the final-dose term.
    pub corrected_average_failures: usize,
    pub step_failures: usize,
    pub min_stated_average_margin: f64,
    pub min_corrected_average_margin: f64,
    pub min_step_margin: f64,
    pub failures: Vec<FailureCase>,
}

impl ControllerSuiteReport {
    pub fn passed(&self) -> bool {
        self.stated_average_failures == 0
            && self.corrected_average_failures == 0
            && self.step_failures == 0
    }
}

struct ControllerOutcome {
    steps: usize,
    margins: [f64; 3],
    failures: Vec<FailureCase>,
}

const CHECK_NAMES: [&str; 3] = ["average_stated", "average_with_final_dose", "step"];

/// Which parts of the controller setting `controller_suite_with` randomizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerSuiteOptions {
    /// Draw the padding from `[-0.5, 0.5)`; otherwise it is zero.
    pub padding: bool,
    /// Let a quarter of the runs follow a drifting constraint schedule;
    /// otherwise every threshold is constant.
    pub schedules: bool,
}

impl Default for ControllerSuiteOptions {
    fn default() -> Self {
        Self { padding: true, schedules: true }
    }
}

impl ControllerSuiteOptions {
    /// Constant threshold and zero padding.
    pub const PLAIN: Self = Self { padding: false, schedules: false };
}

fn controller_run(seed: u64, index: u64, opts: ControllerSuiteOptions) -> Result<ControllerOutcome> {
    let mut rng = rng_for(seed, index, STREAM_CONTROLLER);
    let (_, g) = random_lpop_kernel(&mut rng)?;
    let taper = rng.random_range(20..=120);
    let warmup_steps = if rng.random_bool(0.5) { rng.random_range(1..=20) } else { 0 };
    let warmup_dose = rng.random_range(0.0..2.0);
    let nat = adversarial_progression(&mut rng, warmup_steps + taper + 1);
    let base = rng.random_range(-2.0..1.0);
    let constraint = if rng.random_bool(0.25) {
        let mut level = base;
        let schedule = (0..=taper)
            .map(|_| {
                level += rng.random_range(-0.1..0.1);
                level
            })
            .collect();
        if opts.schedules { ConstraintPath::Schedule(schedule) } else { ConstraintPath::Constant(base) }
    } else {
        ConstraintPath::Constant(base)
    };
    let gains = random_bracketing_gains(&mut rng, g.head());
    let delta = rng.random_range(-0.5..0.5);
    let delta = if opts.padding { delta } else { 0.0 };
    let u_init = rng.random_bool(0.5).then(|| rng.random_range(0.0..2.0));

    let scenario = Scenario::new(g.clone(), constraint, taper)
        .with_nat(NaturalProgression::CustomSequence { values: nat })
        .with_warmup(warmup_dose, warmup_steps);
    let policy = TaperPolicy::Integral {
        k_plus: gains.k_plus,
        k_minus: gains.k_minus,
        delta,
        u_init,
        dose_cap: None,
    };
    let trace = run_closed_loop(&scenario, &policy)?;
    let frame = trace.taper_frame(&g)?;
    let avg = check_average_bound(&frame, delta, gains, g.head());
    let step = check_step_bound(&frame, &g, delta);

    let checks = [&avg.stated, &avg.with_final_dose, &step];
    let failures = checks
        .iter()
        .zip(CHECK_NAMES)
        .filter_map(|(c, name)| {
            c.first_violation.map(|step| FailureCase {
                index,
                check: name.to_string(),
                step,
                margin: c.min_margin,
            })
        })
        .collect();
    Ok(ControllerOutcome {
        steps: frame.horizon(),
        margins: checks.map(|c| c.min_margin),
        failures,
    })
}

/// Integral-controller runs on random LPOP kernels, adversarial
/// progressions and bracketing gains, each checked against the prefix-average
/// bound and the per-step bound.
pub fn controller_suite(runs: usize, seed: u64) -> Result<ControllerSuiteReport> {
    controller_suite_with(runs, seed, ControllerSuiteOptions::default())
}

/// [`controller_suite`] with some randomization switched off. Every run
/// consumes the same random draws either way.
pub fn controller_suite_with(runs: usize, seed: u64, opts: ControllerSuiteOptions) -> Result<ControllerSuiteReport> {
    let outcomes: Vec<ControllerOutcome> = (0..runs as u64)
        .into_par_iter()
        .map(|i| controller_run(seed, i, opts))
        .collect::<Result<_>>()?;
    let mut report = ControllerSuiteReport {
        runs,
        steps: 0,
        stated_average_failures: 0,
        corrected_average_failures: 0,
        step_failures: 0,
        min_stated_average_margin: f64::INFINITY,
        min_corrected_average_margin: f64::INFINITY,
        min_step_margin: f64::INFINITY,
        failures: Vec::new(),
    };
    for o in outcomes {
        report.steps += o.steps;
        report.min_stated_average_margin = report.min_stated_average_margin.min(o.margins[0]);
        report.min_corrected_average_margin = report.min_corrected_average_margin.min(o.margins[1]);
        report.min_step_margin = report.min_step_margin.min(o.margins[2]);
        for f in o.failures {
            match f.check.as_str() {
                "average_stated" => report.stated_average_failures += 1,
                "average_with_final_dose" => report.corrected_average_failures += 1,
                _ => report.step_failures += 1,
            }
            report.failures.push(f);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaperSuiteReport {
    pub systems: usize,
    pub precondition_failures: usize,
    pub conclusion_failures: usize,
    /// Runs whose zero-dose deadline fell inside the horizon.
    pub deadline_in_horizon: usize,
    pub failing_indices: Vec<u64>,
}

impl TaperSuiteReport {
    pub fn passed(&self) -> bool {
        self.precondition_failures == 0 && self.conclusion_failures == 0
    }
}

const TAPER_HORIZON: usize = 150;

fn monotone_taper_run(seed: u64, index: u64) -> Result<(bool, bool, bool)> {
    let mut rng = rng_for(seed, index, STREAM_TAPER);
    let (_, g) = random_lpop_kernel(&mut rng)?;
    let tau0 = certify_opponent(&g).map_err(|v| Error::InvalidKernel(v.to_string()))?.tau0;
    let g = if tau0 == 1 { g } else { coarsen(&g, tau0)? };

    let a = rng.random_range(0.5..=1.0);
    let b = rng.random_range(1.0..=3.0);
    let gains = Gains::new(a / g.head(), b / g.head())?;
    let margin = rng.random_range(0.1..1.0);
    let y_min = -rng.random_range(0.0..1.0);
    let u_init = rng.random_range(0.2..2.0);
    let u0 = integral_dose(u_init, 0.0, y_min, gains.k_plus, gains.k_minus, 0.0);

    let mut nat = vec![0.0, 0.0];
    for t in 1..TAPER_HORIZON {
        let next = nat[t] - g.at(t) * u0 + margin / t as f64 + rng.random_range(0.0..0.05);
        nat.push(next);
    }
    let scenario = Scenario::new(g.clone(), ConstraintPath::Constant(y_min), TAPER_HORIZON)
        .with_nat(NaturalProgression::CustomSequence { values: nat });
    let policy = TaperPolicy::Integral {
        k_plus: gains.k_plus,
        k_minus: gains.k_minus,
        delta: 0.0,
        u_init: Some(u_init),
        dose_cap: None,
    };
    let trace = run_closed_loop(&scenario, &policy)?;
    let frame = trace.taper_frame(&g)?;
    let report = check_monotone_taper(&frame, &g, gains.k_plus, margin);
    Ok((report.preconditions.hold(), report.passed, report.zero_by <= TAPER_HORIZON))
}

/// Integral-controller runs on coarsened (`tau0 = 1`) kernels with
/// progressions that satisfy the drift condition.
pub fn monotone_taper_suite(systems: usize, seed: u64) -> Result<TaperSuiteReport> {
    let outcomes: Vec<_> = (0..systems as u64)
        .into_par_iter()
        .map(|i| monotone_taper_run(seed, i).map(|o| (i, o)))
        .collect::<Result<_>>()?;
    let mut report = TaperSuiteReport {
        systems,
        precondition_failures: 0,
        conclusion_failures: 0,
        deadline_in_horizon: 0,
        failing_indices: Vec::new(),
    };
    for (i, (pre, post, in_horizon)) in outcomes {
        if !pre {
            report.precondition_failures += 1;
        }
        if !post {
            report.conclusion_failures += 1;
        }
        if !(pre && post) {
            report.failing_indices.push(i);
        }
        if in_horizon {
            report.deadline_in_horizon += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedOracleReport {
    pub instances: usize,
    /// Draws discarded because no grid schedule was feasible.
    pub resampled: usize,
    pub optimality_failures: usize,
    pub safety_failures: usize,
    /// Largest `med - (oracle + slack)`; negative when every instance passed.
    pub max_excess: f64,
    /// Largest `oracle - med`, the grid's price over the continuum.
    pub max_grid_gap: f64,
    pub failing_indices: Vec<u64>,
}

impl MedOracleReport {
    pub fn passed(&self) -> bool {
        self.optimality_failures == 0 && self.safety_failures == 0
    }
}

struct MedOutcome {
    resampled: usize,
    excess: f64,
    gap: f64,
    safe: bool,
}

const MAX_RESAMPLES: usize = 1000;

fn med_instance(seed: u64, index: u64, grid: DoseGrid, max_horizon: usize) -> Result<MedOutcome> {
    let mut rng = rng_for(seed, index, STREAM_MED);
    for resampled in 0..MAX_RESAMPLES {
        let (_, g) = random_lpop_kernel(&mut rng)?;
        let horizon = rng.random_range(1..=max_horizon);
        let mut y = rng.random_range(-0.5..0.5);
        let nat: Vec<f64> = (0..=horizon)
            .map(|_| {
                let v = y;
                y += rng.random_range(-0.5..0.3);
                v
            })
            .collect();
        let base = rng.random_range(-0.5..0.8);
        let y_min: Vec<f64> = if rng.random_bool(0.3) {
            (0..=horizon).map(|_| base + rng.random_range(-0.3..0.3)).collect()
        } else {
            vec![base; horizon + 1]
        };

        let mut doses = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let u = med_dose(&g, &doses, y_min[t + 1], nat[t + 1])?;
            doses.push(u);
        }
        let oracle = match brute_force_min_dose(&g, &nat, &y_min, horizon, grid) {
            Ok(sol) => sol,
            Err(Error::NoFeasibleSchedule) => continue,
            Err(e) => return Err(e),
        };
        let y = simulate_open_loop(&g, &doses, &nat)?;
        let safe = (1..=horizon).all(|t| y[t] >= y_min[t] - CHECK_TOL);
        let med_cum: f64 = doses.iter().sum();
        let slack = horizon as f64 * grid.resolution * (1.0f64).max(1.0 / g.head());
        return Ok(MedOutcome {
            resampled,
            excess: med_cum - (oracle.cum_dose + slack),
            gap: oracle.cum_dose - med_cum,
            safe,
        });
    }
    Err(Error::NoFeasibleSchedule)
}

/// Compares the MED schedule with the exhaustive grid optimum on small random
/// instances with a known natural progression.
pub fn med_oracle_suite(
    instances: usize,
    seed: u64,
    grid: DoseGrid,
    max_horizon: usize,
) -> Result<MedOracleReport> {
    let outcomes: Vec<_> = (0..instances as u64)
        .into_par_iter()
        .map(|i| med_instance(seed, i, grid, max_horizon).map(|o| (i, o)))
        .collect::<Result<_>>()?;
    let mut report = MedOracleReport {
        instances,
        resampled: 0,
        optimality_failures: 0,
        safety_failures: 0,
        max_excess: f64::NEG_INFINITY,
        max_grid_gap: f64::NEG_INFINITY,
        failing_indices: Vec::new(),
    };
    for (i, o) in outcomes {
        report.resampled += o.resampled;
        report.max_excess = report.max_excess.max(o.excess);
        report.max_grid_gap = report.max_grid_gap.max(o.gap);
        let optimal = o.excess <= 0.0;
        if !optimal {
            report.optimality_failures += 1;
        }
        if !o.safe {
            report.safety_failures += 1;
        }
        if !(optimal && o.safe) {
            report.failing_indices.push(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_kernels_certify() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            random_lpop_kernel(&mut rng).unwrap();
        }
    }

    #[test]
    fn small_suites_pass() {
        let report = controller_suite(20, 3).unwrap();
        assert_eq!(report.corrected_average_failures, 0, "{report:?}");
        assert_eq!(report.step_failures, 0, "{report:?}");
        assert!(monotone_taper_suite(10, 3).unwrap().passed());
        assert!(med_oracle_suite(10, 3, DoseGrid::default(), 3).unwrap().passed());
    }

    #[test]
    fn suites_are_deterministic() {
        assert_eq!(controller_suite(8, 9).unwrap(), controller_suite(8, 9).unwrap());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisectionSuiteReport {
    pub linear_instances: usize,
    /// Largest `|bisection - closed form|` over the linear instances.
    pub linear_max_error: f64,
    pub linear_failures: usize,
    pub nonlinear_instances: usize,
    /// Nonlinear runs whose immediate response missed the target by more
    /// than `eps`.
    pub tolerance_failures: usize,
    /// Nonlinear runs that needed more iterations than the bound allows.
    pub iteration_failures: usize,
    pub max_iterations: u32,
    pub failing_indices: Vec<u64>,
}

impl BisectionSuiteReport {
    pub fn passed(&self) -> bool {
        self.linear_failures == 0 && self.tolerance_failures == 0 && self.iteration_failures == 0
    }
}

/// Agreement with the closed-form dose required on linear instances.
pub const LINEAR_MATCH_TOL: f64 = 1e-6;

/// A monotone nonlinear response with exact slope bounds on `[0, cap]`.
///
/// The immediate effect is one of a saturating exponential, a cubic or a
/// hyperbolic tangent; later lags scale a shared shape by a geometric
/// opponent-process profile.
pub fn random_nonlinear_response<R: Rng + ?Sized>(rng: &mut R) -> Result<GeneralizedResponse> {
    let cap: f64 = rng.random_range(0.5..4.0);
    let a: f64 = rng.random_range(0.2..2.0);
    let b: f64 = rng.random_range(0.2..2.0);
    let lags = rng.random_range(2..8);
    let profile: Vec<f64> = (0..lags)
        .map(|k| if k == 0 { 1.0 } else { -0.3 * 0.8f64.powi(k - 1) })
        .collect();
    let shape = rng.random_range(0..3);
    // phi(u) and the range of phi'(u) over [0, cap]
    let (phi, d_lo, d_hi): (fn(f64, f64, f64) -> f64, f64, f64) = match shape {
        0 => (|u, a, b| a * (1.0 - (-b * u).exp()), a * b * (-b * cap).exp(), a * b),
        1 => (|u, a, b| a * u + b * u * u * u, a, a + 3.0 * b * cap * cap),
        _ => (|u, a, b| a * (b * u).tanh(), a * b / (b * cap).cosh().powi(2), a * b),
    };
    let lo: Vec<f64> = profile.iter().map(|&h| if h >= 0.0 { h * d_lo } else { h * d_hi }).collect();
    let hi: Vec<f64> = profile.iter().map(|&h| if h >= 0.0 { h * d_hi } else { h * d_lo }).collect();
    GeneralizedResponse::new(move |k, u| profile[k] * phi(u, a, b), lo, hi, cap)
}

/// Generalized MED by bisection: agreement with the closed form on linear
/// responses, and the tolerance and iteration bound on nonlinear ones.
pub fn bisection_suite(instances: usize, seed: u64, eps: f64) -> Result<BisectionSuiteReport> {
    let outcomes: Vec<_> = (0..instances as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i, STREAM_BISECTION);

            let (_, g) = random_lpop_kernel(&mut rng)?;
            let history: Vec<f64> = (0..rng.random_range(0..6)).map(|_| rng.random_range(0.0..1.0)).collect();
            let nat = rng.random_range(-1.0..1.0);
            let y_min = rng.random_range(-1.0..2.0);
            let exact = med_dose(&g, &history, y_min, nat)?;
            let cap = 2.0 * exact.max(1.0);
            let linear = generalized_med_dose(&GeneralizedResponse::linear(&g, cap)?, &history, y_min, nat, eps)?;
            let linear_error = (linear.dose - exact).abs();

            let gr = random_nonlinear_response(&mut rng)?;
            let history: Vec<f64> =
                (0..rng.random_range(0..6)).map(|_| rng.random_range(0.0..gr.dose_cap())).collect();
            let t = history.len();
            let carry: f64 = (1..=t.min(gr.slope_lo().len() - 1)).map(|k| gr.eval(k, history[t - k])).sum();
            // a target strictly inside the reachable range
            let target = rng.random_range(0.05..0.95) * gr.eval(0, gr.dose_cap());
            let nat = rng.random_range(-1.0..1.0);
            let y_min = target + nat + carry;
            let out = generalized_med_dose(&gr, &history, y_min, nat, eps)?;
            let within = (gr.eval(0, out.dose) - out.target).abs() <= eps;
            let bound = bisection_iteration_bound(gr.dose_cap(), eps, gr.slope_hi()[0]);
            Ok((i, linear_error, within, out.iterations, out.iterations <= bound))
        })
        .collect::<Result<_>>()?;
    let mut report = BisectionSuiteReport {
        linear_instances: instances,
        linear_max_error: 0.0,
        linear_failures: 0,
        nonlinear_instances: instances,
        tolerance_failures: 0,
        iteration_failures: 0,
        max_iterations: 0,
        failing_indices: Vec::new(),
    };
    for (i, err, within, iterations, in_bound) in outcomes {
        report.linear_max_error = report.linear_max_error.max(err);
        report.max_iterations = report.max_iterations.max(iterations);
        let linear_ok = err <= LINEAR_MATCH_TOL;
        report.linear_failures += usize::from(!linear_ok);
        report.tolerance_failures += usize::from(!within);
        report.iteration_failures += usize::from(!in_bound);
        if !(linear_ok && within && in_bound) {
            report.failing_indices.push(i);
        }
    }
    Ok(report)
}
