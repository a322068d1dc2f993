//! Population experiments on the canonical systems.
//!
//! Each unit of a population gets its own constraint and noise stream, both
//! derived from `(seed, unit)`, and is warmed up at a fixed dose before the
//! taper window. A sweep runs one protocol family over a list of parameter
//! values and reports the population means as a trade-off curve.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{derive_seed, run_closed_loop, NoiseSpec, Scenario, TraceMetrics, Warmup};
use crate::error::{Error, Result};
use crate::models::{certify_lpop, ImpulseResponse, Mode, DEFAULT_TAIL_TOL};
use crate::protocols::{ConstraintPath, Gains, NatBound, TaperPolicy};

/// Constants of the four reference systems, versioned with the crate.
pub const CANONICAL_SYSTEMS_JSON: &str = include_str!("../data/canonical_systems.json");

const STREAM_Y_MIN: u64 = 0x59;
const STREAM_NOISE: u64 = 0x4E;

/// Fraction of the starting dose the exponential baseline has left at its
/// nominal taper time.
pub const EXPONENTIAL_RESIDUAL: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformRange {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalSystem {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub modes: Vec<Mode>,
    pub y_min: UniformRange,
    pub taper_steps: usize,
}

impl CanonicalSystem {
    pub fn kernel(&self) -> Result<ImpulseResponse> {
        ImpulseResponse::from_modes(&self.modes, DEFAULT_TAIL_TOL)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CanonicalSet {
    version: u32,
    systems: Vec<CanonicalSystem>,
}

pub fn canonical_systems() -> Result<Vec<CanonicalSystem>> {
    let set: CanonicalSet = serde_json::from_str(CANONICAL_SYSTEMS_JSON)?;
    Ok(set.systems)
}

pub fn canonical_system(id: &str) -> Result<CanonicalSystem> {
    canonical_systems()?
        .into_iter()
        .find(|s| s.id.eq_ignore_ascii_case(id))
        .ok_or_else(|| Error::param("system", format!("unknown canonical system `{id}`")))
}

pub fn canonical_constants_version() -> Result<u32> {
    let set: CanonicalSet = serde_json::from_str(CANONICAL_SYSTEMS_JSON)?;
    Ok(set.version)
}

/// Hex SHA-256 of the canonical constants file.
pub fn canonical_constants_hash() -> String {
    hex(&Sha256::digest(CANONICAL_SYSTEMS_JSON.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Population-level settings shared by every protocol in an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub population: usize,
    pub warmup: Warmup,
    pub noise_half_width: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { population: 100, warmup: Warmup::default(), noise_half_width: 0.25, seed: 0 }
    }
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::param("population", "must be at least 1"));
        }
        if !(self.noise_half_width.is_finite() && self.noise_half_width >= 0.0) {
            return Err(Error::param("noise_half_width", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// One member of a population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: u64,
    pub y_min: f64,
    pub noise_seed: u64,
}

pub fn sample_population(system: &CanonicalSystem, cfg: &ExperimentConfig) -> Vec<Unit> {
    (0..cfg.population as u64)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, id, STREAM_Y_MIN));
            let y_min = rng.random_range(system.y_min.lo..system.y_min.hi);
            Unit { id, y_min, noise_seed: derive_seed(cfg.seed, id, STREAM_NOISE) }
        })
        .collect()
}

pub fn unit_scenario(
    kernel: &ImpulseResponse,
    system: &CanonicalSystem,
    unit: &Unit,
    cfg: &ExperimentConfig,
) -> Scenario {
    Scenario::new(kernel.clone(), ConstraintPath::Constant(unit.y_min), system.taper_steps)
        .with_noise(NoiseSpec::Uniform { half_width: cfg.noise_half_width, seed: unit.noise_seed })
        .with_warmup(cfg.warmup.dose, cfg.warmup.steps)
}

/// A protocol family with one swept parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ProtocolFamily {
    /// Swept value is the per-step decrement.
    Linear,
    /// Swept value is the per-step decay factor.
    Exponential,
    /// Swept value is the padding; gains come from `g(0)` bounds at fractions
    /// `lo` and `hi` of the true value.
    Integral { lo: f64, hi: f64 },
    /// Clairvoyant minimum effective dose; the swept value is ignored.
    Med,
}

impl ProtocolFamily {
    pub const DEFAULT_INTEGRAL: Self = Self::Integral { lo: 0.5, hi: 1.5 };

    pub fn label(&self) -> String {
        match self {
            Self::Linear => "linear".into(),
            Self::Exponential => "exponential".into(),
            Self::Integral { lo, hi } if (*lo, *hi) == (0.5, 1.5) => "integral".into(),
            Self::Integral { lo, hi } => format!("integral({lo},{hi})"),
            Self::Med => "med".into(),
        }
    }

    pub fn policy(&self, g0: f64, u0: f64, value: f64) -> Result<TaperPolicy> {
        let policy = match *self {
            Self::Linear => TaperPolicy::Linear { u0, rate: value },
            Self::Exponential => TaperPolicy::Exponential { u0, rate: value },
            Self::Integral { lo, hi } => TaperPolicy::integral(Gains::from_g0_fractions(g0, lo, hi)?, value),
            Self::Med => TaperPolicy::Med { nat_bound: NatBound::Clairvoyant },
        };
        policy.validate()?;
        Ok(policy)
    }

    /// Whether the gains bracket `1/g(0)`.
    pub fn gains_compliant(&self) -> bool {
        match *self {
            Self::Integral { lo, hi } => lo <= 1.0 && 1.0 <= hi,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub family: ProtocolFamily,
    pub values: Vec<f64>,
}

/// Per-unit outcome of one protocol setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitOutcome {
    pub unit: u64,
    pub y_min: f64,
    pub avg_cum_dose: f64,
    pub avg_cum_violation: f64,
    pub fully_tapered: bool,
    pub taper_time: Option<usize>,
}

impl UnitOutcome {
    fn new(unit: &Unit, m: &TraceMetrics) -> Self {
        Self {
            unit: unit.id,
            y_min: unit.y_min,
            avg_cum_dose: m.avg_cum_dose,
            avg_cum_violation: m.avg_cum_violation,
            fully_tapered: m.fully_tapered,
            taper_time: m.taper_time,
        }
    }
}

/// Population means of one protocol setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub param: f64,
    pub n: usize,
    pub mean_violation: f64,
    pub se_violation: f64,
    pub mean_dose: f64,
    pub se_dose: f64,
    pub fraction_fully_tapered: f64,
}

fn mean_and_se(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    let mean = xs.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

impl CurvePoint {
    pub fn from_outcomes(param: f64, outcomes: &[UnitOutcome]) -> Self {
        let (mean_violation, se_violation) = mean_and_se(outcomes.iter().map(|o| o.avg_cum_violation));
        let (mean_dose, se_dose) = mean_and_se(outcomes.iter().map(|o| o.avg_cum_dose));
        let tapered = outcomes.iter().filter(|o| o.fully_tapered).count();
        Self {
            param,
            n: outcomes.len(),
            mean_violation,
            se_violation,
            mean_dose,
            se_dose,
            fraction_fully_tapered: tapered as f64 / outcomes.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub system: String,
    pub protocol: String,
    pub family: ProtocolFamily,
    pub points: Vec<CurvePoint>,
    /// Per-unit outcomes, aligned with `points`.
    #[serde(skip)]
    pub units: Vec<Vec<UnitOutcome>>,
}

/// Runs `policy` on every unit of the population, in parallel, returning the
/// outcomes in unit order.
pub fn run_population(
    system: &CanonicalSystem,
    cfg: &ExperimentConfig,
    policy: &TaperPolicy,
) -> Result<Vec<UnitOutcome>> {
    cfg.validate()?;
    let kernel = system.kernel()?;
    sample_population(system, cfg)
        .par_iter()
        .map(|unit| {
            let trace = run_closed_loop(&unit_scenario(&kernel, system, unit, cfg), policy)?;
            Ok(UnitOutcome::new(unit, &trace.metrics()?))
        })
        .collect()
}

pub fn run_sweep(system: &CanonicalSystem, spec: &SweepSpec, cfg: &ExperimentConfig) -> Result<Curve> {
    if spec.values.is_empty() {
        return Err(Error::param("values", "sweep needs at least one value"));
    }
    let g0 = system.kernel()?.head();
    let mut points = Vec::with_capacity(spec.values.len());
    let mut units = Vec::with_capacity(spec.values.len());
    for &value in &spec.values {
        let policy = spec.family.policy(g0, cfg.warmup.dose, value)?;
        let outcomes = run_population(system, cfg, &policy)?;
        points.push(CurvePoint::from_outcomes(value, &outcomes));
        units.push(outcomes);
    }
    Ok(Curve {
        system: system.id.clone(),
        protocol: spec.family.label(),
        family: spec.family,
        points,
        units,
    })
}

/// The clairvoyant MED reference as a single-point curve.
pub fn run_med(system: &CanonicalSystem, cfg: &ExperimentConfig) -> Result<Curve> {
    run_sweep(system, &SweepSpec { family: ProtocolFamily::Med, values: vec![0.0] }, cfg)
}

/// Log-spaced values between `lo` and `hi`, both included.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

pub fn lin_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Baseline rates whose nominal taper time runs from `4 T` down to `T / 4`.
///
/// The linear baseline reaches zero at `u0 / rate`; the exponential one is
/// considered tapered once it falls to [`EXPONENTIAL_RESIDUAL`] of `u0`.
pub fn default_baseline_rates(family: ProtocolFamily, taper_steps: usize, u0: f64, n: usize) -> Vec<f64> {
    let t = taper_steps as f64;
    let times = log_space(4.0 * t, 0.25 * t, n);
    match family {
        ProtocolFamily::Linear => times.iter().map(|tau| u0 / tau).collect(),
        ProtocolFamily::Exponential => times.iter().map(|tau| EXPONENTIAL_RESIDUAL.powf(1.0 / tau)).collect(),
        _ => Vec::new(),
    }
}

/// Padding grid for the tapered-fraction analysis.
pub fn default_deltas() -> Vec<f64> {
    lin_space(-1.0, 1.0, 9)
}

/// Padding grid for the dose/violation trade-off, nonnegative padding only.
pub fn default_tradeoff_deltas() -> Vec<f64> {
    lin_space(0.0, 1.0, 9)
}

/// A curve point that fails a dominance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceException {
    pub protocol: String,
    pub param: f64,
    pub mean_violation: f64,
    pub mean_dose: f64,
    /// How far the check is from passing, in combined standard errors.
    pub margin_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub checked: usize,
    pub exceptions: Vec<DominanceException>,
}

impl DominanceReport {
    pub fn holds(&self) -> bool {
        self.exceptions.is_empty()
    }

    fn merge(reports: impl IntoIterator<Item = DominanceReport>) -> Self {
        reports.into_iter().fold(Self { checked: 0, exceptions: Vec::new() }, |mut acc, r| {
            acc.checked += r.checked;
            acc.exceptions.extend(r.exceptions);
            acc
        })
    }
}

/// Differences below this are treated as ties, so exact zeros on both sides
/// compare equal despite rounding.
pub const DOMINANCE_ABS_TOL: f64 = 1e-9;

/// `(a - b)` in units of the combined standard error.
fn z_score(a: f64, sa: f64, b: f64, sb: f64) -> f64 {
    let d = a - b;
    if d.abs() <= DOMINANCE_ABS_TOL {
        return 0.0;
    }
    let se = (sa * sa + sb * sb).sqrt();
    if se > 0.0 {
        d / se
    } else {
        d.signum() * f64::INFINITY
    }
}

/// Larger of the violation and dose excess of `a` over `b`.
fn excess_se(a: &CurvePoint, b: &CurvePoint) -> f64 {
    z_score(a.mean_violation, a.se_violation, b.mean_violation, b.se_violation)
        .max(z_score(a.mean_dose, a.se_dose, b.mean_dose, b.se_dose))
}

fn exception(curve: &Curve, p: &CurvePoint, margin_se: f64) -> DominanceException {
    DominanceException {
        protocol: curve.protocol.clone(),
        param: p.param,
        mean_violation: p.mean_violation,
        mean_dose: p.mean_dose,
        margin_se,
    }
}

/// Every `challenger` point must be matched by some `reference` point with no
/// more violation and no more dose, up to `k_se` combined standard errors.
pub fn check_dominance(reference: &[CurvePoint], challenger: &Curve, k_se: f64) -> DominanceReport {
    let exceptions = challenger
        .points
        .iter()
        .filter_map(|b| {
            let best = reference.iter().map(|i| excess_se(i, b)).fold(f64::INFINITY, f64::min);
            (best > k_se).then(|| exception(challenger, b, best - k_se))
        })
        .collect();
    DominanceReport { checked: challenger.points.len(), exceptions }
}

const SEGMENT_SAMPLES: usize = 256;

/// Flags `challenger` points lying strictly below-left of the `reference`
/// curve by more than `k_se` combined standard errors in both metrics.
///
/// The reference curve is the polyline through its points in order; means
/// and standard errors are interpolated linearly along each segment.
pub fn check_not_below_left(reference: &[CurvePoint], challenger: &Curve, k_se: f64) -> DominanceReport {
    let lerp = |a: f64, b: f64, s: f64| a + (b - a) * s;
    let along = |p: &CurvePoint, q: &CurvePoint, s: f64| CurvePoint {
        param: lerp(p.param, q.param, s),
        n: p.n,
        mean_violation: lerp(p.mean_violation, q.mean_violation, s),
        se_violation: lerp(p.se_violation, q.se_violation, s),
        mean_dose: lerp(p.mean_dose, q.mean_dose, s),
        se_dose: lerp(p.se_dose, q.se_dose, s),
        fraction_fully_tapered: lerp(p.fraction_fully_tapered, q.fraction_fully_tapered, s),
    };
    let curve: Vec<CurvePoint> = match reference {
        [] => Vec::new(),
        [only] => vec![only.clone()],
        _ => reference
            .windows(2)
            .flat_map(|w| (0..=SEGMENT_SAMPLES).map(move |i| (w, i as f64 / SEGMENT_SAMPLES as f64)))
            .map(|(w, s)| along(&w[0], &w[1], s))
            .collect(),
    };
    let exceptions = challenger
        .points
        .iter()
        .filter_map(|b| {
            // how far `b` sits below-left of the curve: the smaller of its two
            // advantages, at the best curve position
            let depth = curve
                .iter()
                .map(|c| {
                    z_score(c.mean_violation, c.se_violation, b.mean_violation, b.se_violation)
                        .min(z_score(c.mean_dose, c.se_dose, b.mean_dose, b.se_dose))
                })
                .fold(f64::NEG_INFINITY, f64::max);
            (depth > k_se).then(|| exception(challenger, b, depth - k_se))
        })
        .collect();
    DominanceReport { checked: challenger.points.len(), exceptions }
}

/// Trade-off reproduction for one system: both baselines, the integral
/// controller and the clairvoyant MED.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: String,
    pub curves: Vec<Curve>,
    pub med: Curve,
    /// No baseline point lies below-left of the integral curve.
    pub baselines_not_below_left: DominanceReport,
    /// Every baseline point is matched by a point of `coverage` with no
    /// more violation and no more dose.
    pub baselines_covered: DominanceReport,
    /// Integral sweep over the padding values in
    /// [`TradeoffSpec::coverage_deltas`], which may be negative.
    pub coverage: Curve,
    /// The MED point has no more violation and no more dose than every
    /// integral point.
    pub med_over_integral: DominanceReport,
}

impl SystemReport {
    pub fn integral(&self) -> &Curve {
        self.curves.last().expect("integral curve")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffSpec {
    pub baseline_points: usize,
    pub deltas: Vec<f64>,
    pub coverage_deltas: Vec<f64>,
    pub integral: ProtocolFamily,
    pub k_se: f64,
}

impl Default for TradeoffSpec {
    fn default() -> Self {
        Self {
            baseline_points: 9,
            deltas: default_tradeoff_deltas(),
            coverage_deltas: default_deltas(),
            integral: ProtocolFamily::DEFAULT_INTEGRAL,
            k_se: 2.0,
        }
    }
}

pub fn run_tradeoff(system: &CanonicalSystem, spec: &TradeoffSpec, cfg: &ExperimentConfig) -> Result<SystemReport> {
    let u0 = cfg.warmup.dose;
    let mut curves = Vec::new();
    for family in [ProtocolFamily::Linear, ProtocolFamily::Exponential] {
        let values = default_baseline_rates(family, system.taper_steps, u0, spec.baseline_points);
        curves.push(run_sweep(system, &SweepSpec { family, values }, cfg)?);
    }
    let integral = run_sweep(system, &SweepSpec { family: spec.integral, values: spec.deltas.clone() }, cfg)?;
    let med = run_med(system, cfg)?;

    let baselines_not_below_left =
        DominanceReport::merge(curves.iter().map(|b| check_not_below_left(&integral.points, b, spec.k_se)));
    let coverage =
        run_sweep(system, &SweepSpec { family: spec.integral, values: spec.coverage_deltas.clone() }, cfg)?;
    let baselines_covered = DominanceReport::merge(curves.iter().map(|b| check_dominance(&coverage.points, b, spec.k_se)));
    let med_over_integral = check_dominance(&med.points, &integral, spec.k_se);
    curves.push(integral);
    Ok(SystemReport {
        system: system.id.clone(),
        curves,
        med,
        baselines_not_below_left,
        baselines_covered,
        coverage,
        med_over_integral,
    })
}

/// One trade-off curve per `(lo, hi)` pair of `g(0)` bound fractions.
/// `(p1, p2)` pairs for the gain ablation: `k_minus = 1/(p1 g0)` and
/// `k_plus = 1/(p2 g0)`. The last pair violates `p1 <= 1 <= p2`.
pub const DEFAULT_ABLATION_PAIRS: [(f64, f64); 7] =
    [(0.5, 1.5), (0.25, 1.5), (0.5, 3.0), (0.25, 3.0), (0.75, 1.25), (1.0, 1.0), (1.5, 2.0)];

pub fn run_gain_ablation(
    system: &CanonicalSystem,
    pairs: &[(f64, f64)],
    deltas: &[f64],
    cfg: &ExperimentConfig,
) -> Result<Vec<Curve>> {
    pairs
        .iter()
        .map(|&(lo, hi)| {
            run_sweep(system, &SweepSpec { family: ProtocolFamily::Integral { lo, hi }, values: deltas.to_vec() }, cfg)
        })
        .collect()
}

/// Bound checks over every unit of a population run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationBoundReport {
    pub lo: f64,
    pub hi: f64,
    pub delta: f64,
    pub gains_compliant: bool,
    pub units: usize,
    pub stated_average_failures: usize,
    pub corrected_average_failures: usize,
    pub step_failures: usize,
}

/// Runs the integral controller with gains from `(lo, hi)` and padding
/// `delta` on every unit and checks the average and per-step bounds on each
/// trace.
pub fn check_population_bounds(
    system: &CanonicalSystem,
    (lo, hi): (f64, f64),
    delta: f64,
    cfg: &ExperimentConfig,
) -> Result<PopulationBoundReport> {
    cfg.validate()?;
    let kernel = system.kernel()?;
    let g0 = kernel.head();
    let gains = Gains::from_g0_fractions(g0, lo, hi)?;
    let policy = TaperPolicy::integral(gains, delta);
    let checks = sample_population(system, cfg)
        .par_iter()
        .map(|unit| {
            let trace = run_closed_loop(&unit_scenario(&kernel, system, unit, cfg), &policy)?;
            let frame = trace.taper_frame(&kernel)?;
            let avg = crate::oracles::check_average_bound(&frame, delta, gains, g0);
            let step = crate::oracles::check_step_bound(&frame, &kernel, delta);
            Ok((avg.stated.passed, avg.with_final_dose.passed, step.passed))
        })
        .collect::<Result<Vec<_>>>()?;
    let count = |f: fn(&(bool, bool, bool)) -> bool| checks.iter().filter(|c| !f(c)).count();
    Ok(PopulationBoundReport {
        lo,
        hi,
        delta,
        gains_compliant: ProtocolFamily::Integral { lo, hi }.gains_compliant(),
        units: checks.len(),
        stated_average_failures: count(|c| c.0),
        corrected_average_failures: count(|c| c.1),
        step_failures: count(|c| c.2),
    })
}

/// Integral curve over `deltas` with the MED reference, for comparing the
/// fraction of units fully tapered against violation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaperedFraction {
    pub integral: Curve,
    pub med: Curve,
    /// Padding values whose integral point the MED reference does not
    /// dominate: less violation, or a larger tapered fraction, by more than
    /// `k_se` standard errors.
    pub med_exceptions: Vec<f64>,
}

fn fraction_se(p: &CurvePoint) -> f64 {
    let f = p.fraction_fully_tapered;
    (f * (1.0 - f) / p.n as f64).sqrt()
}

pub fn run_tapered_fraction(
    system: &CanonicalSystem,
    deltas: &[f64],
    k_se: f64,
    cfg: &ExperimentConfig,
) -> Result<TaperedFraction> {
    let integral = run_sweep(
        system,
        &SweepSpec { family: ProtocolFamily::DEFAULT_INTEGRAL, values: deltas.to_vec() },
        cfg,
    )?;
    let med = run_med(system, cfg)?;
    let m = &med.points[0];
    let med_exceptions = integral
        .points
        .iter()
        .filter(|p| {
            let less_violation = z_score(m.mean_violation, m.se_violation, p.mean_violation, p.se_violation) > k_se;
            let more_tapered =
                z_score(p.fraction_fully_tapered, fraction_se(p), m.fraction_fully_tapered, fraction_se(m)) > k_se;
            less_violation || more_tapered
        })
        .map(|p| p.param)
        .collect();
    Ok(TaperedFraction { integral, med, med_exceptions })
}

pub fn certify_canonical(system: &CanonicalSystem) -> Result<()> {
    let g = system.kernel()?;
    certify_lpop(&g).map(|_| ()).map_err(|v| Error::InvalidKernel(format!("system {}: {v}", system.id)))
}

/// Writes per-unit outcomes with columns
/// `system,protocol,param,unit,y_min,avg_cum_dose,avg_cum_violation,fully_tapered,taper_time`.
pub fn write_long_csv<'a, W: Write>(out: W, curves: impl IntoIterator<Item = &'a Curve>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record([
        "system",
        "protocol",
        "param",
        "unit",
        "y_min",
        "avg_cum_dose",
        "avg_cum_violation",
        "fully_tapered",
        "taper_time",
    ])?;
    for curve in curves {
        for (point, units) in curve.points.iter().zip(&curve.units) {
            for u in units {
                wtr.write_record([
                    curve.system.clone(),
                    curve.protocol.clone(),
                    point.param.to_string(),
                    u.unit.to_string(),
                    u.y_min.to_string(),
                    u.avg_cum_dose.to_string(),
                    u.avg_cum_violation.to_string(),
                    u.fully_tapered.to_string(),
                    u.taper_time.map(|t| t.to_string()).unwrap_or_default(),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Writes one row per curve point with means, standard errors and the
/// tapered fraction.
pub fn write_summary_csv<'a, W: Write>(out: W, curves: impl IntoIterator<Item = &'a Curve>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record([
        "system",
        "protocol",
        "param",
        "n",
        "mean_violation",
        "se_violation",
        "mean_dose",
        "se_dose",
        "fraction_fully_tapered",
    ])?;
    for curve in curves {
        for p in &curve.points {
            wtr.write_record([
                curve.system.clone(),
                curve.protocol.clone(),
                p.param.to_string(),
                p.n.to_string(),
                p.mean_violation.to_string(),
                p.se_violation.to_string(),
                p.mean_dose.to_string(),
                p.se_dose.to_string(),
                p.fraction_fully_tapered.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Provenance of an experiment output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub software_version: String,
    pub constants_version: u32,
    pub constants_sha256: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub systems: Vec<String>,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, systems: Vec<String>, files: Vec<String>) -> Result<Self> {
        Ok(Self {
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            constants_version: canonical_constants_version()?,
            constants_sha256: canonical_constants_hash(),
            seed: cfg.seed,
            config: cfg.clone(),
            systems,
            files,
        })
    }
}
