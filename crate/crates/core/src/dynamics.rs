//! Closed-loop simulation of well-being under a linear dose response.
//!
//! Time runs over a warm-up phase at a fixed dose followed by a taper phase
//! in which a [`TaperPolicy`] picks every dose from what it can observe.
//! `y_0` equals the natural progression at time zero; every later step adds
//! the convolution of the dose history with the kernel.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DoseResponse, ImpulseResponse};
use crate::protocols::{ConstraintPath, Observation, TaperPolicy};

/// Well-being dynamics not attributable to recorded doses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NaturalProgression {
    Constant { base: f64 },
    /// Explicit values; the last one is held past the end.
    CustomSequence { values: Vec<f64> },
    /// `base + drift * t` with `drift >= 0`.
    MonotoneDrift { base: f64, drift: f64 },
    /// `base + drift * t` with `drift >= -l_nat`.
    LipschitzDrift { base: f64, drift: f64, l_nat: f64 },
}

impl Default for NaturalProgression {
    fn default() -> Self {
        NaturalProgression::Constant { base: 0.0 }
    }
}

impl NaturalProgression {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Constant { base } if !base.is_finite() => {
                Err(Error::param("base", "must be finite"))
            }
            Self::CustomSequence { values } => {
                if values.is_empty() {
                    Err(Error::param("values", "sequence must be nonempty"))
                } else if values.iter().any(|v| !v.is_finite()) {
                    Err(Error::param("values", "sequence must be finite"))
                } else {
                    Ok(())
                }
            }
            Self::MonotoneDrift { drift, .. } if !(*drift >= 0.0) => {
                Err(Error::param("drift", format!("{drift} must be nonnegative for a monotone drift")))
            }
            Self::LipschitzDrift { drift, l_nat, .. } => {
                if !(*l_nat >= 0.0) {
                    Err(Error::param("l_nat", format!("{l_nat} must be nonnegative")))
                } else if *drift < -l_nat {
                    Err(Error::param("drift", format!("{drift} falls faster than l_nat = {l_nat}")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, t: usize) -> f64 {
        match self {
            Self::Constant { base } => *base,
            Self::CustomSequence { values } => values[t.min(values.len() - 1)],
            Self::MonotoneDrift { base, drift } | Self::LipschitzDrift { base, drift, .. } => {
                base + drift * t as f64
            }
        }
    }
}

/// Exogenous perturbation of the natural progression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    #[default]
    None,
    Uniform { half_width: f64, seed: u64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Uniform { half_width, .. } if !(half_width.is_finite() && *half_width >= 0.0) => {
                Err(Error::param("half_width", format!("{half_width} must be finite and nonnegative")))
            }
            _ => Ok(()),
        }
    }

    /// `n` successive draws. Identical seeds give identical draws.
    pub fn draws(&self, n: usize) -> Vec<f64> {
        match *self {
            Self::None => vec![0.0; n],
            Self::Uniform { half_width, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| rng.random_range(-half_width..=half_width)).collect()
            }
        }
    }
}

/// Mixes an experiment seed with a unit id and a stream tag so that each
/// (unit, stream) pair owns an independent generator.
pub fn derive_seed(seed: u64, unit: u64, stream: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(seed) ^ unit) ^ stream.rotate_left(32))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Warmup {
    pub dose: f64,
    pub steps: usize,
}

impl Default for Warmup {
    fn default() -> Self {
        Self { dose: 1.0, steps: 60 }
    }
}

/// Everything about a closed-loop run except the policy.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub kernel: ImpulseResponse,
    pub nat: NaturalProgression,
    pub noise: NoiseSpec,
    pub warmup: Warmup,
    pub taper_steps: usize,
    pub constraint: ConstraintPath,
}

impl Scenario {
    pub fn new(kernel: ImpulseResponse, constraint: ConstraintPath, taper_steps: usize) -> Self {
        Self {
            kernel,
            nat: NaturalProgression::default(),
            noise: NoiseSpec::None,
            warmup: Warmup { dose: 0.0, steps: 0 },
            taper_steps,
            constraint,
        }
    }

    pub fn with_nat(mut self, nat: NaturalProgression) -> Self {
        self.nat = nat;
        self
    }

    pub fn with_noise(mut self, noise: NoiseSpec) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_warmup(mut self, dose: f64, steps: usize) -> Self {
        self.warmup = Warmup { dose, steps };
        self
    }

    fn validate(&self) -> Result<()> {
        self.nat.validate()?;
        self.noise.validate()?;
        self.constraint.validate(self.taper_steps + 1)?;
        if !(self.warmup.dose.is_finite() && self.warmup.dose >= 0.0) {
            return Err(Error::param("warmup.dose", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Aligned dose and well-being sequences of one run.
///
/// `doses[t]` is taken at time `t` and first affects `wellbeing[t + 1]`.
/// `nat` holds the natural progression actually injected, noise included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub doses: Vec<f64>,
    pub wellbeing: Vec<f64>,
    pub nat: Vec<f64>,
    pub y_min_path: Vec<f64>,
    pub warmup_len: usize,
    /// Taper steps at which a dose cap clipped the policy's recommendation.
    #[serde(default)]
    pub capped_steps: Vec<usize>,
    /// Noise is applied to warm-up steps as well as taper steps.
    pub noise_in_warmup: bool,
}

impl SimulationTrace {
    pub fn taper_len(&self) -> usize {
        self.doses.len() - self.warmup_len
    }

    /// The taper phase re-based to start at time zero, with the effect of all
    /// earlier doses folded into the natural progression.
    pub fn taper_frame(&self, g: &ImpulseResponse) -> Result<ProtocolFrame> {
        let w = self.warmup_len;
        ProtocolFrame::new(
            g,
            self.wellbeing[w..].to_vec(),
            self.doses[w..].to_vec(),
            self.y_min_path[w..].to_vec(),
        )
    }

    pub fn metrics(&self) -> Result<TraceMetrics> {
        let w = self.warmup_len;
        compute_metrics(&self.doses[w..], &self.wellbeing[w..], &self.y_min_path[w..])
    }

    /// Writes the trace as CSV with columns `t,u,y,y_nat,y_min,phase`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["t", "u", "y", "y_nat", "y_min", "phase"])?;
        self.write_rows(&mut wtr, None)?;
        wtr.flush()?;
        Ok(())
    }

    fn write_rows<W: Write>(&self, wtr: &mut csv::Writer<W>, unit: Option<&str>) -> Result<()> {
        for t in 0..self.wellbeing.len() {
            let u = self.doses.get(t).map(|u| u.to_string()).unwrap_or_default();
            let phase = if t < self.warmup_len { "warmup" } else { "taper" };
            let mut row = Vec::with_capacity(7);
            if let Some(unit) = unit {
                row.push(unit.to_string());
            }
            row.extend([
                t.to_string(),
                u,
                self.wellbeing[t].to_string(),
                self.nat[t].to_string(),
                self.y_min_path[t].to_string(),
                phase.to_string(),
            ]);
            wtr.write_record(&row)?;
        }
        Ok(())
    }
}

/// Writes several traces in long format, keyed by a leading `unit` column.
pub fn write_population_csv<'a, W, I>(out: W, traces: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (String, &'a SimulationTrace)>,
{
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["unit", "t", "u", "y", "y_nat", "y_min", "phase"])?;
    for (unit, trace) in traces {
        trace.write_rows(&mut wtr, Some(&unit))?;
    }
    wtr.flush()?;
    Ok(())
}

/// A protocol run viewed from its own start: `wellbeing[0]` is the first
/// observation, `doses[t]` the protocol's dose at `t`, and `nat` the natural
/// progression recovered relative to those doses only.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolFrame {
    pub wellbeing: Vec<f64>,
    pub doses: Vec<f64>,
    pub nat: Vec<f64>,
    pub y_min: Vec<f64>,
}

impl ProtocolFrame {
    pub fn new(
        g: &ImpulseResponse,
        wellbeing: Vec<f64>,
        doses: Vec<f64>,
        y_min: Vec<f64>,
    ) -> Result<Self> {
        if y_min.len() != wellbeing.len() {
            return Err(Error::LengthMismatch {
                what: "constraint path",
                expected: wellbeing.len(),
                found: y_min.len(),
            });
        }
        let nat = recover_natural_progression(g, &wellbeing, &doses)?;
        Ok(Self { wellbeing, doses, nat, y_min })
    }

    pub fn horizon(&self) -> usize {
        self.doses.len()
    }
}

/// Dose contribution to the next well-being value: `sum_k g(k) u_{t-k}` where
/// `t` is the last index of `doses`.
pub fn convolve<R: DoseResponse + ?Sized>(response: &R, doses: &[f64]) -> f64 {
    let t = doses.len();
    let reach = response.memory().min(t);
    (0..reach).map(|k| response.effect(k, doses[t - 1 - k])).sum()
}

/// Next well-being value given the dose history `u_0..u_t`.
pub fn simulate_step(g: &ImpulseResponse, dose_history: &[f64], y_nat_next: f64) -> f64 {
    convolve(g, dose_history) + y_nat_next
}

/// Open-loop response to a fixed schedule: `nat` has one more entry than
/// `doses` and the result is `y_0..y_T`.
pub fn simulate_open_loop<R: DoseResponse + ?Sized>(
    response: &R,
    doses: &[f64],
    nat: &[f64],
) -> Result<Vec<f64>> {
    if nat.len() != doses.len() + 1 {
        return Err(Error::LengthMismatch {
            what: "natural progression",
            expected: doses.len() + 1,
            found: nat.len(),
        });
    }
    let mut y = Vec::with_capacity(nat.len());
    y.push(nat[0]);
    for t in 0..doses.len() {
        y.push(convolve(response, &doses[..=t]) + nat[t + 1]);
    }
    Ok(y)
}

/// Inverts the dynamics: `y_nat_t = y_t - sum_{k=0}^{t-1} g(k) u_{t-k-1}`.
pub fn recover_natural_progression(
    g: &ImpulseResponse,
    wellbeing: &[f64],
    doses: &[f64],
) -> Result<Vec<f64>> {
    if wellbeing.len() != doses.len() + 1 {
        return Err(Error::LengthMismatch {
            what: "well-being sequence",
            expected: doses.len() + 1,
            found: wellbeing.len(),
        });
    }
    Ok(wellbeing
        .iter()
        .enumerate()
        .map(|(t, y)| y - convolve(g, &doses[..t]))
        .collect())
}

/// Runs the warm-up at its fixed dose, then lets `policy` choose every taper
/// dose. Noise is drawn for every step after time zero, warm-up included, and
/// added to the natural progression before the next observation.
pub fn run_closed_loop(scenario: &Scenario, policy: &TaperPolicy) -> Result<SimulationTrace> {
    scenario.validate()?;
    policy.validate()?;
    let g = &scenario.kernel;
    let w = scenario.warmup.steps;
    let total = w + scenario.taper_steps;

    let noise = scenario.noise.draws(total);
    let mut nat = Vec::with_capacity(total + 1);
    nat.push(scenario.nat.value(0));
    nat.extend((1..=total).map(|t| scenario.nat.value(t) + noise[t - 1]));

    let y_min_path: Vec<f64> = (0..=total)
        .map(|t| scenario.constraint.at(t.saturating_sub(w)))
        .collect();

    let mut doses = Vec::with_capacity(total);
    let mut wellbeing = Vec::with_capacity(total + 1);
    wellbeing.push(nat[0]);
    let mut capped_steps = Vec::new();
    let clairvoyant = policy.is_clairvoyant();

    for t in 0..total {
        let u = if t < w {
            scenario.warmup.dose
        } else {
            let step = t - w;
            let mut obs = Observation::new(
                step,
                &wellbeing,
                &doses,
                g,
                scenario.constraint.at(step),
                scenario.constraint.at(step + 1),
                scenario.warmup.dose,
            );
            if clairvoyant {
                obs = obs.with_true_nat_next(nat[t + 1]);
            }
            let decision = policy.decide(&obs)?;
            if !decision.dose.is_finite() || decision.dose < 0.0 {
                let partial = SimulationTrace {
                    doses: doses.clone(),
                    wellbeing: wellbeing.clone(),
                    nat: nat[..=t].to_vec(),
                    y_min_path: y_min_path[..=t].to_vec(),
                    warmup_len: w,
                    capped_steps,
                    noise_in_warmup: true,
                };
                return Err(Error::ProtocolAbort {
                    step,
                    dose: decision.dose,
                    partial: Box::new(partial),
                });
            }
            if decision.capped {
                capped_steps.push(step);
            }
            decision.dose
        };
        doses.push(u);
        wellbeing.push(simulate_step(g, &doses, nat[t + 1]));
    }

    Ok(SimulationTrace {
        doses,
        wellbeing,
        nat,
        y_min_path,
        warmup_len: w,
        capped_steps,
        noise_in_warmup: true,
    })
}

/// Per-run tapering metrics over the protocol window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub horizon: usize,
    pub avg_cum_dose: f64,
    pub avg_cum_violation: f64,
    /// `(sum_{t=1}^T y_t) / T - mean(y_min_1..T)` for every prefix `T`.
    pub long_term_violation: Vec<f64>,
    pub fully_tapered: bool,
    pub taper_time: Option<usize>,
    /// Set when the protocol window is empty.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub warmup_only: bool,
}

/// Metrics for a protocol window: `doses` are `u_0..u_{T-1}`, `wellbeing` and
/// `y_min` are `y_0..y_T` and the matching constraint values.
pub fn compute_metrics(doses: &[f64], wellbeing: &[f64], y_min: &[f64]) -> Result<TraceMetrics> {
    let horizon = doses.len();
    for (what, len) in [("well-being sequence", wellbeing.len()), ("constraint path", y_min.len())] {
        if len != horizon + 1 {
            return Err(Error::LengthMismatch { what, expected: horizon + 1, found: len });
        }
    }
    if horizon == 0 {
        return Ok(TraceMetrics {
            horizon,
            avg_cum_dose: 0.0,
            avg_cum_violation: 0.0,
            long_term_violation: Vec::new(),
            fully_tapered: false,
            taper_time: None,
            warmup_only: true,
        });
    }
    let n = horizon as f64;
    let avg_cum_dose = doses.iter().sum::<f64>() / n;
    let avg_cum_violation = (1..=horizon)
        .map(|t| (y_min[t] - wellbeing[t]).max(0.0))
        .sum::<f64>()
        / n;

    let mut sum_y = 0.0;
    let mut sum_min = 0.0;
    let long_term_violation = (1..=horizon)
        .map(|t| {
            sum_y += wellbeing[t];
            sum_min += y_min[t];
            (sum_y - sum_min) / t as f64
        })
        .collect();

    let taper_time = if doses[horizon - 1] == 0.0 {
        let nonzero_tail = doses.iter().rposition(|&u| u != 0.0);
        Some(nonzero_tail.map_or(0, |i| i + 1))
    } else {
        None
    };

    Ok(TraceMetrics {
        horizon,
        avg_cum_dose,
        avg_cum_violation,
        long_term_violation,
        fully_tapered: taper_time.is_some(),
        taper_time,
        warmup_only: false,
    })
}
