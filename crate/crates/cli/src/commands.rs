use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use taper::dynamics::{run_closed_loop, NaturalProgression, NoiseSpec, Scenario, Warmup};
use taper::experiments::{
    canonical_system, check_population_bounds, default_deltas, run_gain_ablation, run_med, run_tradeoff,
    write_long_csv, write_summary_csv, Curve, ExperimentConfig, Manifest, PopulationBoundReport, ProtocolFamily,
    TradeoffSpec, DEFAULT_ABLATION_PAIRS,
};
use taper::models::certify_lpop;
use taper::oracles::suites::{
    bisection_suite, controller_suite, med_oracle_suite, monotone_taper_suite, BisectionSuiteReport,
    ControllerSuiteReport, MedOracleReport, TaperSuiteReport,
};
use taper::oracles::{check_average_bound, check_step_bound, AverageBoundReport, BoundCheck, DoseGrid};
use taper::protocols::{ConstraintPath, Gains, NatBound, TaperPolicy, DEFAULT_BISECTION_EPS};

use crate::specs::{json_arg, parse_list, parse_pairs, read_json, SystemSpec};
use crate::{
    AblateArgs, CertifyArgs, CliError, Command, PopulationArgs, ServeArgs, SimulateArgs, SweepArgs, VerifyArgs,
    DEFAULT_SEED, EXIT_DOMAIN, EXIT_OK,
};

type Outcome = Result<i32, CliError>;

pub fn dispatch(command: Command, stdout: &mut dyn Write) -> Outcome {
    match command {
        Command::Certify(a) => certify(a, stdout),
        Command::Simulate(a) => simulate(a, stdout),
        Command::Sweep(a) => sweep(a, stdout),
        Command::Ablate(a) => ablate(a, stdout),
        Command::Verify(a) => verify(a, stdout),
        Command::Serve(a) => serve(a),
    }
}

fn print(stdout: &mut dyn Write, text: impl AsRef<str>) -> Result<(), CliError> {
    stdout.write_all(text.as_ref().as_bytes()).map_err(|e| CliError::io("stdout", e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::io(path.display(), e))
}

fn out_dir(path: Option<PathBuf>, default: &str) -> Result<PathBuf, CliError> {
    let dir = path.unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(dir.display(), e))?;
    Ok(dir)
}

/// Runs `f` on a pool of `jobs` threads, or the global pool.
fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(CliError::usage("--jobs must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::domain(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Serialize)]
struct CertifyOutput {
    system: String,
    horizon: usize,
    g0: f64,
    lpop: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    certificate: Option<taper::models::LpopCertificate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    violation: Option<taper::models::Violation>,
}

fn certify(args: CertifyArgs, stdout: &mut dyn Write) -> Outcome {
    let spec = match (&args.spec, &args.canonical) {
        (_, Some(id)) => SystemSpec::canonical(id),
        (Some(path), None) => read_json(path)?,
        (None, None) => return Err(CliError::usage("give a spec file or --canonical")),
    };
    let system = spec.resolve()?;
    let g = &system.kernel;
    let (certificate, violation) = match certify_lpop(g) {
        Ok(c) => (Some(c), None),
        Err(v) => (None, Some(v)),
    };
    let lpop = certificate.is_some();
    let message = violation.as_ref().map(|v| format!("{}: not certified: {v}", system.label));
    let out = CertifyOutput { system: system.label, horizon: g.horizon(), g0: g.head(), lpop, certificate, violation };
    print(stdout, to_json(&out))?;
    match message {
        None => Ok(EXIT_OK),
        Some(m) => Err(CliError::domain(m)),
    }
}

/// A policy given in full or by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyArg {
    Named(String),
    Spec(TaperPolicy),
}

/// Simulation settings. Every field is optional in a config file; flags
/// override the file and defaults fill the rest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub system: Option<SystemSpec>,
    pub policy: Option<PolicyArg>,
    /// Padding used when `policy` is the `integral` shorthand.
    pub delta: Option<f64>,
    pub nat: Option<NaturalProgression>,
    pub noise_half_width: Option<f64>,
    pub seed: Option<u64>,
    pub taper_steps: Option<usize>,
    pub warmup: Option<Warmup>,
    pub y_min: Option<f64>,
}

#[derive(Serialize)]
struct SimulateReport {
    system: String,
    policy: TaperPolicy,
    metrics: taper::dynamics::TraceMetrics,
    noise_in_warmup: bool,
    capped_steps: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    step_bound: Option<BoundCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    average_bound: Option<AverageBoundReport>,
}

/// Fractions of `g(0)` bracketing the gains of the `integral` shorthand.
pub const DEFAULT_GAIN_FRACTIONS: (f64, f64) = (0.5, 1.5);

fn simulate_config(args: &SimulateArgs) -> Result<SimulateConfig, CliError> {
    let mut cfg: SimulateConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => SimulateConfig::default(),
    };
    if let Some(path) = &args.system {
        cfg.system = Some(read_json(path)?);
    }
    if let Some(id) = &args.canonical {
        cfg.system = Some(SystemSpec::canonical(id));
    }
    if let Some(p) = &args.policy {
        cfg.policy = Some(if p.trim_start().starts_with('{') || p.starts_with('@') {
            PolicyArg::Spec(json_arg(p, "--policy")?)
        } else {
            PolicyArg::Named(p.clone())
        });
    }
    if let Some(n) = &args.nat {
        cfg.nat = Some(json_arg(n, "--nat")?);
    }
    let warmup = cfg.warmup.unwrap_or_default();
    cfg.warmup = Some(Warmup {
        dose: args.warmup_dose.unwrap_or(warmup.dose),
        steps: args.warmup_steps.unwrap_or(warmup.steps),
    });
    macro_rules! take {
        ($($field:ident),*) => { $( if let Some(v) = args.$field { cfg.$field = Some(v); } )* };
    }
    take!(delta, noise_half_width, seed, taper_steps, y_min);

    let system = cfg.system.clone().ok_or_else(|| CliError::usage("simulate needs --system, --canonical or a config `system`"))?;
    let resolved = system.resolve()?;
    let canonical = resolved.canonical.as_ref();
    cfg.taper_steps.get_or_insert(canonical.map_or(100, |c| c.taper_steps));
    cfg.y_min.get_or_insert(canonical.map_or(0.0, |c| 0.5 * (c.y_min.lo + c.y_min.hi)));
    cfg.nat.get_or_insert_with(NaturalProgression::default);
    cfg.noise_half_width.get_or_insert(0.0);
    cfg.seed.get_or_insert(DEFAULT_SEED);
    let delta = *cfg.delta.get_or_insert(0.0);
    let g0 = resolved.kernel.head();
    let policy = match cfg.policy.take().unwrap_or(PolicyArg::Named("integral".into())) {
        PolicyArg::Spec(p) => p,
        PolicyArg::Named(name) => match name.as_str() {
            "integral" => {
                let (lo, hi) = DEFAULT_GAIN_FRACTIONS;
                TaperPolicy::integral(Gains::from_g0_fractions(g0, lo, hi)?, delta)
            }
            "med" => TaperPolicy::Med { nat_bound: NatBound::Clairvoyant },
            "fixed" => TaperPolicy::Fixed { u: cfg.warmup.unwrap_or_default().dose },
            other => return Err(CliError::usage(format!("unknown policy `{other}`; use integral, med, fixed or JSON"))),
        },
    };
    policy.validate()?;
    cfg.policy = Some(PolicyArg::Spec(policy));
    Ok(cfg)
}

fn simulate(args: SimulateArgs, stdout: &mut dyn Write) -> Outcome {
    let cfg = simulate_config(&args)?;
    if args.print_effective_config {
        print(stdout, to_json(&cfg))?;
        return Ok(EXIT_OK);
    }
    let system = cfg.system.as_ref().expect("filled").resolve()?;
    let Some(PolicyArg::Spec(policy)) = cfg.policy.clone() else { unreachable!("policy resolved") };
    let warmup = cfg.warmup.expect("filled");
    let half_width = cfg.noise_half_width.expect("filled");
    let noise = if half_width > 0.0 {
        NoiseSpec::Uniform { half_width, seed: cfg.seed.expect("filled") }
    } else {
        NoiseSpec::None
    };
    let scenario = Scenario::new(
        system.kernel.clone(),
        ConstraintPath::Constant(cfg.y_min.expect("filled")),
        cfg.taper_steps.expect("filled"),
    )
    .with_nat(cfg.nat.clone().expect("filled"))
    .with_noise(noise)
    .with_warmup(warmup.dose, warmup.steps);

    let dir = out_dir(args.out, "simulate-out")?;
    write_file(&dir, "config.json", to_json(&cfg).as_bytes())?;
    let trace = match run_closed_loop(&scenario, &policy) {
        Ok(t) => t,
        Err(taper::Error::ProtocolAbort { step, dose, partial }) => {
            let mut csv = Vec::new();
            partial.write_csv(&mut csv)?;
            write_file(&dir, "trace.partial.csv", &csv)?;
            return Err(CliError::domain(format!(
                "policy produced dose {dose} at taper step {step}; partial trace in {}",
                dir.join("trace.partial.csv").display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    write_file(&dir, "trace.csv", &csv)?;

    let (step_bound, average_bound) = match policy {
        TaperPolicy::Integral { k_plus, k_minus, delta, .. } if trace.taper_len() > 0 => {
            let frame = trace.taper_frame(&system.kernel)?;
            let g = &system.kernel;
            (
                Some(check_step_bound(&frame, g, delta)),
                Some(check_average_bound(&frame, delta, Gains { k_plus, k_minus }, g.head())),
            )
        }
        _ => (None, None),
    };
    let report = SimulateReport {
        system: system.label,
        policy,
        metrics: trace.metrics()?,
        noise_in_warmup: trace.noise_in_warmup,
        capped_steps: trace.capped_steps.clone(),
        step_bound,
        average_bound,
    };
    write_file(&dir, "metrics.json", to_json(&report).as_bytes())?;
    let m = &report.metrics;
    let mut line = format!(
        "{}: {} taper steps, avg cumulative dose {:.6}, avg cumulative violation {:.6}, fully tapered: {}",
        report.system, m.horizon, m.avg_cum_dose, m.avg_cum_violation, m.fully_tapered
    );
    if m.warmup_only {
        line.push_str(" (warm-up only)");
    }
    print(stdout, line + "\n")?;
    Ok(EXIT_OK)
}

/// Sweep and ablation settings, in the shape printed by
/// `--print-effective-config` and accepted by `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub systems: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub population: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup: Option<Warmup>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_half_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_points: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage_deltas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain_fractions: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<(f64, f64)>>,
}

const ALL_SYSTEMS: [&str; 4] = ["A", "B", "C", "D"];

impl PopulationConfig {
    fn load(args: &PopulationArgs, systems: &Option<String>) -> Result<Self, CliError> {
        let mut cfg: Self = match &args.config {
            Some(path) => read_json(path)?,
            None => Self::default(),
        };
        if let Some(s) = systems {
            cfg.systems = Some(s.split(',').map(|x| x.trim().to_string()).collect());
        }
        let systems = cfg.systems.get_or_insert_with(|| ALL_SYSTEMS.map(String::from).to_vec());
        for id in systems.iter_mut() {
            *id = canonical_system(id).map_err(|e| CliError::usage(e.to_string()))?.id;
        }
        let defaults = ExperimentConfig::default();
        let warmup = cfg.warmup.unwrap_or(defaults.warmup);
        cfg.warmup = Some(Warmup {
            dose: args.warmup_dose.unwrap_or(warmup.dose),
            steps: args.warmup_steps.unwrap_or(warmup.steps),
        });
        if let Some(v) = args.seed {
            cfg.seed = Some(v);
        }
        if let Some(v) = args.population {
            cfg.population = Some(v);
        }
        if let Some(v) = args.noise_half_width {
            cfg.noise_half_width = Some(v);
        }
        if let Some(v) = &args.deltas {
            cfg.deltas = Some(parse_list(v)?);
        }
        cfg.seed.get_or_insert(DEFAULT_SEED);
        cfg.population.get_or_insert(defaults.population);
        cfg.noise_half_width.get_or_insert(defaults.noise_half_width);
        Ok(cfg)
    }

    fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            population: self.population.expect("filled"),
            warmup: self.warmup.expect("filled"),
            noise_half_width: self.noise_half_width.expect("filled"),
            seed: self.seed.expect("filled"),
        }
    }

    fn reject(&self, command: &str, fields: &[(&str, bool)]) -> Result<(), CliError> {
        match fields.iter().find(|(_, set)| *set) {
            Some((name, _)) => Err(CliError::usage(format!("field `{name}` does not apply to {command}"))),
            None => Ok(()),
        }
    }
}

fn sweep_config(args: &SweepArgs) -> Result<PopulationConfig, CliError> {
    let mut cfg = PopulationConfig::load(&args.common, &args.systems)?;
    cfg.reject("sweep", &[("pairs", cfg.pairs.is_some())])?;
    if let Some(v) = args.baseline_points {
        cfg.baseline_points = Some(v);
    }
    if let Some(v) = &args.coverage_deltas {
        cfg.coverage_deltas = Some(parse_list(v)?);
    }
    if let Some(v) = &args.gain_fractions {
        let pairs = parse_pairs(v)?;
        let [pair] = pairs[..] else {
            return Err(CliError::usage("--gain-fractions takes a single lo:hi pair"));
        };
        cfg.gain_fractions = Some(pair);
    }
    if let Some(v) = args.k_se {
        cfg.k_se = Some(v);
    }
    let d = TradeoffSpec::default();
    cfg.baseline_points.get_or_insert(d.baseline_points);
    cfg.deltas.get_or_insert(d.deltas);
    cfg.coverage_deltas.get_or_insert(d.coverage_deltas);
    cfg.k_se.get_or_insert(d.k_se);
    if let ProtocolFamily::Integral { lo, hi } = d.integral {
        cfg.gain_fractions.get_or_insert((lo, hi));
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct DominanceSummary<'a> {
    system: &'a str,
    baselines_not_below_left: &'a taper::experiments::DominanceReport,
    baselines_covered: &'a taper::experiments::DominanceReport,
    med_over_integral: &'a taper::experiments::DominanceReport,
}

fn sweep(args: SweepArgs, stdout: &mut dyn Write) -> Outcome {
    let cfg = sweep_config(&args)?;
    if args.common.print_effective_config {
        print(stdout, to_json(&cfg))?;
        return Ok(EXIT_OK);
    }
    let exp = cfg.experiment();
    let (lo, hi) = cfg.gain_fractions.expect("filled");
    let spec = TradeoffSpec {
        baseline_points: cfg.baseline_points.expect("filled"),
        deltas: cfg.deltas.clone().expect("filled"),
        coverage_deltas: cfg.coverage_deltas.clone().expect("filled"),
        integral: ProtocolFamily::Integral { lo, hi },
        k_se: cfg.k_se.expect("filled"),
    };
    let systems = cfg.systems.clone().expect("filled");
    let reports = with_jobs(args.common.jobs, || {
        systems
            .iter()
            .map(|id| run_tradeoff(&canonical_system(id)?, &spec, &exp))
            .collect::<taper::Result<Vec<_>>>()
    })??;

    let dir = out_dir(args.common.out, "sweep-out")?;
    let mut files = Vec::new();
    let mut all_curves: Vec<&Curve> = Vec::new();
    let mut summaries = Vec::new();
    let mut holds = true;
    for r in &reports {
        let curves: Vec<&Curve> = r.curves.iter().chain([&r.med]).collect();
        let mut csv = Vec::new();
        write_summary_csv(&mut csv, curves.iter().copied())?;
        let name = format!("summary_{}.csv", r.system);
        write_file(&dir, &name, &csv)?;
        files.push(name);
        let mut csv = Vec::new();
        write_summary_csv(&mut csv, [&r.coverage])?;
        let name = format!("coverage_{}.csv", r.system);
        write_file(&dir, &name, &csv)?;
        files.push(name);
        all_curves.extend(curves);

        let ok = |d: &taper::experiments::DominanceReport| if d.holds() { "holds".to_string() } else { format!("{} exceptions", d.exceptions.len()) };
        print(
            stdout,
            format!(
                "{}: baselines not below-left of integral: {}; baselines covered: {}; MED over integral: {}\n",
                r.system,
                ok(&r.baselines_not_below_left),
                ok(&r.baselines_covered),
                ok(&r.med_over_integral)
            ),
        )?;
        holds &= r.baselines_not_below_left.holds() && r.med_over_integral.holds();
        summaries.push(DominanceSummary {
            system: &r.system,
            baselines_not_below_left: &r.baselines_not_below_left,
            baselines_covered: &r.baselines_covered,
            med_over_integral: &r.med_over_integral,
        });
    }
    let mut long = Vec::new();
    write_long_csv(&mut long, all_curves)?;
    write_file(&dir, "long.csv", &long)?;
    write_file(&dir, "dominance.json", to_json(&summaries).as_bytes())?;
    write_file(&dir, "effective_config.json", to_json(&cfg).as_bytes())?;
    files.extend(["long.csv", "dominance.json", "effective_config.json"].map(String::from));
    let manifest = Manifest::new(&exp, systems, files)?;
    write_file(&dir, "manifest.json", to_json(&manifest).as_bytes())?;
    Ok(if args.require_dominance && !holds { EXIT_DOMAIN } else { EXIT_OK })
}

fn ablate_config(args: &AblateArgs) -> Result<PopulationConfig, CliError> {
    let mut cfg = PopulationConfig::load(&args.common, &args.systems)?;
    cfg.reject(
        "ablate",
        &[
            ("baseline_points", cfg.baseline_points.is_some()),
            ("coverage_deltas", cfg.coverage_deltas.is_some()),
            ("gain_fractions", cfg.gain_fractions.is_some()),
            ("k_se", cfg.k_se.is_some()),
        ],
    )?;
    if let Some(p) = &args.pairs {
        cfg.pairs = Some(parse_pairs(p)?);
    }
    cfg.pairs.get_or_insert_with(|| DEFAULT_ABLATION_PAIRS.to_vec());
    cfg.deltas.get_or_insert_with(default_deltas);
    Ok(cfg)
}

#[derive(Serialize)]
struct AblationBounds<'a> {
    system: &'a str,
    pairs: Vec<PopulationBoundReport>,
}

fn ablate(args: AblateArgs, stdout: &mut dyn Write) -> Outcome {
    let cfg = ablate_config(&args)?;
    if args.common.print_effective_config {
        print(stdout, to_json(&cfg))?;
        return Ok(EXIT_OK);
    }
    let exp = cfg.experiment();
    let pairs = cfg.pairs.clone().expect("filled");
    let deltas = cfg.deltas.clone().expect("filled");
    let systems = cfg.systems.clone().expect("filled");
    let results = with_jobs(args.common.jobs, || {
        systems
            .iter()
            .map(|id| {
                let sys = canonical_system(id)?;
                let curves = run_gain_ablation(&sys, &pairs, &deltas, &exp)?;
                let med = run_med(&sys, &exp)?;
                let bounds = pairs
                    .iter()
                    .flat_map(|&pair| deltas.iter().map(move |&d| (pair, d)))
                    .map(|(pair, d)| check_population_bounds(&sys, pair, d, &exp))
                    .collect::<taper::Result<Vec<_>>>()?;
                Ok((sys.id, curves, med, bounds))
            })
            .collect::<taper::Result<Vec<_>>>()
    })??;

    let dir = out_dir(args.common.out, "ablate-out")?;
    let mut curves: Vec<&Curve> = Vec::new();
    let mut bounds = Vec::new();
    for (id, c, med, b) in &results {
        curves.extend(c.iter().chain([med]));
        for (curve, &(lo, hi)) in c.iter().zip(&pairs) {
            let reports: Vec<_> = b.iter().filter(|r| r.lo == lo && r.hi == hi).collect();
            let step: usize = reports.iter().map(|r| r.step_failures).sum();
            let corrected: usize = reports.iter().map(|r| r.corrected_average_failures).sum();
            let units: usize = reports.iter().map(|r| r.units).sum();
            print(
                stdout,
                format!(
                    "{id} gains {lo}:{hi} ({}): compliant {}, per-step bound failures {step}/{units}, average bound (with final dose) failures {corrected}/{units}\n",
                    curve.protocol,
                    curve.family.gains_compliant()
                ),
            )?;
        }
        bounds.push(AblationBounds { system: id, pairs: b.clone() });
    }
    let mut csv = Vec::new();
    write_summary_csv(&mut csv, curves.iter().copied())?;
    write_file(&dir, "summary.csv", &csv)?;
    let mut long = Vec::new();
    write_long_csv(&mut long, curves)?;
    write_file(&dir, "long.csv", &long)?;
    write_file(&dir, "bounds.json", to_json(&bounds).as_bytes())?;
    write_file(&dir, "effective_config.json", to_json(&cfg).as_bytes())?;
    let files = ["summary.csv", "long.csv", "bounds.json", "effective_config.json"].map(String::from).to_vec();
    write_file(&dir, "manifest.json", to_json(&Manifest::new(&exp, systems, files)?).as_bytes())?;
    Ok(EXIT_OK)
}

/// Everything `verify` ran.
#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub controller: ControllerSuiteReport,
    pub monotone_taper: TaperSuiteReport,
    pub med_oracle: MedOracleReport,
    pub bisection: BisectionSuiteReport,
    pub checks: Vec<(String, bool, String)>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(_, ok, _)| *ok)
    }
}

pub fn run_verify(args: &VerifyArgs) -> Result<VerifyReport, CliError> {
    let seed = args.seed.unwrap_or(DEFAULT_SEED);
    let grid = DoseGrid::new(DoseGrid::default().max_dose, args.med_grid)?;
    let (controller, taper, med, bisection) = with_jobs(args.jobs, || -> taper::Result<_> {
        Ok((
            controller_suite(args.runs, seed)?,
            monotone_taper_suite(args.taper_systems, seed)?,
            med_oracle_suite(args.med_instances, seed, grid, args.med_horizon)?,
            bisection_suite(args.bisection_instances, seed, DEFAULT_BISECTION_EPS)?,
        ))
    })??;
    let c = &controller;
    let mut checks = vec![(
        "per-step bound".to_string(),
        c.step_failures == 0,
        format!("{} failing runs of {}, min margin {:.3e}", c.step_failures, c.runs, c.min_step_margin),
    )];
    if !args.skip_stated {
        checks.push((
            "prefix-average bound, stated form".into(),
            c.stated_average_failures == 0,
            format!("{} failing runs of {}, min margin {:.3e}", c.stated_average_failures, c.runs, c.min_stated_average_margin),
        ));
    }
    checks.extend([
        (
            "prefix-average bound with final-dose term".into(),
            c.corrected_average_failures == 0,
            format!("{} failing runs of {}, min margin {:.3e}", c.corrected_average_failures, c.runs, c.min_corrected_average_margin),
        ),
        (
            "monotone taper on coarsened systems".into(),
            taper.passed(),
            format!(
                "{} systems, {} precondition and {} conclusion failures",
                taper.systems, taper.precondition_failures, taper.conclusion_failures
            ),
        ),
        (
            "MED against the grid optimum".into(),
            med.optimality_failures == 0,
            format!("{} instances, max excess {:.3e}", med.instances, med.max_excess),
        ),
        ("MED safety".into(), med.safety_failures == 0, format!("{} unsafe instances", med.safety_failures)),
        (
            "bisection, linear responses".into(),
            bisection.linear_failures == 0,
            format!("{} instances, max error {:.3e}", bisection.linear_instances, bisection.linear_max_error),
        ),
        (
            "bisection, nonlinear responses".into(),
            bisection.tolerance_failures == 0 && bisection.iteration_failures == 0,
            format!(
                "{} instances, {} tolerance and {} iteration-bound failures",
                bisection.nonlinear_instances, bisection.tolerance_failures, bisection.iteration_failures
            ),
        ),
    ]);
    Ok(VerifyReport { seed, controller, monotone_taper: taper, med_oracle: med, bisection, checks })
}

fn verify(args: VerifyArgs, stdout: &mut dyn Write) -> Outcome {
    let report = run_verify(&args)?;
    for (name, ok, detail) in &report.checks {
        print(stdout, format!("{} {name}: {detail}\n", if *ok { "PASS" } else { "FAIL" }))?;
    }
    if let Some(path) = &args.report {
        fs::write(path, to_json(&report)).map_err(|e| CliError::io(path.display(), e))?;
    }
    Ok(if report.passed() { EXIT_OK } else { EXIT_DOMAIN })
}

fn serve(args: ServeArgs) -> Outcome {
    use taper_session::{EventStore, LoadMode, SessionService, SystemClock};
    let addr = args.addr.parse().map_err(|e| CliError::usage(format!("--addr {}: {e}", args.addr)))?;
    let store = EventStore::open(&args.store).map_err(|e| CliError::io(args.store.display(), e))?;
    let mode = if args.full_replay { LoadMode::FullReplay } else { LoadMode::Snapshot };
    let service = SessionService::open(store, Arc::new(SystemClock), mode)
        .map_err(|e| CliError::domain(format!("loading sessions: {e}")))?;
    eprintln!("{} sessions loaded from {}", service.len(), args.store.display());
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::domain(format!("runtime: {e}")))?;
    runtime
        .block_on(taper_session::http::serve(Arc::new(service), addr))
        .map_err(|e| CliError::io(addr, e))?;
    Ok(EXIT_OK)
}
