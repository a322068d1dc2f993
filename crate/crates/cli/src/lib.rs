//! Command-line front end for the `taper` library.
//!
//! [`run`] parses arguments, dispatches to a subcommand and returns the
//! process exit code: 0 on success, 1 when the computation reports a domain
//! failure (a kernel that does not certify, a protocol abort, a failing
//! oracle suite) and 2 for usage or parse errors.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod specs;

pub const DEFAULT_SEED: u64 = 0;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// A failed command and its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn domain(message: impl Into<String>) -> Self {
        Self { code: EXIT_DOMAIN, message: message.into() }
    }

    pub fn io(context: impl fmt::Display, e: impl fmt::Display) -> Self {
        Self { code: EXIT_DOMAIN, message: format!("{context}: {e}") }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<taper::Error> for CliError {
    fn from(e: taper::Error) -> Self {
        match e {
            taper::Error::InvalidParameter { .. }
            | taper::Error::InvalidMode { .. }
            | taper::Error::EmptyModes
            | taper::Error::InvalidKernel(_)
            | taper::Error::InvalidBlock { .. }
            | taper::Error::Json(_) => Self::usage(e.to_string()),
            _ => Self::domain(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "taper", version, about = "Opponent-process tapering: certification, simulation, sweeps and sessions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Certify that a response kernel is a linearly progressing opponent process.
    Certify(CertifyArgs),
    /// Run one closed-loop simulation and write its trace and metrics.
    Simulate(SimulateArgs),
    /// Population trade-off sweeps on the canonical systems.
    Sweep(SweepArgs),
    /// Integral-controller sweeps over a list of gain brackets.
    Ablate(AblateArgs),
    /// Run the oracle suites; exit 0 only if every check passes.
    Verify(VerifyArgs),
    /// Serve interactive tapering sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    /// System spec file: {"modes": [{"c": .., "lambda": ..}]}, {"kernel": [..]} or {"canonical": "A"}.
    #[arg(required_unless_present = "canonical")]
    pub spec: Option<PathBuf>,
    /// Certify a canonical system instead of a spec file.
    #[arg(long, conflicts_with = "spec")]
    pub canonical: Option<String>,
}

/// Population settings shared by sweep and ablate.
#[derive(Debug, Clone, Args)]
pub struct PopulationArgs {
    /// JSON file with any of the fields printed by --print-effective-config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "TAPER_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub warmup_dose: Option<f64>,
    #[arg(long)]
    pub noise_half_width: Option<f64>,
    /// Comma-separated padding values for the integral controller.
    #[arg(long, allow_hyphen_values = true)]
    pub deltas: Option<String>,
    /// Worker threads; defaults to all cores. Outputs do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the merged configuration as JSON and exit.
    #[arg(long)]
    pub print_effective_config: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON file with any of the fields printed by --print-effective-config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// System spec file.
    #[arg(long, conflicts_with = "canonical")]
    pub system: Option<PathBuf>,
    #[arg(long)]
    pub canonical: Option<String>,
    /// Policy JSON (or @file), or one of `integral`, `med`, `fixed`.
    #[arg(long)]
    pub policy: Option<String>,
    /// Padding for the `integral` shorthand.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Natural progression JSON (or @file), e.g. {"kind": "constant", "base": 0}.
    #[arg(long)]
    pub nat: Option<String>,
    #[arg(long)]
    pub noise_half_width: Option<f64>,
    #[arg(long, env = "TAPER_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub taper_steps: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub warmup_dose: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub y_min: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub print_effective_config: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: PopulationArgs,
    /// Comma-separated canonical system ids.
    #[arg(long)]
    pub systems: Option<String>,
    #[arg(long)]
    pub baseline_points: Option<usize>,
    /// Padding values for the coverage check; may be negative.
    #[arg(long, allow_hyphen_values = true)]
    pub coverage_deltas: Option<String>,
    /// Gain bracket as fractions of g(0), `lo:hi`.
    #[arg(long)]
    pub gain_fractions: Option<String>,
    /// Standard errors tolerated by the dominance checks.
    #[arg(long)]
    pub k_se: Option<f64>,
    /// Exit 1 unless every dominance check holds.
    #[arg(long)]
    pub require_dominance: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: PopulationArgs,
    #[arg(long)]
    pub systems: Option<String>,
    /// Gain brackets `p1:p2,...` giving k_minus = 1/(p1 g0) and k_plus = 1/(p2 g0).
    #[arg(long)]
    pub pairs: Option<String>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, env = "TAPER_SEED")]
    pub seed: Option<u64>,
    /// Integral-controller runs for the step and average bounds.
    #[arg(long, default_value_t = 1000)]
    pub runs: usize,
    /// Coarsened systems for the monotone taper suite.
    #[arg(long, default_value_t = 100)]
    pub taper_systems: usize,
    #[arg(long, default_value_t = 200)]
    pub med_instances: usize,
    #[arg(long, default_value_t = 4)]
    pub med_horizon: usize,
    #[arg(long, default_value_t = 0.05)]
    pub med_grid: f64,
    #[arg(long, default_value_t = 100)]
    pub bisection_instances: usize,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Leave out the prefix-average bound without the final-dose term.
    #[arg(long)]
    pub skip_stated: bool,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "TAPER_ADDR", default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Directory holding the session logs.
    #[arg(long, env = "TAPER_STORE", default_value = "sessions")]
    pub store: PathBuf,
    /// Rebuild sessions from their full logs rather than snapshots.
    #[arg(long)]
    pub full_replay: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    match commands::dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.code
        }
    }
}
