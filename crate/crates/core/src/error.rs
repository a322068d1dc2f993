use thiserror::Error;

use crate::dynamics::SimulationTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mode list is empty")]
    EmptyModes,

    #[error("invalid mode {index}: {reason}")]
    InvalidMode { index: usize, reason: String },

    #[error("tail tolerance {tail_tol} needs a horizon of {required} steps, above the cap of {cap}")]
    HorizonCap { required: usize, cap: usize, tail_tol: f64 },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid block size {block} for a kernel of horizon {horizon}")]
    InvalidBlock { block: usize, horizon: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("g(0) = {0} is not positive; the kernel has no A-process head")]
    NonPositiveHead(f64),

    #[error("target {target} exceeds the response {reachable} at the dose cap {dose_cap}")]
    InfeasibleTarget { target: f64, reachable: f64, dose_cap: f64 },

    #[error("bisection did not reach tolerance {eps} within {iterations} iterations")]
    NoConvergence { eps: f64, iterations: u32 },

    #[error("length mismatch: {what} (expected {expected}, found {found})")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },

    #[error("policy produced dose {dose} at taper step {step}")]
    ProtocolAbort { step: usize, dose: f64, partial: Box<SimulationTrace> },

    #[error("no feasible schedule on the dose grid")]
    NoFeasibleSchedule,

    #[error("search space of {states} states exceeds the cap of {cap}")]
    SearchTooLarge { states: f64, cap: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
