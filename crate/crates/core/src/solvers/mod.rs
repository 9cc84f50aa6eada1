//! Solvers for `min_{x >= 0} ||M x - b||^2 + lambda * TV(x)`:
//! scaled gradient projection ([`sgp`]), lagged-diffusivity fixed point
//! ([`fp`]) and Chambolle-Pock ([`cp`]).
//!
//! Every solver records one [`IterationRecord`] per iteration plus one for
//! the starting point, and reports each iterate to an optional observer so
//! callers can save checkpoints while the run progresses.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::operator::LinearOperator;
use crate::volume::Volume;

pub mod cp;
pub mod fp;
mod problem;
pub mod sgp;

pub use cp::{cp_reconstruct, cp_reconstruct_with, CpOptions, ProxVariant};
pub use fp::{cg_solve, fp_reconstruct, fp_reconstruct_with, CgOutcome, FpOptions};
pub use problem::{
    check_stop, initial_volume, lambda_schedule, objective, objective_gradient, scheduled_lambda, Initialization,
    LambdaMode, LambdaTv, Problem,
};
pub use sgp::{bb_steplength, scaling_entries, sgp_reconstruct, sgp_reconstruct_with, SgpOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("objective became non-finite at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("line search failed after {shrinks} reductions at iteration {iteration}")]
    LineSearchFailed { iteration: usize, shrinks: usize },
    #[error("operator norm estimate {0} is not positive")]
    DegenerateOperator(f64),
}

/// One row of the iteration history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Iteration count. For the fixed-point solver this is the work count
    /// (outer plus inner CG iterations).
    pub iter: usize,
    /// `LS + lambda * TV_beta` with the lambda that produced this iterate.
    pub objective: f64,
    pub ls: f64,
    /// Unsmoothed total variation.
    pub tv: f64,
    pub lambda: f64,
    /// Step length (SGP `alpha`, CP `tau`, FP 1).
    pub alpha: f64,
    pub backtracks: usize,
    /// Chambolle-Pock only: largest per-voxel norm of the dual TV variable.
    #[serde(skip)]
    pub max_dual_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIter,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::MaxIter => "max_iter",
        })
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub volume: Volume,
    pub history: Vec<IterationRecord>,
    pub termination: Termination,
    /// Non-fatal events (CG breakdowns, lambda fallbacks).
    pub diagnostics: Vec<String>,
}

impl ReconstructionResult {
    pub fn iterations(&self) -> usize {
        self.history.len() - 1
    }

    pub fn final_objective(&self) -> f64 {
        self.history.last().map(|r| r.objective).unwrap_or(f64::NAN)
    }

    /// History as CSV (`iter,f,LS,TV,lambda,alpha,backtracks`) followed by a
    /// `# termination_reason=...` footer line.
    pub fn write_history_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        write_history_csv(&self.history, &self.termination.to_string(), out)
    }
}

/// Writes `history` in the format of [`ReconstructionResult::write_history_csv`]
/// with an arbitrary termination reason.
pub fn write_history_csv<W: Write>(history: &[IterationRecord], reason: &str, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "f", "LS", "TV", "lambda", "alpha", "backtracks"])?;
    for r in history {
        w.write_record([
            r.iter.to_string(),
            format!("{:e}", r.objective),
            format!("{:e}", r.ls),
            format!("{:e}", r.tv),
            format!("{:e}", r.lambda),
            format!("{:e}", r.alpha),
            r.backtracks.to_string(),
        ])?;
    }
    let mut inner = w.into_inner().map_err(|e| e.into_error())?;
    writeln!(inner, "# termination_reason={reason}")?;
    Ok(())
}

/// Receives every recorded iterate. For FP the iterate passed is already
/// projected onto `x >= 0`.
pub type Observer<'o> = dyn FnMut(&IterationRecord, &[f64]) + 'o;

pub(crate) fn noop_observer() -> impl FnMut(&IterationRecord, &[f64]) {
    |_, _| {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Sgp,
    Fp,
    Cp,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Sgp => "sgp",
            SolverKind::Fp => "fp",
            SolverKind::Cp => "cp",
        }
    }

    /// Default fixed lambda for this solver.
    pub fn default_lambda(self) -> f64 {
        match self {
            SolverKind::Sgp | SolverKind::Cp => 0.005,
            SolverKind::Fp => 0.001,
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgp" => Ok(SolverKind::Sgp),
            "fp" => Ok(SolverKind::Fp),
            "cp" => Ok(SolverKind::Cp),
            other => Err(format!("unknown solver '{other}' (expected sgp, fp or cp)")),
        }
    }
}

/// Options for any of the three solvers.
#[derive(Clone, Debug, PartialEq)]
pub enum SolverOptions {
    Sgp(SgpOptions),
    Fp(FpOptions),
    Cp(CpOptions),
}

impl SolverOptions {
    pub fn kind(&self) -> SolverKind {
        match self {
            SolverOptions::Sgp(_) => SolverKind::Sgp,
            SolverOptions::Fp(_) => SolverKind::Fp,
            SolverOptions::Cp(_) => SolverKind::Cp,
        }
    }
}

pub fn reconstruct_with<A: LinearOperator + ?Sized>(
    p: &Problem<'_, A>,
    opts: &SolverOptions,
    x0: &Volume,
    observer: &mut Observer<'_>,
) -> Result<ReconstructionResult, SolverError> {
    match opts {
        SolverOptions::Sgp(o) => sgp_reconstruct_with(p, o, x0, observer),
        SolverOptions::Fp(o) => fp_reconstruct_with(p, o, x0, observer),
        SolverOptions::Cp(o) => cp_reconstruct_with(p, o, x0, observer),
    }
}
