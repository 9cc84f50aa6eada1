//! The regularized least-squares model shared by all solvers:
//! `f(x) = ||M x - b||^2 + lambda * TV_beta(x)`, `x >= 0`.

use serde::{Deserialize, Serialize};

use crate::geometry::VoxelGrid;
use crate::operator::LinearOperator;
use crate::regularizers::{grad_tv_beta_values, tv_beta_values, tv_values, RegularizerConfig};
use crate::volume::{vecops, Volume};

use super::SolverError;

/// Which total variation enters the automatic `lambda_1 = sqrt(LS) / TV`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaTv {
    #[default]
    Tv,
    TvBeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaMode {
    Fixed {
        value: f64,
    },
    /// `lambda_0 = 0`, `lambda_1 = sqrt(LS(x1)) / TV(x1)`, `lambda_k = lambda_1 / k`.
    Automatic {
        #[serde(default)]
        tv: LambdaTv,
        /// Used when the first iterate has zero total variation.
        #[serde(default = "default_fallback")]
        fallback: f64,
    },
}

fn default_fallback() -> f64 {
    0.005
}

impl LambdaMode {
    pub fn fixed(value: f64) -> Self {
        LambdaMode::Fixed { value }
    }

    pub fn automatic() -> Self {
        LambdaMode::Automatic { tv: LambdaTv::Tv, fallback: default_fallback() }
    }
}

/// Data, operator and regularization of one reconstruction.
pub struct Problem<'a, A: LinearOperator + ?Sized> {
    pub op: &'a A,
    pub grid: VoxelGrid,
    pub data: &'a [f64],
    pub reg: RegularizerConfig,
    pub lambda: LambdaMode,
}

impl<'a, A: LinearOperator + ?Sized> Problem<'a, A> {
    pub fn new(
        op: &'a A,
        grid: VoxelGrid,
        data: &'a [f64],
        reg: RegularizerConfig,
        lambda: LambdaMode,
    ) -> Result<Self, SolverError> {
        if op.cols() != grid.n_voxels() {
            return Err(SolverError::Dimension(format!(
                "operator has {} columns, grid has {} voxels",
                op.cols(),
                grid.n_voxels()
            )));
        }
        if op.rows() != data.len() {
            return Err(SolverError::Dimension(format!(
                "operator has {} rows, data has {} values",
                op.rows(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::InvalidInput("data contains non-finite values".into()));
        }
        reg.validate().map_err(SolverError::InvalidInput)?;
        match lambda {
            LambdaMode::Fixed { value } if !(value >= 0.0 && value.is_finite()) => {
                return Err(SolverError::InvalidInput(format!("lambda must be >= 0, got {value}")));
            }
            LambdaMode::Automatic { fallback, .. } if !(fallback >= 0.0 && fallback.is_finite()) => {
                return Err(SolverError::InvalidInput(format!("lambda fallback must be >= 0, got {fallback}")));
            }
            _ => {}
        }
        Ok(Problem { op, grid, data, reg, lambda })
    }

    pub fn n(&self) -> usize {
        self.grid.n_voxels()
    }

    /// `M x - b`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r = self.op.apply_vec(x);
        for (ri, bi) in r.iter_mut().zip(self.data) {
            *ri -= bi;
        }
        r
    }

    pub fn ls(&self, x: &[f64]) -> f64 {
        vecops::norm_sq(&self.residual(x))
    }

    /// Weighted, unsmoothed TV.
    pub fn tv(&self, x: &[f64]) -> f64 {
        tv_values(&self.grid, self.reg.weights, x)
    }

    pub fn tv_beta(&self, x: &[f64]) -> f64 {
        tv_beta_values(&self.grid, &self.reg, x)
    }

    pub fn grad_tv_beta(&self, x: &[f64]) -> Vec<f64> {
        grad_tv_beta_values(&self.grid, &self.reg, x)
    }

    pub fn objective(&self, x: &[f64], lambda: f64) -> f64 {
        self.ls(x) + lambda * self.tv_beta(x)
    }

    /// `2 M^T (M x - b) + lambda * grad TV_beta(x)`.
    pub fn gradient(&self, x: &[f64], lambda: f64) -> Vec<f64> {
        let r = self.residual(x);
        let mut g = self.op.apply_transpose_vec(&r);
        g.iter_mut().for_each(|v| *v *= 2.0);
        if lambda != 0.0 {
            vecops::axpy(lambda, &self.grad_tv_beta(x), &mut g);
        }
        g
    }

    /// `lambda_1 = sqrt(LS(x1)) / TV(x1)`; `None` when `TV(x1) = 0`.
    pub fn balanced_lambda(&self, x1: &[f64], ls_x1: f64, which: LambdaTv) -> Option<f64> {
        let tv = match which {
            LambdaTv::Tv => self.tv(x1),
            LambdaTv::TvBeta => self.tv_beta(x1),
        };
        (tv > 0.0).then(|| ls_x1.sqrt() / tv)
    }

    pub(crate) fn check_x0(&self, x0: &Volume) -> Result<(), SolverError> {
        if x0.values.len() != self.n() {
            return Err(SolverError::Dimension(format!(
                "initial volume has {} values, grid has {}",
                x0.values.len(),
                self.n()
            )));
        }
        if x0.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SolverError::InvalidInput("initial volume must be finite and non-negative".into()));
        }
        Ok(())
    }
}

pub fn objective<A: LinearOperator + ?Sized>(x: &Volume, p: &Problem<'_, A>, lambda: f64) -> f64 {
    p.objective(&x.values, lambda)
}

pub fn objective_gradient<A: LinearOperator + ?Sized>(x: &Volume, p: &Problem<'_, A>, lambda: f64) -> Volume {
    Volume::from_values(x.grid, p.gradient(&x.values, lambda))
}

/// `lambda_k` of the automatic schedule given the first iterate `x1`.
pub fn lambda_schedule<A: LinearOperator + ?Sized>(
    k: usize,
    x1: &Volume,
    p: &Problem<'_, A>,
) -> Result<f64, SolverError> {
    if k == 0 {
        return Ok(0.0);
    }
    let which = match p.lambda {
        LambdaMode::Automatic { tv, .. } => tv,
        LambdaMode::Fixed { .. } => LambdaTv::Tv,
    };
    let ls = p.ls(&x1.values);
    let l1 = p
        .balanced_lambda(&x1.values, ls, which)
        .ok_or_else(|| SolverError::InvalidInput("first iterate has zero total variation".into()))?;
    Ok(scheduled_lambda(k, l1))
}

/// `lambda_1 / k` for `k >= 1`.
#[inline]
pub fn scheduled_lambda(k: usize, lambda_1: f64) -> f64 {
    match k {
        0 => 0.0,
        1 => lambda_1,
        _ => lambda_1 / k as f64,
    }
}

/// Tracks the regularization weight along the iterations.
#[derive(Clone, Debug)]
pub(crate) struct LambdaTracker {
    mode: LambdaMode,
    lambda_1: Option<f64>,
}

impl LambdaTracker {
    pub fn new(mode: LambdaMode) -> Self {
        LambdaTracker { mode, lambda_1: None }
    }

    pub fn is_automatic(&self) -> bool {
        matches!(self.mode, LambdaMode::Automatic { .. })
    }

    /// Weight used to compute `x^{k+1}` from `x^k`.
    pub fn at(&self, k: usize) -> f64 {
        match self.mode {
            LambdaMode::Fixed { value } => value,
            LambdaMode::Automatic { fallback, .. } => match k {
                0 => 0.0,
                _ => scheduled_lambda(k, self.lambda_1.unwrap_or(fallback)),
            },
        }
    }

    /// Called with `x^(1)`; fixes `lambda_1`.
    pub fn observe_first_iterate<A: LinearOperator + ?Sized>(&mut self, p: &Problem<'_, A>, x1: &[f64], ls_x1: f64) {
        if let LambdaMode::Automatic { tv, fallback } = self.mode {
            if self.lambda_1.is_none() {
                let l1 = p.balanced_lambda(x1, ls_x1, tv).unwrap_or_else(|| {
                    log::warn!("first iterate has zero total variation; using fixed lambda {fallback}");
                    fallback
                });
                self.lambda_1 = Some(l1);
            }
        }
    }
}

/// Relative-change stopping rule `|f_k - f_prev| / |f_k| < tol`; `f_k = 0` counts as converged.
pub fn check_stop(f_k: f64, f_prev: f64, tol: f64) -> bool {
    if f_k == 0.0 {
        return true;
    }
    (f_k - f_prev).abs() / f_k.abs() < tol
}

/// How the starting volume is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    Zeros,
    /// `c * P+(M^T b)` with `c` the least-squares optimal scale.
    #[default]
    Backprojection,
}

pub fn initial_volume<A: LinearOperator + ?Sized>(p: &Problem<'_, A>, init: Initialization) -> Volume {
    match init {
        Initialization::Zeros => Volume::zeros(p.grid),
        Initialization::Backprojection => {
            let mut z = p.op.apply_transpose_vec(p.data);
            z.iter_mut().for_each(|v| *v = v.max(0.0));
            let mz = p.op.apply_vec(&z);
            let den = vecops::norm_sq(&mz);
            let c = if den > 0.0 { vecops::dot(&mz, p.data) / den } else { 0.0 };
            let c = if c.is_finite() && c > 0.0 { c } else { 0.0 };
            z.iter_mut().for_each(|v| *v *= c);
            Volume::from_values(p.grid, z)
        }
    }
}
