//! Chambolle-Pock primal-dual iteration for
//! `min_x F(K x) + G(x)` with `K = [M; grad_x; grad_y; grad_z]`,
//! `F(K x) = ||M x - b||^2 + lambda * TV(x)` and `G` the indicator of `x >= 0`.
//!
//! Step sizes are `tau = sigma = 1 / Gamma` with `Gamma` a power-method
//! estimate of `||K||_2`. Dual variables and the extrapolated point start at
//! zero.

use serde::{Deserialize, Serialize};

use crate::operator::LinearOperator;
use crate::regularizers::{gradient_adjoint_into, gradient_into, stacked_operator_norm, GradientField};
use crate::volume::{vecops, Volume};

use super::problem::LambdaTracker;
use super::{
    check_stop, noop_observer, IterationRecord, Observer, Problem, ReconstructionResult, SolverError, Termination,
};

/// Data-term dual update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxVariant {
    /// Exact proximal map of the conjugate of `||. - b||^2`:
    /// `y = (y + sigma (M xbar - b)) / (1 + sigma / 2)`.
    #[default]
    LeastSquaresConsistent,
    /// `ybar = y + sigma (M xbar - b)`, `y = max(||ybar|| - sigma eps, 0) ybar / ||ybar||`.
    BallShrink,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpOptions {
    /// Extrapolation weight in `[0, 1]`.
    pub theta: f64,
    /// Shrinkage radius of the `ball-shrink` dual update.
    pub epsilon: f64,
    pub power_iters: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub prox_variant: ProxVariant,
}

impl Default for CpOptions {
    fn default() -> Self {
        CpOptions {
            theta: 1.0,
            epsilon: 0.0,
            power_iters: 2,
            max_iter: 500,
            tol: 1e-6,
            prox_variant: ProxVariant::LeastSquaresConsistent,
        }
    }
}

impl CpOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(SolverError::InvalidInput(format!("cp.theta must be in [0, 1], got {}", self.theta)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(SolverError::InvalidInput(format!("cp.epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.power_iters == 0 {
            return Err(SolverError::InvalidInput("cp.power_iters must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(SolverError::InvalidInput(format!("cp.tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// `Gamma`, `tau`, `sigma` for a problem.
pub fn cp_steps<A: LinearOperator + ?Sized>(
    p: &Problem<'_, A>,
    power_iters: usize,
) -> Result<(f64, f64, f64), SolverError> {
    let gamma = stacked_operator_norm(p.op, &p.grid, p.reg.weights, power_iters);
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(SolverError::DegenerateOperator(gamma));
    }
    let step = 1.0 / gamma;
    Ok((gamma, step, step))
}

pub fn cp_reconstruct<A: LinearOperator + ?Sized>(
    p: &Problem<'_, A>,
    opts: &CpOptions,
    x0: &Volume,
) -> Result<ReconstructionResult, SolverError> {
    cp_reconstruct_with(p, opts, x0, &mut noop_observer())
}

pub fn cp_reconstruct_with<A: LinearOperator + ?Sized>(
    p: &Problem<'_, A>,
    opts: &CpOptions,
    x0: &Volume,
    observer: &mut Observer<'_>,
) -> Result<ReconstructionResult, SolverError> {
    opts.validate()?;
    p.check_x0(x0)?;
    let (_, tau, sigma) = cp_steps(p, opts.power_iters)?;
    let n = p.n();
    let m = p.op.rows();
    let w_axes = p.reg.weights;
    let mut lambdas = LambdaTracker::new(p.lambda);

    let mut x = x0.values.clone();
    let mut mx = p.op.apply_vec(&x);
    let mut xbar = vec![0.0; n];
    let mut mxbar = vec![0.0; m];
    let mut y = vec![0.0; m];
    let mut w = GradientField::zeros(p.grid);
    let mut grad_xbar = GradientField::zeros(p.grid);
    let mut mty = vec![0.0; n];
    let mut div_w = vec![0.0; n];

    let eval = |x: &[f64], mx: &[f64], lambda: f64| {
        let ls: f64 = mx.iter().zip(p.data).map(|(a, b)| (a - b) * (a - b)).sum();
        (ls + lambda * p.tv_beta(x), ls)
    };

    let lambda0 = lambdas.at(0);
    let (mut f, ls0) = eval(&x, &mx, lambda0);
    if !f.is_finite() {
        return Err(SolverError::NonFinite { iteration: 0 });
    }
    let mut history = vec![IterationRecord {
        iter: 0,
        objective: f,
        ls: ls0,
        tv: p.tv(&x),
        lambda: lambda0,
        alpha: tau,
        backtracks: 0,
        max_dual_norm: Some(0.0),
    }];
    observer(&history[0], &x);

    let mut termination = Termination::MaxIter;
    for k in 0..opts.max_iter {
        let lambda = lambdas.at(k);

        // Data block of the dual update.
        for ((yi, mxi), bi) in y.iter_mut().zip(&mxbar).zip(p.data) {
            *yi += sigma * (mxi - bi);
        }
        match opts.prox_variant {
            ProxVariant::LeastSquaresConsistent => {
                let s = 1.0 / (1.0 + 0.5 * sigma);
                y.iter_mut().for_each(|v| *v *= s);
            }
            ProxVariant::BallShrink => {
                let norm = vecops::norm(&y);
                let s = if norm > 0.0 { (norm - sigma * opts.epsilon).max(0.0) / norm } else { 0.0 };
                y.iter_mut().for_each(|v| *v *= s);
            }
        }

        // TV block: ascent then pointwise projection onto the lambda ball.
        gradient_into(&p.grid, w_axes, &xbar, &mut grad_xbar);
        let mut max_dual = 0.0f64;
        for i in 0..n {
            let gx = w.gx[i] + sigma * grad_xbar.gx[i];
            let gy = w.gy[i] + sigma * grad_xbar.gy[i];
            let gz = w.gz[i] + sigma * grad_xbar.gz[i];
            let mag = (gx * gx + gy * gy + gz * gz).sqrt();
            let s = if lambda <= 0.0 {
                0.0
            } else if mag > lambda {
                lambda / mag
            } else {
                1.0
            };
            w.gx[i] = gx * s;
            w.gy[i] = gy * s;
            w.gz[i] = gz * s;
            max_dual = max_dual.max(w.magnitude(i));
        }

        // Primal descent, projection onto x >= 0, extrapolation.
        p.op.apply_transpose(&y, &mut mty);
        gradient_adjoint_into(&p.grid, w_axes, &w, &mut div_w);
        let x_old = x.clone();
        let mx_old = std::mem::take(&mut mx);
        for i in 0..n {
            x[i] = (x[i] - tau * (mty[i] + div_w[i])).max(0.0);
        }
        mx = p.op.apply_vec(&x);
        for i in 0..n {
            xbar[i] = x[i] + opts.theta * (x[i] - x_old[i]);
        }
        for j in 0..m {
            mxbar[j] = mx[j] + opts.theta * (mx[j] - mx_old[j]);
        }

        if k == 0 && lambdas.is_automatic() {
            let ls1: f64 = mx.iter().zip(p.data).map(|(a, b)| (a - b) * (a - b)).sum();
            lambdas.observe_first_iterate(p, &x, ls1);
        }

        let f_old = f;
        let (f_new, ls) = eval(&x, &mx, lambda);
        if !f_new.is_finite() {
            return Err(SolverError::NonFinite { iteration: k + 1 });
        }
        f = f_new;
        let record = IterationRecord {
            iter: k + 1,
            objective: f,
            ls,
            tv: p.tv(&x),
            lambda,
            alpha: tau,
            backtracks: 0,
            max_dual_norm: Some(max_dual),
        };
        observer(&record, &x);
        history.push(record);

        if check_stop(f, f_old, opts.tol) {
            termination = Termination::Converged;
            break;
        }
    }

    Ok(ReconstructionResult { volume: Volume::from_values(p.grid, x), history, termination, diagnostics: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn option_validation() {
        assert!(CpOptions::default().validate().is_ok());
        let o = CpOptions { theta: 1.5, ..Default::default() };
        assert!(o.validate().is_err());
        let o = CpOptions { power_iters: 0, ..Default::default() };
        assert!(o.validate().is_err());
    }
}
