//! Lagged-diffusivity fixed point. Each outer step freezes the TV
//! diffusivity at the current iterate and takes a truncated CG step on
//!
//! `(M^T M + (lambda / 2) L(x^k)) d = -g / 2`,
//!
//! i.e. a Newton-like step for `f / 2`, whose matrix is SPD for `lambda > 0`
//! and whose fixed points are the stationary points of `f`. Iterates are
//! not projected; only the returned volume (and every reported iterate) is
//! clipped to `x >= 0`.

use serde::{Deserialize, Serialize};

use crate::operator::LinearOperator;
use crate::regularizers::DiffusionOperator;
use crate::volume::{vecops, Volume};

use super::problem::LambdaTracker;
use super::{
    check_stop, noop_observer, IterationRecord, Observer, Problem, ReconstructionResult, SolverError, Termination,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpOptions {
    pub outer_iter: usize,
    pub cg_iter: usize,
    pub tol: f64,
}

impl Default for FpOptions {
    fn default() -> Self {
        FpOptions { outer_iter: 100, cg_iter: 4, tol: 1e-6 }
    }
}

impl FpOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.cg_iter == 0 {
            return Err(SolverError::InvalidInput("fp.cg_iter must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(SolverError::InvalidInput(format!("fp.tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }

    /// Work of one outer iteration: the gradient evaluation plus the CG steps.
    pub fn work_per_outer(&self) -> usize {
        self.cg_iter + 1
    }

    /// Total iteration budget counted as outer plus inner iterations.
    pub fn budget(&self, outer: usize) -> usize {
        outer * self.work_per_outer()
    }

    /// Outer iterations that fit in an iteration budget (at least one).
    pub fn outer_for_budget(&self, budget: usize) -> usize {
        (budget / self.work_per_outer()).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Set when `p^T H p <= 0` stopped the iteration.
    pub breakdown: bool,
}

/// Conjugate gradients from a zero start for `H x = rhs`, at most `iters`
/// iterations. `apply_h(v, out)` writes `H v`; `H` is never formed.
/// Stops early once `||r|| <= 1e-12 ||rhs||`.
pub fn cg_solve(mut apply_h: impl FnMut(&[f64], &mut [f64]), rhs: &[f64], iters: usize) -> CgOutcome {
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut hp = vec![0.0; n];
    let mut rr = vecops::norm_sq(&r);
    let stop = 1e-24 * rr;
    let mut done = 0;
    if rr == 0.0 {
        return CgOutcome { x, iterations: 0, breakdown: false };
    }
    for _ in 0..iters {
        apply_h(&p, &mut hp);
        let php = vecops::dot(&p, &hp);
        if !(php > 0.0) {
            return CgOutcome { x, iterations: done, breakdown: true };
        }
        let a = rr / php;
        vecops::axpy(a, &p, &mut x);
        vecops::axpy(-a, &hp, &mut r);
        done += 1;
        let rr_new = vecops::norm_sq(&r);
        if rr_new <= stop {
            break;
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    CgOutcome { x, iterations: done, breakdown: false }
}

/// Applies `H v = M^T M v + (lambda / 2) L v`.
pub(crate) struct FpSystem<'p, 'a, A: LinearOperator + ?Sized> {
    p: &'p Problem<'a, A>,
    diffusion: DiffusionOperator,
    half_lambda: f64,
    proj: Vec<f64>,
    lv: Vec<f64>,
}

impl<'p, 'a, A: LinearOperator + ?Sized> FpSystem<'p, 'a, A> {
    pub fn new(p: &'p Problem<'a, A>, x_lag: &[f64], lambda: f64) -> Self {
        FpSystem {
            p,
            diffusion: DiffusionOperator::new(&p.grid, &p.reg, x_lag),
            half_lambda: 0.5 * lambda,
            proj: vec![0.0; p.op.rows()],
            lv: vec![0.0; p.n()],
        }
    }

    pub fn apply(&mut self, v: &[f64], out: &mut [f64]) {
        self.p.op.apply(v, &mut self.proj);
        self.p.op.apply_transpose(&self.proj, out);
        if self.half_lambda != 0.0 {
            self.diffusion.apply_into(v, &mut self.lv);
            vecops::axpy(self.half_lambda, &self.lv, out);
        }
    }
}

/// Matrix of the inner system at `x_lag`, exposed for structural checks.
pub fn fp_system_apply<A: LinearOperator + ?Sized>(
    p: &Problem<'_, A>,
    x_lag: &[f64],
    lambda: f64,
    v: &[f64],
) -> Vec<f64> {
    let mut sys = FpSystem::new(p, x_lag, lambda);
    let mut out = vec![0.0; v.len()];
    sys.apply(v, &mut out);
    out
}

pub fn fp_reconstruct<A: LinearOperator + ?Sized>(
    p: &Problem<'_, A>,
    opts: &FpOptions,
    x0: &Volume,
) -> Result<ReconstructionResult, SolverError> {
    fp_reconstruct_with(p, opts, x0, &mut noop_observer())
}

pub fn fp_reconstruct_with<A: LinearOperator + ?Sized>(
    p: &Problem<'_, A>,
    opts: &FpOptions,
    x0: &Volume,
    observer: &mut Observer<'_>,
) -> Result<ReconstructionResult, SolverError> {
    opts.validate()?;
    p.check_x0(x0)?;
    let mut lambdas = LambdaTracker::new(p.lambda);
    let mut diagnostics = Vec::new();

    let mut x = x0.values.clone();
    let mut r = p.residual(&x);
    let mut ls = vecops::norm_sq(&r);
    let lambda0 = lambdas.at(0);
    let mut f = ls + lambda0 * p.tv_beta(&x);
    if !f.is_finite() {
        return Err(SolverError::NonFinite { iteration: 0 });
    }
    let mut history = vec![IterationRecord {
        iter: 0,
        objective: f,
        ls,
        tv: p.tv(&x),
        lambda: lambda0,
        alpha: 1.0,
        backtracks: 0,
        max_dual_norm: None,
    }];
    observer(&history[0], &x);

    let mut termination = Termination::MaxIter;
    for k in 0..opts.outer_iter {
        let lambda = lambdas.at(k);
        // -g / 2 = -(M^T r + (lambda / 2) grad TV_beta)
        let mut rhs = p.op.apply_transpose_vec(&r);
        if lambda != 0.0 {
            vecops::axpy(0.5 * lambda, &p.grad_tv_beta(&x), &mut rhs);
        }
        rhs.iter_mut().for_each(|v| *v = -*v);

        let mut sys = FpSystem::new(p, &x, lambda);
        let cg = cg_solve(|v, out| sys.apply(v, out), &rhs, opts.cg_iter);
        if cg.breakdown {
            let msg = format!(
                "outer iteration {k}: CG breakdown after {} steps (system not positive definite; lambda = {lambda})",
                cg.iterations
            );
            log::warn!("{msg}");
            diagnostics.push(msg);
        }
        vecops::axpy(1.0, &cg.x, &mut x);

        let f_old = f;
        r = p.residual(&x);
        ls = vecops::norm_sq(&r);
        f = ls + lambda * p.tv_beta(&x);
        if !f.is_finite() {
            return Err(SolverError::NonFinite { iteration: opts.budget(k + 1) });
        }
        if k == 0 && lambdas.is_automatic() {
            lambdas.observe_first_iterate(p, &x, ls);
        }

        let record = IterationRecord {
            iter: opts.budget(k + 1),
            objective: f,
            ls,
            tv: p.tv(&x),
            lambda,
            alpha: 1.0,
            backtracks: 0,
            max_dual_norm: None,
        };
        let projected: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
        observer(&record, &projected);
        history.push(record);

        if check_stop(f, f_old, opts.tol) {
            termination = Termination::Converged;
            break;
        }
    }

    let mut volume = Volume::from_values(p.grid, x);
    volume.clamp_nonnegative();
    Ok(ReconstructionResult { volume, history, termination, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_apply(h: &[Vec<f64>]) -> impl FnMut(&[f64], &mut [f64]) + '_ {
        move |v, out| {
            for (o, row) in out.iter_mut().zip(h) {
                *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
            }
        }
    }

    #[test]
    fn cg_identity_one_step() {
        let rhs = vec![1.0, -2.0, 3.5];
        let out = cg_solve(|v, o| o.copy_from_slice(v), &rhs, 5);
        assert_eq!(out.iterations, 1);
        assert_eq!(out.x, rhs);
    }

    #[test]
    fn cg_two_by_two() {
        let h = vec![vec![4.0, 1.0], vec![1.0, 3.0]];
        let out = cg_solve(dense_apply(&h), &[1.0, 2.0], 2);
        assert!((out.x[0] - 1.0 / 11.0).abs() < 1e-14);
        assert!((out.x[1] - 7.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn cg_reports_breakdown() {
        let h = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
        let out = cg_solve(dense_apply(&h), &[0.0, 1.0], 3);
        assert!(out.breakdown);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn budget_accounting() {
        let o = FpOptions { outer_iter: 3, cg_iter: 4, tol: 0.0 };
        assert_eq!(o.budget(3), 15);
        assert_eq!(o.outer_for_budget(5), 1);
        assert_eq!(o.outer_for_budget(15), 3);
        assert_eq!(o.outer_for_budget(30), 6);
        assert_eq!(o.outer_for_budget(2), 1);
    }
}
