//! Scaled gradient projection with alternating Barzilai-Borwein steps and
//! Armijo backtracking along the projected direction.

use serde::{Deserialize, Serialize};

use crate::operator::LinearOperator;
use crate::volume::{vecops, Volume};

use super::problem::LambdaTracker;
use super::{
    check_stop, noop_observer, IterationRecord, Observer, Problem, ReconstructionResult, SolverError, Termination,
};

/// Backtracking gives up after this many reductions.
const MAX_BACKTRACKS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgpOptions {
    /// Backtracking reduction factor.
    pub gamma: f64,
    /// Armijo sufficient-decrease factor.
    pub sigma: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// First step is `alpha0_scale / ||g^0||_inf`.
    pub alpha0_scale: f64,
    /// Scaling bounds `rho_k = sqrt(1 + rho_c / k^2)`.
    pub rho_c: f64,
    /// Use BB2 when `BB2 / BB1` falls below this ratio, BB1 otherwise.
    pub bb_switch: f64,
    /// Disable to run plain gradient projection (`S_k = I`).
    pub scaling: bool,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SgpOptions {
    fn default() -> Self {
        SgpOptions {
            gamma: 0.4,
            sigma: 1e-4,
            alpha_min: 1e-8,
            alpha_max: 1e3,
            alpha0_scale: 1.3,
            rho_c: 1e8,
            bb_switch: 0.5,
            scaling: true,
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

impl SgpOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::InvalidInput(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("sgp.gamma must be in (0, 1), got {}", self.gamma));
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return bad(format!("sgp.sigma must be in (0, 1), got {}", self.sigma));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha_max && self.alpha_max.is_finite()) {
            return bad(format!(
                "sgp step bounds must satisfy 0 < alpha_min <= alpha_max, got [{}, {}]",
                self.alpha_min, self.alpha_max
            ));
        }
        if !(self.alpha0_scale > 0.0) || !(self.rho_c > 0.0) || !(self.bb_switch > 0.0) {
            return bad("sgp.alpha0_scale, rho_c and bb_switch must be positive".into());
        }
        if !(self.tol >= 0.0) {
            return bad(format!("sgp.tol must be >= 0, got {}", self.tol));
        }
        Ok(())
    }

    /// Scaling bound for iteration `k`; always `> 1` and decreasing toward 1.
    pub fn rho(&self, k: usize) -> f64 {
        let k = k.max(1) as f64;
        (1.0 + self.rho_c / (k * k)).sqrt()
    }
}

/// Diagonal of the scaling matrix from the gradient splitting
/// `grad f = V - U`: `s_j = clip(x_j / V_j, 1/rho, rho)`.
///
/// `v` must already be positive (see [`split_positive_part`]).
pub fn scaling_entries(x: &[f64], v: &[f64], rho: f64) -> Vec<f64> {
    debug_assert!(rho > 1.0);
    let (lo, hi) = (1.0 / rho, rho);
    x.iter().zip(v).map(|(&xj, &vj)| (xj / vj).clamp(lo, hi)).collect()
}

/// Positive part `V` of the gradient splitting:
/// `V = 2 M^T M x + (lambda grad TV_beta)_+ + floor`.
fn split_positive_part(mtmx2: &[f64], lambda_grad_tv: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = mtmx2.iter().zip(lambda_grad_tv).map(|(&a, &t)| a.max(0.0) + t.max(0.0)).collect();
    let floor = (1e-10 * vecops::norm_inf(&raw)).max(f64::MIN_POSITIVE);
    raw.into_iter().map(|v| v + floor).collect()
}

/// Initial step `alpha0_scale / ||g||_inf`, clamped to the step bounds.
pub fn initial_steplength(g: &[f64], opts: &SgpOptions) -> f64 {
    let gi = vecops::norm_inf(g);
    let a = if gi > 0.0 { opts.alpha0_scale / gi } else { opts.alpha_max };
    a.clamp(opts.alpha_min, opts.alpha_max)
}

/// Scaled Barzilai-Borwein step for `s = x^k - x^{k-1}`, `y = g^k - g^{k-1}`
/// and scaling diagonal `scaling`:
///
/// * BB1 = `<S^-1 s, S^-1 s> / <S^-1 s, y>`
/// * BB2 = `<S y, s> / <S y, S y>`
///
/// each clamped to `[alpha_min, alpha_max]` (non-positive curvature gives
/// `alpha_max`); BB2 is taken when `BB2 / BB1 < bb_switch`.
pub fn bb_steplength(s: &[f64], y: &[f64], scaling: &[f64], opts: &SgpOptions) -> f64 {
    let (mut s_inv_s, mut s_inv_y, mut sy_s, mut sy_sy) = (0.0, 0.0, 0.0, 0.0);
    for ((&si, &yi), &d) in s.iter().zip(y).zip(scaling) {
        let a = si / d;
        s_inv_s += a * a;
        s_inv_y += a * yi;
        let b = d * yi;
        sy_s += b * si;
        sy_sy += b * b;
    }
    let clamp = |v: f64| v.clamp(opts.alpha_min, opts.alpha_max);
    let bb1 = if s_inv_y > 0.0 { clamp(s_inv_s / s_inv_y) } else { opts.alpha_max };
    let bb2 = if sy_s > 0.0 && sy_sy > 0.0 { clamp(sy_s / sy_sy) } else { opts.alpha_max };
    if bb2 / bb1 < opts.bb_switch {
        bb2
    } else {
        bb1
    }
}

pub fn sgp_reconstruct<A: LinearOperator + ?Sized>(
    p: &Problem<'_, A>,
    opts: &SgpOptions,
    x0: &Volume,
) -> Result<ReconstructionResult, SolverError> {
    sgp_reconstruct_with(p, opts, x0, &mut noop_observer())
}

pub fn sgp_reconstruct_with<A: LinearOperator + ?Sized>(
    p: &Problem<'_, A>,
    opts: &SgpOptions,
    x0: &Volume,
    observer: &mut Observer<'_>,
) -> Result<ReconstructionResult, SolverError> {
    opts.validate()?;
    p.check_x0(x0)?;
    let n = p.n();
    let mut lambdas = LambdaTracker::new(p.lambda);
    let mut diagnostics = Vec::new();

    let mtb = p.op.apply_transpose_vec(p.data);
    let mut x = x0.values.clone();
    let mut r = p.residual(&x);
    let mut ls = vecops::norm_sq(&r);
    let mut mtr = p.op.apply_transpose_vec(&r);
    let mut gtv = p.grad_tv_beta(&x);
    let mut tvb = p.tv_beta(&x);

    let mut lambda = lambdas.at(0);
    let mut f = ls + lambda * tvb;
    if !f.is_finite() {
        return Err(SolverError::NonFinite { iteration: 0 });
    }
    let mut history = vec![IterationRecord {
        iter: 0,
        objective: f,
        ls,
        tv: p.tv(&x),
        lambda,
        alpha: f64::NAN,
        backtracks: 0,
        max_dual_norm: None,
    }];
    observer(&history[0], &x);

    let mut secant: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut termination = Termination::MaxIter;
    let mut g = vec![0.0; n];
    let mut xt = vec![0.0; n];

    for k in 0..opts.max_iter {
        let lambda_k = lambdas.at(k);
        if lambda_k != lambda {
            lambda = lambda_k;
            f = ls + lambda * tvb;
        }
        for j in 0..n {
            g[j] = 2.0 * mtr[j] + lambda * gtv[j];
        }

        let scaling = if opts.scaling {
            let mtmx2: Vec<f64> = mtr.iter().zip(&mtb).map(|(a, b)| 2.0 * (a + b)).collect();
            let tvpart: Vec<f64> = gtv.iter().map(|t| lambda * t).collect();
            let v = split_positive_part(&mtmx2, &tvpart);
            scaling_entries(&x, &v, opts.rho(k))
        } else {
            vec![1.0; n]
        };

        let alpha = match &secant {
            None => initial_steplength(&g, opts),
            Some((s, y)) => bb_steplength(s, y, &scaling, opts),
        };

        let d: Vec<f64> = (0..n).map(|j| (x[j] - alpha * scaling[j] * g[j]).max(0.0) - x[j]).collect();
        let gd = vecops::dot(&g, &d);
        if vecops::norm_inf(&d) == 0.0 || gd >= 0.0 {
            // x is stationary for the projected scaled step.
            if gd > 0.0 {
                diagnostics.push(format!("iteration {k}: projected direction is not a descent direction"));
            }
            termination = Termination::Converged;
            break;
        }
        let md = p.op.apply_vec(&d);

        let mut eta = 1.0;
        let mut backtracks = 0;
        let (f_new, ls_new, tvb_new, r_new) = loop {
            for j in 0..n {
                xt[j] = x[j] + eta * d[j];
            }
            let rt: Vec<f64> = r.iter().zip(&md).map(|(a, b)| a + eta * b).collect();
            let ls_t = vecops::norm_sq(&rt);
            let tvb_t = p.tv_beta(&xt);
            let f_t = ls_t + lambda * tvb_t;
            if !f_t.is_finite() {
                return Err(SolverError::NonFinite { iteration: k + 1 });
            }
            if f_t <= f + opts.sigma * eta * gd {
                break (f_t, ls_t, tvb_t, rt);
            }
            backtracks += 1;
            if backtracks > MAX_BACKTRACKS {
                return Err(SolverError::LineSearchFailed { iteration: k, shrinks: backtracks - 1 });
            }
            eta *= opts.gamma;
        };

        let f_old = f;
        let step: Vec<f64> = vecops::sub(&xt, &x);
        x.copy_from_slice(&xt);
        r = r_new;
        ls = ls_new;
        tvb = tvb_new;
        f = f_new;
        mtr = p.op.apply_transpose_vec(&r);
        gtv = p.grad_tv_beta(&x);

        if k == 0 && lambdas.is_automatic() {
            lambdas.observe_first_iterate(p, &x, ls);
        }

        // Secant pair for the next BB step, both gradients taken with lambda_k.
        let dg: Vec<f64> = (0..n).map(|j| 2.0 * mtr[j] + lambda * gtv[j] - g[j]).collect();
        secant = Some((step, dg));

        let record = IterationRecord {
            iter: k + 1,
            objective: f,
            ls,
            tv: p.tv(&x),
            lambda,
            alpha,
            backtracks,
            max_dual_norm: None,
        };
        observer(&record, &x);
        history.push(record);

        if check_stop(f, f_old, opts.tol) {
            termination = Termination::Converged;
            break;
        }
    }

    Ok(ReconstructionResult { volume: Volume::from_values(p.grid, x), history, termination, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_clips() {
        assert_eq!(scaling_entries(&[1.0], &[2.0], 10.0), vec![0.5]);
        assert_eq!(scaling_entries(&[100.0], &[1.0], 10.0), vec![10.0]);
        assert_eq!(scaling_entries(&[0.0], &[3.0], 10.0), vec![0.1]);
    }

    #[test]
    fn bb_on_hessian_two_identity() {
        let o = SgpOptions::default();
        let a = bb_steplength(&[1.0, 0.0], &[2.0, 0.0], &[1.0, 1.0], &o);
        assert!((a - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bb_clamps_and_handles_negative_curvature() {
        let o = SgpOptions { alpha_max: 10.0, ..Default::default() };
        assert_eq!(bb_steplength(&[1.0], &[1e-3], &[1.0], &o), 10.0);
        assert_eq!(bb_steplength(&[1.0], &[-1.0], &[1.0], &o), 10.0);
        let tiny = bb_steplength(&[1e-12], &[1.0], &[1.0], &o);
        assert_eq!(tiny, o.alpha_min);
    }

    #[test]
    fn rho_sequence_decreases_to_one() {
        let o = SgpOptions::default();
        let mut last = f64::INFINITY;
        for k in 1..2000 {
            let r = o.rho(k);
            assert!(r > 1.0 && r <= last);
            last = r;
        }
    }

    #[test]
    fn option_validation() {
        let o = SgpOptions { gamma: 1.0, ..Default::default() };
        assert!(o.validate().is_err());
        let o = SgpOptions { alpha_min: 2.0, alpha_max: 1.0, ..Default::default() };
        assert!(o.validate().is_err());
    }
}
