//! Total variation, its smoothed variant and the operators built on the
//! forward-difference gradient.
//!
//! Differences are taken per index step with a replicate-edge boundary: the
//! difference at the last index of an axis is zero, so constants lie in the
//! null space of the gradient. Optional per-axis weights scale each
//! difference (default `(1, 1, 1)`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::VoxelGrid;
use crate::operator::LinearOperator;
use crate::volume::{vecops, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    ReplicateEdge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub beta: f64,
    /// Multipliers for the x, y and z differences.
    pub weights: [f64; 3],
    pub boundary: Boundary,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig { beta: 0.001, weights: [1.0; 3], boundary: Boundary::ReplicateEdge }
    }
}

impl RegularizerConfig {
    pub fn with_beta(beta: f64) -> Self {
        RegularizerConfig { beta, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(format!("beta must be > 0, got {}", self.beta));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(format!("weights must be finite and >= 0, got {:?}", self.weights));
        }
        Ok(())
    }
}

/// Forward differences along x, y and z, one value per voxel each.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub grid: VoxelGrid,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub gz: Vec<f64>,
}

impl GradientField {
    pub fn zeros(grid: VoxelGrid) -> Self {
        let n = grid.n_voxels();
        GradientField { grid, gx: vec![0.0; n], gy: vec![0.0; n], gz: vec![0.0; n] }
    }

    /// Euclidean norm of the 3-vector at voxel `idx`.
    #[inline]
    pub fn magnitude(&self, idx: usize) -> f64 {
        (self.gx[idx] * self.gx[idx] + self.gy[idx] * self.gy[idx] + self.gz[idx] * self.gz[idx]).sqrt()
    }

    pub fn dot(&self, other: &GradientField) -> f64 {
        vecops::dot(&self.gx, &other.gx) + vecops::dot(&self.gy, &other.gy) + vecops::dot(&self.gz, &other.gz)
    }
}

pub(crate) fn gradient_into(grid: &VoxelGrid, w: [f64; 3], x: &[f64], g: &mut GradientField) {
    let (nx, ny, nz) = (grid.n_x, grid.n_y, grid.n_z);
    let nxy = nx * ny;
    g.gx.par_chunks_mut(nxy).zip(g.gy.par_chunks_mut(nxy)).zip(g.gz.par_chunks_mut(nxy)).enumerate().for_each(
        |(k, ((cx, cy), cz))| {
            let off = k * nxy;
            for j in 0..ny {
                for i in 0..nx {
                    let l = i + nx * j;
                    let c = x[off + l];
                    cx[l] = if i + 1 < nx { w[0] * (x[off + l + 1] - c) } else { 0.0 };
                    cy[l] = if j + 1 < ny { w[1] * (x[off + l + nx] - c) } else { 0.0 };
                    cz[l] = if k + 1 < nz { w[2] * (x[off + l + nxy] - c) } else { 0.0 };
                }
            }
        },
    );
}

/// `out = grad^T g` (negative divergence).
pub(crate) fn gradient_adjoint_into(grid: &VoxelGrid, w: [f64; 3], g: &GradientField, out: &mut [f64]) {
    let (nx, ny, nz) = (grid.n_x, grid.n_y, grid.n_z);
    let nxy = nx * ny;
    out.par_chunks_mut(nxy).enumerate().for_each(|(k, slab)| {
        let off = k * nxy;
        for j in 0..ny {
            for i in 0..nx {
                let l = i + nx * j;
                let n = off + l;
                let mut acc = 0.0;
                if i + 1 < nx {
                    acc -= g.gx[n];
                }
                if i > 0 {
                    acc += g.gx[n - 1];
                }
                let mut accy = 0.0;
                if j + 1 < ny {
                    accy -= g.gy[n];
                }
                if j > 0 {
                    accy += g.gy[n - nx];
                }
                let mut accz = 0.0;
                if k + 1 < nz {
                    accz -= g.gz[n];
                }
                if k > 0 {
                    accz += g.gz[n - nxy];
                }
                slab[l] = w[0] * acc + w[1] * accy + w[2] * accz;
            }
        }
    });
}

pub fn spatial_gradient(x: &Volume) -> GradientField {
    spatial_gradient_weighted(x, [1.0; 3])
}

pub fn spatial_gradient_weighted(x: &Volume, weights: [f64; 3]) -> GradientField {
    let mut g = GradientField::zeros(x.grid);
    gradient_into(&x.grid, weights, &x.values, &mut g);
    g
}

pub fn divergence_adjoint(g: &GradientField) -> Volume {
    divergence_adjoint_weighted(g, [1.0; 3])
}

pub fn divergence_adjoint_weighted(g: &GradientField, weights: [f64; 3]) -> Volume {
    let mut out = Volume::zeros(g.grid);
    gradient_adjoint_into(&g.grid, weights, g, &mut out.values);
    out
}

pub(crate) fn tv_values(grid: &VoxelGrid, weights: [f64; 3], x: &[f64]) -> f64 {
    let mut g = GradientField::zeros(*grid);
    gradient_into(grid, weights, x, &mut g);
    (0..x.len()).map(|i| g.magnitude(i)).sum()
}

pub(crate) fn tv_beta_values(grid: &VoxelGrid, cfg: &RegularizerConfig, x: &[f64]) -> f64 {
    let mut g = GradientField::zeros(*grid);
    gradient_into(grid, cfg.weights, x, &mut g);
    let b2 = cfg.beta * cfg.beta;
    (0..x.len()).map(|i| (g.gx[i] * g.gx[i] + g.gy[i] * g.gy[i] + g.gz[i] * g.gz[i] + b2).sqrt()).sum()
}

/// Unsmoothed total variation with unit axis weights.
pub fn tv(x: &Volume) -> f64 {
    tv_values(&x.grid, [1.0; 3], &x.values)
}

/// Total variation with the axis weights of `cfg` (beta ignored).
pub fn tv_weighted(x: &Volume, cfg: &RegularizerConfig) -> f64 {
    tv_values(&x.grid, cfg.weights, &x.values)
}

pub fn tv_beta(x: &Volume, cfg: &RegularizerConfig) -> f64 {
    tv_beta_values(&x.grid, cfg, &x.values)
}

/// Lagged diffusion operator `L(x_lag) = grad^T diag(1/sqrt(|grad x_lag|^2 + beta^2)) grad`.
///
/// The weights are computed once and reused for every product, which is
/// what the fixed-point solver needs inside its CG loop.
#[derive(Clone, Debug)]
pub struct DiffusionOperator {
    grid: VoxelGrid,
    axis_weights: [f64; 3],
    diffusivity: Vec<f64>,
}

impl DiffusionOperator {
    pub fn new(grid: &VoxelGrid, cfg: &RegularizerConfig, x_lag: &[f64]) -> Self {
        let mut g = GradientField::zeros(*grid);
        gradient_into(grid, cfg.weights, x_lag, &mut g);
        let b2 = cfg.beta * cfg.beta;
        let diffusivity = (0..x_lag.len())
            .map(|i| 1.0 / (g.gx[i] * g.gx[i] + g.gy[i] * g.gy[i] + g.gz[i] * g.gz[i] + b2).sqrt())
            .collect();
        DiffusionOperator { grid: *grid, axis_weights: cfg.weights, diffusivity }
    }

    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        let mut g = GradientField::zeros(self.grid);
        gradient_into(&self.grid, self.axis_weights, v, &mut g);
        for (i, d) in self.diffusivity.iter().enumerate() {
            g.gx[i] *= d;
            g.gy[i] *= d;
            g.gz[i] *= d;
        }
        gradient_adjoint_into(&self.grid, self.axis_weights, &g, out);
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.apply_into(v, &mut out);
        out
    }
}

/// Gradient of `tv_beta`, i.e. `L(x) x`.
pub(crate) fn grad_tv_beta_values(grid: &VoxelGrid, cfg: &RegularizerConfig, x: &[f64]) -> Vec<f64> {
    DiffusionOperator::new(grid, cfg, x).apply(x)
}

pub fn grad_tv_beta(x: &Volume, cfg: &RegularizerConfig) -> Volume {
    Volume::from_values(x.grid, grad_tv_beta_values(&x.grid, cfg, &x.values))
}

/// `L(x_lag) v`.
pub fn apply_diffusion(x_lag: &Volume, v: &Volume, cfg: &RegularizerConfig) -> Volume {
    Volume::from_values(x_lag.grid, DiffusionOperator::new(&x_lag.grid, cfg, &x_lag.values).apply(&v.values))
}

/// Power iteration on a symmetric positive semidefinite operator `B`,
/// returning `sqrt` of the dominant eigenvalue estimate, i.e. `||K||_2` when
/// `B = K^T K`.
///
/// Starts from the normalized all-ones vector; if `B` annihilates it, an
/// alternating-sign vector is used instead.
pub fn power_method_norm(n: usize, iterations: usize, mut apply: impl FnMut(&[f64], &mut [f64])) -> f64 {
    assert!(iterations >= 1, "power method needs at least one iteration");
    if n == 0 {
        return 0.0;
    }
    let starts: [Box<dyn Fn(usize) -> f64>; 2] = [
        // A fixed, slightly perturbed ones vector: the plain ones vector is
        // invariant under the grid's mirror symmetries and can miss the top
        // eigenvector entirely.
        Box::new(|i| 1.0 + 0.25 * (((i as f64) * 0.618_033_988_749_895).fract() - 0.5)),
        Box::new(|i| if i % 2 == 0 { 1.0 } else { -1.0 }),
    ];
    let mut w = vec![0.0; n];
    for start in &starts {
        let mut v: Vec<f64> = (0..n).map(start).collect();
        let s = 1.0 / vecops::norm(&v);
        v.iter_mut().for_each(|e| *e *= s);
        let mut lambda = 0.0;
        for _ in 0..iterations {
            apply(&v, &mut w);
            lambda = vecops::norm(&w);
            if lambda == 0.0 {
                break;
            }
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / lambda;
            }
        }
        if lambda > 0.0 {
            return lambda.sqrt();
        }
    }
    0.0
}

/// Estimate of `||K||_2` for the stacked operator `K = [M; grad_x; grad_y; grad_z]`.
pub fn stacked_operator_norm<A: LinearOperator + ?Sized>(
    op: &A,
    grid: &VoxelGrid,
    weights: [f64; 3],
    iterations: usize,
) -> f64 {
    let n = op.cols();
    let mut proj = vec![0.0; op.rows()];
    let mut back = vec![0.0; n];
    let mut g = GradientField::zeros(*grid);
    let mut div = vec![0.0; n];
    power_method_norm(n, iterations, |v, out| {
        op.apply(v, &mut proj);
        op.apply_transpose(&proj, &mut back);
        gradient_into(grid, weights, v, &mut g);
        gradient_adjoint_into(grid, weights, &g, &mut div);
        for ((o, b), d) in out.iter_mut().zip(&back).zip(&div) {
            *o = b + d;
        }
    })
}

/// `||K||_2` estimate for a geometry's projector stacked with unit-weight differences.
pub fn estimate_operator_norm(geom: &crate::geometry::Geometry, iterations: usize) -> f64 {
    let proj = crate::projector::Projector::new(geom);
    stacked_operator_norm(&proj, &geom.grid, [1.0; 3], iterations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeometryConfig;

    fn grid(nx: usize, ny: usize, nz: usize) -> VoxelGrid {
        let mut g = GeometryConfig::tiny().grid;
        g.n_x = nx;
        g.n_y = ny;
        g.n_z = nz;
        g
    }

    #[test]
    fn two_point_volume() {
        let v = Volume::from_values(grid(2, 1, 1), vec![0.0, 1.0]);
        let g = spatial_gradient(&v);
        assert_eq!(g.gx, vec![1.0, 0.0]);
        assert_eq!(g.gy, vec![0.0, 0.0]);
        assert_eq!(tv(&v), 1.0);
        let mut field = GradientField::zeros(v.grid);
        field.gx = vec![1.0, 0.0];
        assert_eq!(divergence_adjoint(&field).values, vec![-1.0, 1.0]);
    }

    #[test]
    fn constants_are_flat() {
        let v = Volume::filled(grid(10, 10, 10), 3.0);
        let g = spatial_gradient(&v);
        assert!(g.gx.iter().chain(&g.gy).chain(&g.gz).all(|&e| e == 0.0));
        assert_eq!(tv(&v), 0.0);
        let cfg = RegularizerConfig::with_beta(0.001);
        assert!((tv_beta(&v, &cfg) - 1.0).abs() < 1e-12);
        assert!(grad_tv_beta(&v, &cfg).values.iter().all(|&e| e == 0.0));
        let w = Volume::filled(v.grid, -7.5);
        assert!(apply_diffusion(&v, &w, &cfg).values.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn zero_field_adjoint() {
        let g = GradientField::zeros(grid(3, 2, 2));
        assert!(divergence_adjoint(&g).values.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn identity_spectrum() {
        let gamma = power_method_norm(7, 3, |v, out| out.copy_from_slice(v));
        assert!((gamma - 1.0).abs() < 1e-6);
    }

    #[test]
    fn annihilated_start_vector_regenerates() {
        // B = discrete Laplacian along a line: kills constants.
        let gamma = power_method_norm(4, 30, |v, out| {
            for i in 0..4 {
                let l = if i > 0 { v[i - 1] } else { v[i] };
                let r = if i < 3 { v[i + 1] } else { v[i] };
                out[i] = 2.0 * v[i] - l - r;
            }
        });
        assert!(gamma > 0.0);
    }

    #[test]
    fn validate_config() {
        assert!(RegularizerConfig::with_beta(0.0).validate().is_err());
        assert!(RegularizerConfig::default().validate().is_ok());
    }
}
