//! Dense data containers shared by the operators and solvers.

use crate::geometry::{Geometry, VoxelGrid};

/// Attenuation coefficients (1/mm) on a voxel grid, x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: VoxelGrid,
    pub values: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: VoxelGrid) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn filled(grid: VoxelGrid, value: f64) -> Self {
        Volume { grid, values: vec![value; grid.n_voxels()] }
    }

    /// Panics when `values.len()` does not match the grid.
    pub fn from_values(grid: VoxelGrid, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.n_voxels(), "volume payload does not match grid");
        Volume { grid, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.grid.linear_index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.grid.linear_index(i, j, k);
        self.values[idx] = v;
    }

    /// Values of slice `k` (x-fastest, `n_x * n_y` entries).
    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.grid.n_x * self.grid.n_y;
        &self.values[k * n..(k + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// In-place projection onto the non-negative orthant.
    pub fn clamp_nonnegative(&mut self) {
        for v in &mut self.values {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Log-attenuation line integrals, one `n_u x n_v` frame per view,
/// ordered `view, row (v), column (u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionStack {
    pub n_u: usize,
    pub n_v: usize,
    pub n_angles: usize,
    pub values: Vec<f64>,
}

impl ProjectionStack {
    pub fn zeros_for(geom: &Geometry) -> Self {
        ProjectionStack {
            n_u: geom.detector.n_u,
            n_v: geom.detector.n_v,
            n_angles: geom.n_angles(),
            values: vec![0.0; geom.n_data()],
        }
    }

    pub fn from_values(geom: &Geometry, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), geom.n_data(), "stack payload does not match geometry");
        ProjectionStack { values, ..Self::zeros_for(geom) }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.n_u * self.n_v
    }

    pub fn frame(&self, angle: usize) -> &[f64] {
        let n = self.frame_len();
        &self.values[angle * n..(angle + 1) * n]
    }

    pub fn matches(&self, geom: &Geometry) -> bool {
        self.n_u == geom.detector.n_u
            && self.n_v == geom.detector.n_v
            && self.n_angles == geom.n_angles()
            && self.values.len() == geom.n_data()
    }
}

pub(crate) mod vecops {
    //! Flat-slice helpers. Sums run sequentially so results do not depend on
    //! the thread count.

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn norm_sq(a: &[f64]) -> f64 {
        dot(a, a)
    }

    pub fn norm(a: &[f64]) -> f64 {
        norm_sq(a).sqrt()
    }

    pub fn norm_inf(a: &[f64]) -> f64 {
        a.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `y += a * x`
    pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), y.len());
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += a * xi;
        }
    }

    pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }
}
