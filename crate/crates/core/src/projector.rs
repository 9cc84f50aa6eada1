//! Distance Driven projection and backprojection for a stationary flat
//! detector.
//!
//! For every view and every slab of the grid, voxel boundaries along x and
//! y are projected from the source through the slab centre plane straight
//! onto the detector plane. Because the magnification is the same along
//! both axes the footprint is separable: the weight of voxel `(i, j)` on
//! pixel `(p, q)` is the product of the two 1D overlap lengths divided by
//! the pixel pitch, times the ray path length through the slab,
//! `dz / cos(gamma)`, taken along the ray from the source to the pixel
//! centre. The coefficients are never stored; only the 1D overlap tables
//! (`O(n_angles * n_z * (n_u + n_x))`) are kept.
//!
//! Rays leaving the grid simply collect no weight outside it.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::Geometry;
use crate::operator::{DenseOperator, LinearOperator};
use crate::volume::{ProjectionStack, Volume};

/// Largest dense operator `build_dense_operator` will allocate.
pub const DENSE_ENTRY_LIMIT: usize = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectorError {
    #[error("dimension mismatch: expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dense operator would need {entries} entries (limit {DENSE_ENTRY_LIMIT})")]
    TooLarge { entries: usize },
}

/// Compressed per-detector-cell list of `(voxel index, overlap fraction)`.
#[derive(Clone, Debug, Default)]
struct Overlap1d {
    offsets: Vec<usize>,
    voxel: Vec<usize>,
    weight: Vec<f64>,
}

impl Overlap1d {
    /// `projected` holds the `n + 1` voxel boundaries already mapped to the
    /// detector (increasing); `cell_edge(c)` gives detector boundaries.
    fn build(projected: &[f64], n_cells: usize, cell_edge: impl Fn(usize) -> f64, pitch: f64) -> Self {
        let n_vox = projected.len() - 1;
        let mut out = Overlap1d { offsets: Vec::with_capacity(n_cells + 1), ..Default::default() };
        out.offsets.push(0);
        let mut start = 0;
        for c in 0..n_cells {
            let (d0, d1) = (cell_edge(c), cell_edge(c + 1));
            while start < n_vox && projected[start + 1] <= d0 {
                start += 1;
            }
            let mut i = start;
            while i < n_vox && projected[i] < d1 {
                let overlap = d1.min(projected[i + 1]) - d0.max(projected[i]);
                if overlap > 0.0 {
                    out.voxel.push(i);
                    out.weight.push(overlap / pitch);
                }
                i += 1;
            }
            out.offsets.push(out.voxel.len());
        }
        out
    }

    #[inline]
    fn cell(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[c]..self.offsets[c + 1];
        self.voxel[r.clone()].iter().copied().zip(self.weight[r].iter().copied())
    }
}

#[derive(Clone, Debug)]
struct SlabFootprint {
    x: Overlap1d,
    y: Overlap1d,
}

/// Matrix-free system operator `M` for one geometry.
#[derive(Clone, Debug)]
pub struct Projector {
    geom: Geometry,
    /// Indexed `angle * n_z + k`.
    slabs: Vec<SlabFootprint>,
    /// Slab path length per ray, indexed like a projection stack.
    path: Vec<f64>,
}

impl Projector {
    pub fn new(geom: &Geometry) -> Self {
        let det = &geom.detector;
        let grid = &geom.grid;
        let mut slabs = Vec::with_capacity(geom.n_angles() * grid.n_z);
        for s in &geom.source_positions {
            for k in 0..grid.n_z {
                let mag = s[2] / (s[2] - grid.slab_center_z(k));
                let px: Vec<f64> = (0..=grid.n_x).map(|i| s[0] + (grid.x_edge(i) - s[0]) * mag).collect();
                let py: Vec<f64> = (0..=grid.n_y).map(|j| s[1] + (grid.y_edge(j) - s[1]) * mag).collect();
                slabs.push(SlabFootprint {
                    x: Overlap1d::build(&px, det.n_u, |c| det.u_edge(c), det.pitch),
                    y: Overlap1d::build(&py, det.n_v, |c| det.v_edge(c), det.pitch),
                });
            }
        }

        let mut path = Vec::with_capacity(geom.n_data());
        for s in &geom.source_positions {
            for q in 0..det.n_v {
                for p in 0..det.n_u {
                    path.push(slab_path_length(geom, s, p, q));
                }
            }
        }

        Projector { geom: geom.clone(), slabs, path }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    /// `out = M x`.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.geom.n_voxels());
        assert_eq!(out.len(), self.geom.n_data());
        let grid = self.geom.grid;
        let (n_u, n_v) = (self.geom.detector.n_u, self.geom.detector.n_v);
        let (nx, nxy) = (grid.n_x, grid.n_x * grid.n_y);

        out.par_chunks_mut(n_u).enumerate().for_each(|(row, line)| {
            let a = row / n_v;
            let q = row % n_v;
            line.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..grid.n_z {
                let fp = &self.slabs[a * grid.n_z + k];
                for (j, wy) in fp.y.cell(q) {
                    let base = j * nx + k * nxy;
                    for (p, acc) in line.iter_mut().enumerate() {
                        let s: f64 = fp.x.cell(p).map(|(i, wx)| wx * x[base + i]).sum();
                        *acc += wy * s;
                    }
                }
            }
            let path = &self.path[row * n_u..(row + 1) * n_u];
            for (v, l) in line.iter_mut().zip(path) {
                *v *= l;
            }
        });
    }

    /// `out = M^T y`, the exact transpose of [`Projector::forward_into`].
    pub fn back_into(&self, y: &[f64], out: &mut [f64]) {
        assert_eq!(y.len(), self.geom.n_data());
        assert_eq!(out.len(), self.geom.n_voxels());
        let grid = self.geom.grid;
        let (n_u, n_v) = (self.geom.detector.n_u, self.geom.detector.n_v);
        let nx = grid.n_x;
        let n_angles = self.geom.n_angles();

        // One slab per task: writes are disjoint and each voxel accumulates
        // in a fixed order.
        out.par_chunks_mut(nx * grid.n_y).enumerate().for_each(|(k, slab)| {
            slab.iter_mut().for_each(|v| *v = 0.0);
            for a in 0..n_angles {
                let fp = &self.slabs[a * grid.n_z + k];
                for q in 0..n_v {
                    let row = (a * n_v + q) * n_u;
                    for (j, wy) in fp.y.cell(q) {
                        let line = &mut slab[j * nx..(j + 1) * nx];
                        for p in 0..n_u {
                            let c = y[row + p] * self.path[row + p] * wy;
                            if c == 0.0 {
                                continue;
                            }
                            for (i, wx) in fp.x.cell(p) {
                                line[i] += c * wx;
                            }
                        }
                    }
                }
            }
        });
    }

    pub fn forward(&self, x: &Volume) -> Result<ProjectionStack, ProjectorError> {
        check_len(self.geom.n_voxels(), x.values.len())?;
        let mut out = ProjectionStack::zeros_for(&self.geom);
        self.forward_into(&x.values, &mut out.values);
        Ok(out)
    }

    pub fn back(&self, y: &ProjectionStack) -> Result<Volume, ProjectorError> {
        check_len(self.geom.n_data(), y.values.len())?;
        let mut out = Volume::zeros(self.geom.grid);
        self.back_into(&y.values, &mut out.values);
        Ok(out)
    }
}

impl LinearOperator for Projector {
    fn rows(&self) -> usize {
        self.geom.n_data()
    }

    fn cols(&self) -> usize {
        self.geom.n_voxels()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.forward_into(x, out);
    }

    fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        self.back_into(y, out);
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), ProjectorError> {
    if expected != got {
        return Err(ProjectorError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// `dz / cos(gamma)` for the ray from `source` to the centre of pixel `(p, q)`.
fn slab_path_length(geom: &Geometry, source: &[f64; 3], p: usize, q: usize) -> f64 {
    let c = geom.detector.pixel_center(p, q);
    let d = [c[0] - source[0], c[1] - source[1], c[2] - source[2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    geom.grid.dz * len / d[2].abs()
}

pub fn forward_project(geom: &Geometry, x: &Volume) -> Result<ProjectionStack, ProjectorError> {
    check_len(geom.n_voxels(), x.values.len())?;
    Projector::new(geom).forward(x)
}

pub fn back_project(geom: &Geometry, y: &ProjectionStack) -> Result<Volume, ProjectorError> {
    check_len(geom.n_data(), y.values.len())?;
    Projector::new(geom).back(y)
}

/// Explicit `N_d x N_v` system matrix for tiny geometries.
///
/// Each entry is computed on its own from the footprint definition, without
/// the overlap tables used by [`Projector`], so the two can check each other.
pub fn build_dense_operator(geom: &Geometry) -> Result<DenseOperator, ProjectorError> {
    let rows = geom.n_data();
    let cols = geom.n_voxels();
    let entries = rows.saturating_mul(cols);
    if entries > DENSE_ENTRY_LIMIT {
        return Err(ProjectorError::TooLarge { entries });
    }
    let det = &geom.detector;
    let grid = &geom.grid;
    let mut m = DenseOperator::zeros(rows, cols);
    for (a, s) in geom.source_positions.iter().enumerate() {
        for q in 0..det.n_v {
            for p in 0..det.n_u {
                let r = (a * det.n_v + q) * det.n_u + p;
                let path = slab_path_length(geom, s, p, q);
                for c in 0..cols {
                    let (i, j, k) = grid.unravel(c);
                    let mag = s[2] / (s[2] - grid.slab_center_z(k));
                    let proj = |edge: f64, src: f64| src + (edge - src) * mag;
                    let wx = interval_overlap(
                        proj(grid.x_edge(i), s[0]),
                        proj(grid.x_edge(i + 1), s[0]),
                        det.u_edge(p),
                        det.u_edge(p + 1),
                    ) / det.pitch;
                    let wy = interval_overlap(
                        proj(grid.y_edge(j), s[1]),
                        proj(grid.y_edge(j + 1), s[1]),
                        det.v_edge(q),
                        det.v_edge(q + 1),
                    ) / det.pitch;
                    if wx > 0.0 && wy > 0.0 {
                        m.set(r, c, path * wx * wy);
                    }
                }
            }
        }
    }
    Ok(m)
}

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{DetectorSpec, GeometryConfig, SourceArc, VoxelGrid};

    fn single_voxel() -> Geometry {
        GeometryConfig {
            detector: DetectorSpec { n_u: 1, n_v: 1, pitch: 1.0, origin: [-0.5, -0.5, 0.0] },
            arc: SourceArc { n_angles: 1, arc_span_deg: 10.0, height: 500.0, center: [0.0; 3] },
            grid: VoxelGrid { n_x: 1, n_y: 1, n_z: 1, dx: 1.0, dy: 1.0, dz: 2.0, origin: [-0.5, -0.5, 0.0] },
        }
        .build()
        .unwrap()
    }

    #[test]
    fn zero_in_zero_out() {
        let g = GeometryConfig::tiny().build().unwrap();
        let p = Projector::new(&g);
        let y = p.forward(&Volume::zeros(g.grid)).unwrap();
        assert!(y.values.iter().all(|&v| v == 0.0));
        let x = p.back(&ProjectionStack::zeros_for(&g)).unwrap();
        assert!(x.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_single_entry_is_path_length() {
        let g = single_voxel();
        let m = build_dense_operator(&g).unwrap();
        assert_eq!((m.rows, m.cols), (1, 1));
        // The voxel footprint is magnified slightly beyond the pixel, so the
        // pixel footprint sits fully inside the voxel.
        assert!((m.get(0, 0) - 2.0).abs() < 1e-12);
        let y = forward_project(&g, &Volume::filled(g.grid, 1.0)).unwrap();
        assert!((y.values[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let g = GeometryConfig::tiny().build().unwrap();
        let mut other = g.grid;
        other.n_x = 5;
        assert!(matches!(forward_project(&g, &Volume::zeros(other)), Err(ProjectorError::DimensionMismatch { .. })));
        let bad = ProjectionStack { n_u: 1, n_v: 1, n_angles: 1, values: vec![0.0] };
        assert!(back_project(&g, &bad).is_err());
    }

    #[test]
    fn dense_guard() {
        let g = GeometryConfig::desk_scale().build().unwrap();
        assert!(matches!(build_dense_operator(&g), Err(ProjectorError::TooLarge { .. })));
    }

    #[test]
    fn overlap_table_partitions_covered_cells() {
        // Voxels [0,1), [1,2), [2,3) against cells of width 0.5 starting at -0.5.
        let t = Overlap1d::build(&[0.0, 1.0, 2.0, 3.0], 8, |c| -0.5 + 0.5 * c as f64, 0.5);
        let cell = |c| t.cell(c).collect::<Vec<_>>();
        assert!(cell(0).is_empty());
        assert_eq!(cell(1), vec![(0, 1.0)]);
        assert_eq!(cell(3), vec![(1, 1.0)]);
        assert!(cell(7).is_empty());
    }
}
