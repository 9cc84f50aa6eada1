//! Acquisition geometry: flat stationary detector in the plane `z = 0`, a
//! source moving on a circular arc in the XZ plane, and the voxel grid of
//! the compressed volume resting on the detector.
//!
//! All lengths are millimetres, angles are degrees. Volumes are stored
//! x-fastest: `index = i + n_x * (j + n_y * k)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("source {index} at z = {source_z} mm is not above the grid top plus one slab ({min_z} mm)")]
    SourceBelowGrid { index: usize, source_z: f64, min_z: f64 },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> GeometryError {
    GeometryError::Invalid { field, reason: reason.into() }
}

/// Flat detector panel with square pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub n_u: usize,
    pub n_v: usize,
    pub pitch: f64,
    /// Corner of pixel (0, 0); must lie in the plane `z = 0`.
    pub origin: Point3,
}

impl DetectorSpec {
    pub fn n_pixels(&self) -> usize {
        self.n_u * self.n_v
    }

    /// Boundary `p` (0..=n_u) of the detector columns along x.
    #[inline]
    pub fn u_edge(&self, p: usize) -> f64 {
        self.origin[0] + p as f64 * self.pitch
    }

    /// Boundary `q` (0..=n_v) of the detector rows along y.
    #[inline]
    pub fn v_edge(&self, q: usize) -> f64 {
        self.origin[1] + q as f64 * self.pitch
    }

    pub fn pixel_center(&self, p: usize, q: usize) -> Point3 {
        [self.origin[0] + (p as f64 + 0.5) * self.pitch, self.origin[1] + (q as f64 + 0.5) * self.pitch, self.origin[2]]
    }

    fn validate(&self) -> Result<(), GeometryError> {
        if self.n_u == 0 || self.n_v == 0 {
            return Err(invalid("detector.n_u/n_v", "pixel counts must be >= 1"));
        }
        if !(self.pitch > 0.0 && self.pitch.is_finite()) {
            return Err(invalid("detector.pitch", format!("must be a positive length, got {}", self.pitch)));
        }
        if self.origin.iter().any(|c| !c.is_finite()) {
            return Err(invalid("detector.origin", "coordinates must be finite"));
        }
        if self.origin[2] != 0.0 {
            return Err(invalid("detector.origin", format!("detector must lie in z = 0, got z = {}", self.origin[2])));
        }
        Ok(())
    }
}

/// Circular source trajectory. The arc pivots about `center`; its radius is
/// `height - center.z`, so the central (topmost) source sits `height` mm above
/// the detector plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceArc {
    pub n_angles: usize,
    pub arc_span_deg: f64,
    pub height: f64,
    pub center: Point3,
}

impl SourceArc {
    pub fn radius(&self) -> f64 {
        self.height - self.center[2]
    }

    /// Equally spaced angles symmetric about the vertical.
    pub fn angles_deg(&self) -> Vec<f64> {
        if self.n_angles == 1 {
            return vec![0.0];
        }
        let step = self.arc_span_deg / (self.n_angles - 1) as f64;
        (0..self.n_angles).map(|i| -self.arc_span_deg / 2.0 + i as f64 * step).collect()
    }

    pub fn source_position(&self, angle_deg: f64) -> Point3 {
        let t = angle_deg.to_radians();
        let r = self.radius();
        [self.center[0] + r * t.sin(), self.center[1], self.center[2] + r * t.cos()]
    }

    fn validate(&self) -> Result<(), GeometryError> {
        if self.n_angles == 0 {
            return Err(invalid("arc.n_angles", "must be >= 1"));
        }
        if !(self.arc_span_deg > 0.0 && self.arc_span_deg < 180.0) {
            return Err(invalid("arc.arc_span_deg", format!("must be in (0, 180) degrees, got {}", self.arc_span_deg)));
        }
        if !(self.height > 0.0 && self.height.is_finite()) {
            return Err(invalid("arc.height", format!("must be a positive length, got {}", self.height)));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(invalid("arc.center", "coordinates must be finite"));
        }
        if self.radius() <= 0.0 {
            return Err(invalid(
                "arc.center",
                format!("pivot z = {} must be below the source height {}", self.center[2], self.height),
            ));
        }
        Ok(())
    }
}

/// Regular voxel grid, anisotropic spacing allowed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelGrid {
    pub n_x: usize,
    pub n_y: usize,
    pub n_z: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub origin: Point3,
}

impl VoxelGrid {
    pub fn n_voxels(&self) -> usize {
        self.n_x * self.n_y * self.n_z
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.n_x, self.n_y, self.n_z]
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.n_x && j < self.n_y && k < self.n_z);
        i + self.n_x * (j + self.n_y * k)
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> (usize, usize, usize) {
        debug_assert!(idx < self.n_voxels());
        let i = idx % self.n_x;
        let rest = idx / self.n_x;
        (i, rest % self.n_y, rest / self.n_y)
    }

    /// Centre of voxel `(i, j, k)`. Panics on out-of-range indices.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point3 {
        assert!(
            i < self.n_x && j < self.n_y && k < self.n_z,
            "voxel index ({i}, {j}, {k}) outside {}x{}x{} grid",
            self.n_x,
            self.n_y,
            self.n_z
        );
        [
            self.origin[0] + (i as f64 + 0.5) * self.dx,
            self.origin[1] + (j as f64 + 0.5) * self.dy,
            self.origin[2] + (k as f64 + 0.5) * self.dz,
        ]
    }

    #[inline]
    pub fn x_edge(&self, i: usize) -> f64 {
        self.origin[0] + i as f64 * self.dx
    }

    #[inline]
    pub fn y_edge(&self, j: usize) -> f64 {
        self.origin[1] + j as f64 * self.dy
    }

    #[inline]
    pub fn slab_center_z(&self, k: usize) -> f64 {
        self.origin[2] + (k as f64 + 0.5) * self.dz
    }

    pub fn top_z(&self) -> f64 {
        self.origin[2] + self.n_z as f64 * self.dz
    }

    pub fn voxel_volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    /// Physical bounding box `(min, max)`.
    pub fn bounds(&self) -> (Point3, Point3) {
        let o = self.origin;
        (o, [o[0] + self.n_x as f64 * self.dx, o[1] + self.n_y as f64 * self.dy, o[2] + self.n_z as f64 * self.dz])
    }

    /// Same extent, each voxel split into `f[0] x f[1] x f[2]` sub-voxels.
    pub fn refined(&self, f: [usize; 3]) -> VoxelGrid {
        VoxelGrid {
            n_x: self.n_x * f[0],
            n_y: self.n_y * f[1],
            n_z: self.n_z * f[2],
            dx: self.dx / f[0] as f64,
            dy: self.dy / f[1] as f64,
            dz: self.dz / f[2] as f64,
            origin: self.origin,
        }
    }

    pub fn contains(&self, p: Point3) -> bool {
        let (lo, hi) = self.bounds();
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }

    fn validate(&self) -> Result<(), GeometryError> {
        if self.n_x == 0 || self.n_y == 0 || self.n_z == 0 {
            return Err(invalid("grid.n_x/n_y/n_z", "voxel counts must be >= 1"));
        }
        for (name, s) in [("grid.dx", self.dx), ("grid.dy", self.dy), ("grid.dz", self.dz)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid(name, format!("must be a positive length, got {s}")));
            }
        }
        if self.origin.iter().any(|c| !c.is_finite()) {
            return Err(invalid("grid.origin", "coordinates must be finite"));
        }
        if self.origin[2] < 0.0 {
            return Err(invalid(
                "grid.origin",
                format!("grid must sit above the detector (z >= 0), got z = {}", self.origin[2]),
            ));
        }
        Ok(())
    }
}

/// Serializable description from which a [`Geometry`] is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub detector: DetectorSpec,
    pub arc: SourceArc,
    pub grid: VoxelGrid,
}

impl GeometryConfig {
    /// 64x64x16 voxels at 0.09 x 0.09 x 1 mm, 11 views over 30 degrees,
    /// 96x96 detector at 0.085 mm pitch, source 700 mm above the detector.
    pub fn desk_scale() -> Self {
        let (n_xy, dxy) = (64usize, 0.09);
        let (n_det, pitch) = (96usize, 0.085);
        GeometryConfig {
            detector: DetectorSpec {
                n_u: n_det,
                n_v: n_det,
                pitch,
                origin: [-(n_det as f64) * pitch / 2.0, -(n_det as f64) * pitch / 2.0, 0.0],
            },
            arc: SourceArc { n_angles: 11, arc_span_deg: 30.0, height: 700.0, center: [0.0, 0.0, 0.0] },
            grid: VoxelGrid {
                n_x: n_xy,
                n_y: n_xy,
                n_z: 16,
                dx: dxy,
                dy: dxy,
                dz: 1.0,
                origin: [-(n_xy as f64) * dxy / 2.0, -(n_xy as f64) * dxy / 2.0, 0.0],
            },
        }
    }

    /// 4x4x3 unit voxels, 3 views over 30 degrees, 6x6 unit-pitch detector.
    pub fn tiny() -> Self {
        GeometryConfig {
            detector: DetectorSpec { n_u: 6, n_v: 6, pitch: 1.0, origin: [-3.0, -3.0, 0.0] },
            arc: SourceArc { n_angles: 3, arc_span_deg: 30.0, height: 60.0, center: [0.0, 0.0, 0.0] },
            grid: VoxelGrid { n_x: 4, n_y: 4, n_z: 3, dx: 1.0, dy: 1.0, dz: 1.0, origin: [-2.0, -2.0, 0.0] },
        }
    }

    pub fn build(&self) -> Result<Geometry, GeometryError> {
        Geometry::new(self.detector.clone(), self.arc.clone(), self.grid)
    }
}

/// Validated acquisition geometry. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub detector: DetectorSpec,
    pub arc: SourceArc,
    pub grid: VoxelGrid,
    pub source_positions: Vec<Point3>,
    angles_deg: Vec<f64>,
}

impl Geometry {
    pub fn new(detector: DetectorSpec, arc: SourceArc, grid: VoxelGrid) -> Result<Self, GeometryError> {
        detector.validate()?;
        arc.validate()?;
        grid.validate()?;

        let angles_deg = arc.angles_deg();
        let source_positions: Vec<Point3> = angles_deg.iter().map(|&a| arc.source_position(a)).collect();

        let min_z = grid.top_z() + grid.dz;
        for (index, s) in source_positions.iter().enumerate() {
            if s[2] < min_z {
                return Err(GeometryError::SourceBelowGrid { index, source_z: s[2], min_z });
            }
        }

        Ok(Geometry { detector, arc, grid, source_positions, angles_deg })
    }

    pub fn config(&self) -> GeometryConfig {
        GeometryConfig { detector: self.detector.clone(), arc: self.arc.clone(), grid: self.grid }
    }

    pub fn angles_deg(&self) -> &[f64] {
        &self.angles_deg
    }

    pub fn n_angles(&self) -> usize {
        self.source_positions.len()
    }

    /// Number of measurements `N_p * N_theta`.
    pub fn n_data(&self) -> usize {
        self.detector.n_pixels() * self.n_angles()
    }

    pub fn n_voxels(&self) -> usize {
        self.grid.n_voxels()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arc(n: usize, span: f64) -> SourceArc {
        SourceArc { n_angles: n, arc_span_deg: span, height: 700.0, center: [0.0, 0.0, 0.0] }
    }

    #[test]
    fn eleven_views_over_thirty_degrees() {
        let mut cfg = GeometryConfig::desk_scale();
        cfg.arc = arc(11, 30.0);
        let g = cfg.build().unwrap();
        assert_eq!(g.source_positions.len(), 11);
        let central = g.source_positions[5];
        assert!(central[0].abs() < 1e-12 && central[1] == 0.0);
        assert!((central[2] - 700.0).abs() < 1e-12);
        for w in g.angles_deg().windows(2) {
            assert!((w[1] - w[0] - 3.0).abs() < 1e-12);
        }
        assert_eq!(g.n_data(), 96 * 96 * 11);
    }

    #[test]
    fn single_view_is_vertical() {
        let mut cfg = GeometryConfig::desk_scale();
        cfg.arc = arc(1, 77.0);
        let g = cfg.build().unwrap();
        assert_eq!(g.angles_deg(), &[0.0]);
        assert_eq!(g.source_positions[0], [0.0, 0.0, 700.0]);
    }

    #[test]
    fn three_views() {
        assert_eq!(arc(3, 30.0).angles_deg(), vec![-15.0, 0.0, 15.0]);
    }

    #[test]
    fn sources_mirror_symmetric() {
        let g = GeometryConfig::desk_scale().build().unwrap();
        let n = g.n_angles();
        for i in 0..n {
            let a = g.source_positions[i][0];
            let b = g.source_positions[n - 1 - i][0];
            assert!((a + b).abs() < 1e-9);
        }
    }

    #[test]
    fn voxel_centers() {
        let mut grid = GeometryConfig::tiny().grid;
        grid.origin = [0.0; 3];
        assert_eq!(grid.voxel_center(0, 0, 0), [0.5, 0.5, 0.5]);
        grid.dx = 0.09;
        assert!((grid.voxel_center(1, 0, 0)[0] - 0.135).abs() < 1e-15);
        grid.origin = [-5.0, -5.0, 0.0];
        assert_eq!(grid.voxel_center(0, 0, 2)[2], 2.5);
        let mut tall = grid;
        tall.n_z = 5;
        assert_eq!(tall.voxel_center(0, 0, 4)[2], 4.5);
    }

    #[test]
    #[should_panic]
    fn voxel_center_out_of_range() {
        GeometryConfig::tiny().grid.voxel_center(4, 0, 0);
    }

    #[test]
    fn linear_index_roundtrip() {
        let grid = GeometryConfig::tiny().grid;
        for idx in 0..grid.n_voxels() {
            let (i, j, k) = grid.unravel(idx);
            assert_eq!(grid.linear_index(i, j, k), idx);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut cfg = GeometryConfig::tiny();
        cfg.arc.arc_span_deg = 0.0;
        assert!(matches!(cfg.build(), Err(GeometryError::Invalid { field: "arc.arc_span_deg", .. })));

        let mut cfg = GeometryConfig::tiny();
        cfg.detector.pitch = -1.0;
        assert!(cfg.build().is_err());

        let mut cfg = GeometryConfig::tiny();
        cfg.detector.origin[2] = 1.0;
        assert!(cfg.build().is_err());

        let mut cfg = GeometryConfig::tiny();
        cfg.grid.origin[2] = -0.5;
        assert!(cfg.build().is_err());
    }

    #[test]
    fn rejects_source_below_grid() {
        let mut cfg = GeometryConfig::tiny();
        cfg.arc.height = 3.5;
        assert!(matches!(cfg.build(), Err(GeometryError::SourceBelowGrid { .. })));
        // Oblique sources drop below the grid on a wide arc.
        let mut cfg = GeometryConfig::tiny();
        cfg.arc.height = 5.0;
        cfg.arc.arc_span_deg = 170.0;
        assert!(matches!(cfg.build(), Err(GeometryError::SourceBelowGrid { index: 0, .. })));
    }
}
