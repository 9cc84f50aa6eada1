//! Synthetic breast-phantom volumes (microcalcifications, spherical masses,
//! smooth textured background) and simulated projection data.
//!
//! Object membership is decided by voxel centers, so the attenuation mass
//! of a phantom is exactly the background mass plus contrast times the
//! voxelized volume of each object. The optional supersampled mode uses the
//! fraction of a 2x2 in-plane sub-grid (at the slab-center height) that
//! falls inside a sphere; slabs are far thicker than the in-plane pitch, so
//! splitting them in z would only miss small objects.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Geometry, Point3, VoxelGrid};
use crate::projector::Projector;
use crate::volume::{ProjectionStack, Volume};

/// Microcalcification diameters of the reference phantom, micrometres.
pub const MC_DIAMETERS_UM: [f64; 6] = [400.0, 290.0, 230.0, 196.0, 165.0, 130.0];
/// Mass diameters of the reference phantom, micrometres.
pub const MS_DIAMETERS_UM: [f64; 6] = [6300.0, 4700.0, 3900.0, 3100.0, 2300.0, 1800.0];

/// Number of cosine modes in the background texture.
const TEXTURE_MODES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("object {index} ({kind:?} at {center:?} mm, radius {radius} mm) does not fit inside the grid")]
    OutsideGrid { index: usize, kind: ObjectKind, center: Point3, radius: f64 },
    #[error("ground truth must be finite and non-negative")]
    NegativeVolume,
    #[error("volume grid does not match the geometry")]
    GridMismatch,
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> PhantomError {
    PhantomError::Invalid { field: field.into(), reason: reason.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ObjectKind {
    /// Microcalcification; diameter in micrometres.
    Mc,
    /// Mass; diameter in millimetres.
    Ms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomObject {
    pub kind: ObjectKind,
    /// World coordinates, mm.
    pub center: Point3,
    /// Micrometres for `MC`, millimetres for `MS`.
    pub diameter: f64,
    /// Added attenuation, 1/mm.
    pub contrast: f64,
}

impl PhantomObject {
    pub fn mc(center: Point3, diameter_um: f64, contrast: f64) -> Self {
        PhantomObject { kind: ObjectKind::Mc, center, diameter: diameter_um, contrast }
    }

    pub fn ms(center: Point3, diameter_mm: f64, contrast: f64) -> Self {
        PhantomObject { kind: ObjectKind::Ms, center, diameter: diameter_mm, contrast }
    }

    pub fn radius_mm(&self) -> f64 {
        match self.kind {
            ObjectKind::Mc => self.diameter / 2000.0,
            ObjectKind::Ms => self.diameter / 2.0,
        }
    }

    fn contains(&self, p: Point3) -> bool {
        let r = self.radius_mm();
        let d2: f64 = (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum();
        d2 <= r * r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// Background attenuation, 1/mm.
    pub background: f64,
    /// Texture amplitude as a fraction of the background.
    pub texture_amplitude: f64,
    pub texture_seed: u64,
    /// Fractional membership from 2x2 in-plane sub-voxel centers.
    pub supersample: bool,
    pub objects: Vec<PhantomObject>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            background: 0.05,
            texture_amplitude: 0.1,
            texture_seed: 0,
            supersample: false,
            objects: Vec::new(),
        }
    }
}

impl PhantomSpec {
    /// Uniform background, no texture, no objects.
    pub fn uniform(background: f64) -> Self {
        PhantomSpec { background, texture_amplitude: 0.0, ..Default::default() }
    }

    /// Appends `count` microcalcifications of a common diameter placed on a
    /// ring of radius `spacing` (mm) around `center` in its z-plane. A single
    /// MC sits at the center.
    pub fn add_cluster(&mut self, center: Point3, count: usize, spacing: f64, diameter_um: f64, contrast: f64) {
        if count == 1 {
            self.objects.push(PhantomObject::mc(center, diameter_um, contrast));
            return;
        }
        for n in 0..count {
            let t = std::f64::consts::TAU * n as f64 / count as f64;
            let c = [center[0] + spacing * t.cos(), center[1] + spacing * t.sin(), center[2]];
            self.objects.push(PhantomObject::mc(c, diameter_um, contrast));
        }
    }

    pub fn validate(&self, grid: &VoxelGrid) -> Result<(), PhantomError> {
        if !(self.background >= 0.0 && self.background.is_finite()) {
            return Err(invalid("phantom.background", format!("must be >= 0, got {}", self.background)));
        }
        if !(0.0..1.0).contains(&self.texture_amplitude) {
            return Err(invalid(
                "phantom.texture_amplitude",
                format!("must be in [0, 1), got {}", self.texture_amplitude),
            ));
        }
        let (lo, hi) = grid.bounds();
        for (index, o) in self.objects.iter().enumerate() {
            if !(o.diameter > 0.0 && o.diameter.is_finite()) {
                return Err(invalid(
                    format!("phantom.objects[{index}].diameter"),
                    format!("must be > 0, got {}", o.diameter),
                ));
            }
            match o.kind {
                ObjectKind::Mc if !(o.contrast > 0.0) => {
                    return Err(invalid(
                        format!("phantom.objects[{index}].contrast"),
                        format!("microcalcification contrast must be > 0, got {}", o.contrast),
                    ));
                }
                _ if !o.contrast.is_finite() || self.background * (1.0 - self.texture_amplitude) + o.contrast < 0.0 => {
                    return Err(invalid(
                        format!("phantom.objects[{index}].contrast"),
                        format!("{} would make the attenuation negative", o.contrast),
                    ));
                }
                _ => {}
            }
            let r = o.radius_mm();
            if (0..3).any(|a| o.center[a] - r < lo[a] || o.center[a] + r > hi[a]) {
                return Err(PhantomError::OutsideGrid { index, kind: o.kind, center: o.center, radius: r });
            }
        }
        Ok(())
    }

    /// Background plus texture at a point.
    fn background_at(&self, modes: &[TextureMode], p: Point3) -> f64 {
        if self.texture_amplitude == 0.0 {
            return self.background;
        }
        let s: f64 = modes.iter().map(|m| (m.k[0] * p[0] + m.k[1] * p[1] + m.k[2] * p[2] + m.phase).cos()).sum();
        self.background * (1.0 + self.texture_amplitude * s / modes.len() as f64)
    }
}

#[derive(Clone, Copy, Debug)]
struct TextureMode {
    k: [f64; 3],
    phase: f64,
}

/// Low-frequency cosines: wavelengths between half and the full grid extent.
fn texture_modes(grid: &VoxelGrid, seed: u64) -> Vec<TextureMode> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = grid.bounds();
    (0..TEXTURE_MODES)
        .map(|_| {
            let mut k = [0.0; 3];
            for a in 0..3 {
                let extent = hi[a] - lo[a];
                let cycles: f64 = rng.random_range(0.5..2.0);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                k[a] = sign * std::f64::consts::TAU * cycles / extent;
            }
            TextureMode { k, phase: rng.random_range(0.0..std::f64::consts::TAU) }
        })
        .collect()
}

/// Sub-voxel sample points of voxel `(i, j, k)` and the weight of each.
fn samples(grid: &VoxelGrid, i: usize, j: usize, k: usize, supersample: bool) -> (Vec<Point3>, f64) {
    let c = grid.voxel_center(i, j, k);
    if !supersample {
        return (vec![c], 1.0);
    }
    let (hx, hy) = (grid.dx / 4.0, grid.dy / 4.0);
    let mut pts = Vec::with_capacity(4);
    for sy in [-1.0, 1.0] {
        for sx in [-1.0, 1.0] {
            pts.push([c[0] + sx * hx, c[1] + sy * hy, c[2]]);
        }
    }
    (pts, 0.25)
}

/// Fraction of voxel `(i, j, k)` covered by `obj` under the phantom's supersampling.
fn coverage(grid: &VoxelGrid, obj: &PhantomObject, i: usize, j: usize, k: usize, supersample: bool) -> f64 {
    let (pts, w) = samples(grid, i, j, k, supersample);
    pts.iter().filter(|p| obj.contains(**p)).count() as f64 * w
}

pub fn generate_phantom(spec: &PhantomSpec, grid: &VoxelGrid) -> Result<Volume, PhantomError> {
    spec.validate(grid)?;
    let modes = texture_modes(grid, spec.texture_seed);
    let plane = grid.n_x * grid.n_y;
    let mut values = vec![0.0; grid.n_voxels()];
    values.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        for j in 0..grid.n_y {
            for i in 0..grid.n_x {
                let c = grid.voxel_center(i, j, k);
                let mut v = spec.background_at(&modes, c);
                for o in &spec.objects {
                    // Cheap reject before sampling.
                    let reach = o.radius_mm() + grid.dx.max(grid.dy).max(grid.dz);
                    if (0..3).any(|a| (c[a] - o.center[a]).abs() > reach) {
                        continue;
                    }
                    let f = coverage(grid, o, i, j, k, spec.supersample);
                    if f > 0.0 {
                        v += o.contrast * f;
                    }
                }
                slab[i + grid.n_x * j] = v;
            }
        }
    });
    Ok(Volume::from_values(*grid, values))
}

/// Voxelized volume of one object (mm^3) under the phantom's supersampling.
pub fn voxelized_volume(obj: &PhantomObject, grid: &VoxelGrid, supersample: bool) -> f64 {
    let mut covered = 0.0;
    for k in 0..grid.n_z {
        for j in 0..grid.n_y {
            for i in 0..grid.n_x {
                covered += coverage(grid, obj, i, j, k, supersample);
            }
        }
    }
    covered * grid.voxel_volume()
}

/// Background-only volume (texture included, no objects).
pub fn background_volume(spec: &PhantomSpec, grid: &VoxelGrid) -> Result<Volume, PhantomError> {
    let bare = PhantomSpec { objects: Vec::new(), ..spec.clone() };
    generate_phantom(&bare, grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum NoiseModel {
    None,
    /// Additive white noise on the line integrals.
    Gaussian {
        sigma: f64,
    },
    /// Photon counts `~ Poisson(i0 * exp(-integral))`, returned as `-ln(counts / i0)`.
    Poisson {
        i0: f64,
    },
}

/// `model = "none" | "gaussian" | "poisson"` with its parameter and a seed,
/// all in one table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNoise")]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub model: NoiseModel,
    pub seed: u64,
}

// Flattened tagged enums cannot reject unknown keys, so parse a flat form.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    model: String,
    sigma: Option<f64>,
    i0: Option<f64>,
    #[serde(default)]
    seed: u64,
}

impl TryFrom<RawNoise> for NoiseSpec {
    type Error = String;

    fn try_from(r: RawNoise) -> Result<Self, String> {
        let model = match (r.model.as_str(), r.sigma, r.i0) {
            ("none", None, None) => NoiseModel::None,
            ("gaussian", Some(sigma), None) => NoiseModel::Gaussian { sigma },
            ("poisson", None, Some(i0)) => NoiseModel::Poisson { i0 },
            ("none", ..) => return Err("model \"none\" takes no sigma or i0".into()),
            ("gaussian", ..) => return Err("model \"gaussian\" needs sigma and no i0".into()),
            ("poisson", ..) => return Err("model \"poisson\" needs i0 and no sigma".into()),
            (other, ..) => return Err(format!("unknown noise model \"{other}\" (none, gaussian or poisson)")),
        };
        Ok(NoiseSpec { model, seed: r.seed })
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec { model: NoiseModel::None, seed: 0 }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        NoiseSpec { model: NoiseModel::Gaussian { sigma }, seed }
    }

    pub fn poisson(i0: f64, seed: u64) -> Self {
        NoiseSpec { model: NoiseModel::Poisson { i0 }, seed }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        match self.model {
            NoiseModel::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(invalid("noise.sigma", format!("must be >= 0, got {sigma}")))
            }
            NoiseModel::Poisson { i0 } if !(i0 > 0.0 && i0.is_finite()) => {
                Err(invalid("noise.i0", format!("must be > 0, got {i0}")))
            }
            _ => Ok(()),
        }
    }
}

/// Independent generator for ray `ray`: same seed, one stream per ray.
fn ray_rng(seed: u64, ray: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(ray as u64);
    r
}

/// Applies the noise model in place to noiseless line integrals.
pub fn add_noise(values: &mut [f64], noise: &NoiseSpec) -> Result<(), PhantomError> {
    noise.validate()?;
    match noise.model {
        NoiseModel::None => {}
        NoiseModel::Gaussian { sigma } => {
            if sigma > 0.0 {
                let dist = Normal::new(0.0, sigma).expect("validated sigma");
                values.par_iter_mut().enumerate().for_each(|(ray, v)| {
                    *v += dist.sample(&mut ray_rng(noise.seed, ray));
                });
            }
        }
        NoiseModel::Poisson { i0 } => {
            values.par_iter_mut().enumerate().for_each(|(ray, v)| {
                let mean = i0 * (-*v).exp();
                let counts = if mean > 0.0 {
                    Poisson::new(mean).expect("positive mean").sample(&mut ray_rng(noise.seed, ray))
                } else {
                    0.0
                };
                *v = -(counts.max(1.0) / i0).ln();
            });
        }
    }
    Ok(())
}

/// Forward projection of the ground truth followed by the noise model.
/// Mean over each `f[0] x f[1] x f[2]` block of `fine`, on the coarse grid
/// `fine` was refined from.
pub fn block_average(fine: &Volume, f: [usize; 3]) -> Volume {
    let g = fine.grid;
    let coarse = VoxelGrid {
        n_x: g.n_x / f[0],
        n_y: g.n_y / f[1],
        n_z: g.n_z / f[2],
        dx: g.dx * f[0] as f64,
        dy: g.dy * f[1] as f64,
        dz: g.dz * f[2] as f64,
        origin: g.origin,
    };
    let scale = 1.0 / (f[0] * f[1] * f[2]) as f64;
    let mut out = vec![0.0; coarse.n_voxels()];
    for (idx, v) in fine.values.iter().enumerate() {
        let (i, j, k) = g.unravel(idx);
        out[coarse.linear_index(i / f[0], j / f[1], k / f[2])] += v * scale;
    }
    Volume::from_values(coarse, out)
}

/// Simulates data from `spec` rasterized on `geom`'s grid refined by
/// `refine`, so the data carry sub-voxel detail the reconstruction grid
/// cannot represent exactly. Returns the block-averaged truth on `geom.grid`
/// and the projections.
pub fn simulate_refined(
    geom: &Geometry,
    spec: &PhantomSpec,
    refine: [usize; 3],
    noise: &NoiseSpec,
) -> Result<(Volume, ProjectionStack), PhantomError> {
    if refine.contains(&0) {
        return Err(invalid("simulation.refine", "factors must be >= 1"));
    }
    if refine == [1, 1, 1] {
        let x = generate_phantom(spec, &geom.grid)?;
        let y = simulate_projections(geom, &x, noise)?;
        return Ok((x, y));
    }
    let fine = Geometry::new(geom.detector.clone(), geom.arc.clone(), geom.grid.refined(refine))
        .map_err(|e| invalid("simulation.refine", e.to_string()))?;
    let xf = generate_phantom(spec, &fine.grid)?;
    let y = simulate_projections(&fine, &xf, noise)?;
    Ok((block_average(&xf, refine), y))
}

pub fn simulate_projections(
    geom: &Geometry,
    x_true: &Volume,
    noise: &NoiseSpec,
) -> Result<ProjectionStack, PhantomError> {
    if x_true.grid != geom.grid {
        return Err(PhantomError::GridMismatch);
    }
    if x_true.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(PhantomError::NegativeVolume);
    }
    let proj = Projector::new(geom);
    let mut y = proj.forward(x_true).map_err(|_| PhantomError::GridMismatch)?;
    add_noise(&mut y.values, noise)?;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeometryConfig;

    #[test]
    fn radius_units() {
        assert_eq!(PhantomObject::mc([0.0; 3], 230.0, 1.0).radius_mm(), 0.115);
        assert_eq!(PhantomObject::ms([0.0; 3], 4.7, 0.01).radius_mm(), 2.35);
    }

    #[test]
    fn cluster_layout() {
        let mut s = PhantomSpec::uniform(0.05);
        s.add_cluster([0.0, 0.0, 8.0], 4, 1.0, 230.0, 0.5);
        assert_eq!(s.objects.len(), 4);
        assert!((s.objects[1].center[1] - 1.0).abs() < 1e-15);
        assert!(s.objects.iter().all(|o| o.center[2] == 8.0));
    }

    #[test]
    fn rejects_bad_specs() {
        let grid = GeometryConfig::desk_scale().grid;
        let mut s = PhantomSpec::uniform(0.05);
        s.objects.push(PhantomObject::mc([0.0, 0.0, 8.5], 230.0, -1.0));
        assert!(matches!(s.validate(&grid), Err(PhantomError::Invalid { .. })));
        s.objects[0].contrast = 1.0;
        assert!(s.validate(&grid).is_ok());
        s.objects[0].center[0] = 2.85;
        assert!(matches!(s.validate(&grid), Err(PhantomError::OutsideGrid { index: 0, .. })));
        let noise = NoiseSpec::poisson(0.0, 1);
        assert!(noise.validate().is_err());
    }
}
