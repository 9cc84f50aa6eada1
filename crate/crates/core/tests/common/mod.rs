#![allow(dead_code)]

use dbt_core::geometry::{DetectorSpec, GeometryConfig, SourceArc, VoxelGrid};
use dbt_core::Geometry;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_nonneg(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(f64::MIN_POSITIVE)
}

pub fn tiny() -> Geometry {
    GeometryConfig::tiny().build().unwrap()
}

pub fn desk() -> Geometry {
    GeometryConfig::desk_scale().build().unwrap()
}

/// Small grid with its own detector and arc, `n_angles` views over `span` degrees.
pub fn small_geometry(nx: usize, ny: usize, nz: usize, n_angles: usize, span: f64) -> Geometry {
    let det_n = nx.max(ny) + 2;
    GeometryConfig {
        detector: DetectorSpec {
            n_u: det_n,
            n_v: det_n,
            pitch: 1.0,
            origin: [-(det_n as f64) / 2.0, -(det_n as f64) / 2.0, 0.0],
        },
        arc: SourceArc { n_angles, arc_span_deg: span, height: 60.0, center: [0.0; 3] },
        grid: VoxelGrid {
            n_x: nx,
            n_y: ny,
            n_z: nz,
            dx: 1.0,
            dy: 1.0,
            dz: 1.0,
            origin: [-(nx as f64) / 2.0, -(ny as f64) / 2.0, 0.0],
        },
    }
    .build()
    .unwrap()
}
