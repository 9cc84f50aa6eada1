mod common;

use common::*;
use dbt_core::geometry::VoxelGrid;
use dbt_core::regularizers::{
    apply_diffusion, divergence_adjoint, estimate_operator_norm, grad_tv_beta, power_method_norm, spatial_gradient, tv,
    tv_beta, GradientField, RegularizerConfig,
};
use dbt_core::{build_dense_operator, Volume};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn grid(nx: usize, ny: usize, nz: usize) -> VoxelGrid {
    VoxelGrid { n_x: nx, n_y: ny, n_z: nz, dx: 0.09, dy: 0.09, dz: 1.0, origin: [0.0; 3] }
}

fn random_volume(seed: u64, g: VoxelGrid) -> Volume {
    Volume::from_values(g, random_vec(&mut rng(seed), g.n_voxels()))
}

/// Plain triple-loop forward differences.
fn loop_gradient(x: &Volume) -> [Vec<f64>; 3] {
    let g = x.grid;
    let mut out = [vec![0.0; g.n_voxels()], vec![0.0; g.n_voxels()], vec![0.0; g.n_voxels()]];
    for k in 0..g.n_z {
        for j in 0..g.n_y {
            for i in 0..g.n_x {
                let idx = g.linear_index(i, j, k);
                let c = x.get(i, j, k);
                if i + 1 < g.n_x {
                    out[0][idx] = x.get(i + 1, j, k) - c;
                }
                if j + 1 < g.n_y {
                    out[1][idx] = x.get(i, j + 1, k) - c;
                }
                if k + 1 < g.n_z {
                    out[2][idx] = x.get(i, j, k + 1) - c;
                }
            }
        }
    }
    out
}

#[test]
fn gradient_matches_loop_oracle() {
    let x = random_volume(10, grid(5, 4, 3));
    let g = spatial_gradient(&x);
    let [ox, oy, oz] = loop_gradient(&x);
    assert_eq!(g.gx, ox);
    assert_eq!(g.gy, oy);
    assert_eq!(g.gz, oz);
}

#[test]
fn tv_matches_loop_oracle() {
    let x = random_volume(11, grid(5, 4, 3));
    let [ox, oy, oz] = loop_gradient(&x);
    let want: f64 = (0..x.len()).map(|i| (ox[i] * ox[i] + oy[i] * oy[i] + oz[i] * oz[i]).sqrt()).sum();
    assert!((tv(&x) - want).abs() <= 1e-12 * want);
}

#[test]
fn divergence_is_adjoint_of_gradient() {
    let gr = grid(6, 5, 4);
    for seed in 0..5 {
        let x = random_volume(100 + seed, gr);
        let mut r = rng(200 + seed);
        let field = GradientField {
            grid: gr,
            gx: random_vec(&mut r, gr.n_voxels()),
            gy: random_vec(&mut r, gr.n_voxels()),
            gz: random_vec(&mut r, gr.n_voxels()),
        };
        let lhs = spatial_gradient(&x).dot(&field);
        let rhs = dot(&x.values, &divergence_adjoint(&field).values);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }
}

#[test]
fn tv_beta_of_constant() {
    let x = Volume::filled(grid(10, 10, 10), 0.3);
    assert!((tv_beta(&x, &RegularizerConfig::with_beta(0.001)) - 1.0).abs() < 1e-12);
    let two = Volume::from_values(grid(2, 1, 1), vec![0.0, 1.0]);
    assert!((tv_beta(&two, &RegularizerConfig::with_beta(1e-12)) - 1.0).abs() < 1e-9);
}

/// Central differences of `tv_beta` along random directions.
#[test]
fn grad_tv_beta_matches_finite_differences() {
    let cfg = RegularizerConfig::with_beta(0.001);
    let gr = grid(4, 4, 3);
    for seed in 0..10 {
        let x = random_volume(300 + seed, gr);
        let mut r = rng(400 + seed);
        let v = random_vec(&mut r, gr.n_voxels());
        let h = 1e-6;
        let shifted = |s: f64| Volume::from_values(gr, x.values.iter().zip(&v).map(|(a, b)| a + s * b).collect());
        let fd = (tv_beta(&shifted(h), &cfg) - tv_beta(&shifted(-h), &cfg)) / (2.0 * h);
        let an = dot(&grad_tv_beta(&x, &cfg).values, &v);
        assert!((fd - an).abs() <= 1e-5 * an.abs(), "seed {seed}: {fd} vs {an}");
    }
}

#[test]
fn grad_tv_beta_tends_to_unsmoothed_direction() {
    let cfg = RegularizerConfig::with_beta(0.001);
    let x = random_volume(7, grid(4, 4, 3));
    let big = Volume::from_values(x.grid, x.values.iter().map(|v| 1e5 * v).collect());
    let g = grad_tv_beta(&big, &cfg).values;
    // beta = 0 subgradient: grad^T (grad x / |grad x|) wherever |grad x| > 0.
    let mut field = spatial_gradient(&x);
    for i in 0..x.len() {
        let m = field.magnitude(i);
        if m > 0.0 {
            field.gx[i] /= m;
            field.gy[i] /= m;
            field.gz[i] /= m;
        }
    }
    let sub = divergence_adjoint(&field).values;
    assert!(rel_err(&g, &sub) < 1e-6);
}

#[test]
fn diffusion_defining_identity_and_symmetry() {
    let cfg = RegularizerConfig::with_beta(0.001);
    let gr = grid(5, 4, 3);
    let x = random_volume(20, gr);
    let lx = apply_diffusion(&x, &x, &cfg).values;
    let g = grad_tv_beta(&x, &cfg).values;
    let max_diff = lx.iter().zip(&g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(max_diff <= 1e-12);

    let u = random_volume(21, gr);
    let v = random_volume(22, gr);
    let luv = dot(&apply_diffusion(&x, &u, &cfg).values, &v.values);
    let ulv = dot(&u.values, &apply_diffusion(&x, &v, &cfg).values);
    assert!((luv - ulv).abs() <= 1e-12 * luv.abs());
    assert!(dot(&apply_diffusion(&x, &u, &cfg).values, &u.values) >= 0.0);

    // Linear in the second argument.
    let combo = Volume::from_values(gr, u.values.iter().zip(&v.values).map(|(a, b)| 2.5 * a - b).collect());
    let lc = apply_diffusion(&x, &combo, &cfg).values;
    let lu = apply_diffusion(&x, &u, &cfg).values;
    let lv = apply_diffusion(&x, &v, &cfg).values;
    let want: Vec<f64> = lu.iter().zip(&lv).map(|(a, b)| 2.5 * a - b).collect();
    assert!(rel_err(&lc, &want) <= 1e-12);
}

fn dense_ktk_max_eigenvalue(g: &dbt_core::Geometry) -> f64 {
    let m = build_dense_operator(g).unwrap();
    let n = g.n_voxels();
    let mut ktk = DMatrix::<f64>::zeros(n, n);
    let mtm = m.normal_matrix();
    for a in 0..n {
        for b in 0..n {
            ktk[(a, b)] = mtm.get(a, b);
        }
    }
    // Difference operators built column by column.
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let d = divergence_adjoint(&spatial_gradient(&Volume::from_values(g.grid, e)));
        for a in 0..n {
            ktk[(a, j)] += d.values[a];
        }
    }
    ktk.symmetric_eigenvalues().max()
}

#[test]
fn power_method_against_dense_spectrum() {
    let g = tiny();
    let truth = dense_ktk_max_eigenvalue(&g).sqrt();
    let coarse = estimate_operator_norm(&g, 2);
    assert!((coarse - truth).abs() / truth <= 0.25, "{coarse} vs {truth}");
    let fine = estimate_operator_norm(&g, 50);
    assert!((fine - truth).abs() / truth <= 1e-3, "{fine} vs {truth}");
}

#[test]
fn power_method_identity() {
    let id = dbt_core::DenseOperator::identity(9);
    let gamma = power_method_norm(9, 2, |v, out| {
        let t = dbt_core::LinearOperator::apply_vec(&id, v);
        out.copy_from_slice(&t);
    });
    assert!((gamma - 1.0).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tv_sandwich(seed in 0u64..10_000, beta in 1e-6f64..1.0) {
        let x = random_volume(seed, grid(4, 3, 3));
        let cfg = RegularizerConfig::with_beta(beta);
        let t = tv(&x);
        let tb = tv_beta(&x, &cfg);
        prop_assert!(t <= tb);
        prop_assert!(tb <= t + x.len() as f64 * beta * (1.0 + 1e-12));
    }

    /// Dyadic values keep `x + c` exact, so the differences are unchanged.
    #[test]
    fn tv_translation_invariant(seed in 0u64..10_000, c in -64i32..64) {
        let mut r = rng(seed);
        let gr = grid(4, 4, 2);
        let vals: Vec<f64> = random_vec(&mut r, gr.n_voxels()).iter().map(|v| (v * 1024.0).round() / 1024.0).collect();
        let x = Volume::from_values(gr, vals.clone());
        let shifted = Volume::from_values(gr, vals.iter().map(|v| v + c as f64).collect());
        prop_assert_eq!(tv(&x), tv(&shifted));
    }
}
