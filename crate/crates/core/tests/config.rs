use dbt_core::config::{locate_field, PipelineConfig};
use dbt_core::geometry::GeometryConfig;
use dbt_core::pipeline::Overrides;
use dbt_core::solvers::{LambdaMode, SolverKind, SolverOptions};

fn repo_config(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn defaults_and_round_trip() {
    let cfg = PipelineConfig::from_toml("").unwrap();
    assert_eq!(cfg, PipelineConfig::default());
    assert_eq!(cfg.geometry, GeometryConfig::desk_scale());
    assert_eq!(cfg.solver.checkpoints, vec![5, 15, 30]);
    assert_eq!(cfg.solver.lambda_mode(), LambdaMode::fixed(0.005));

    let shipped = PipelineConfig::load(&repo_config("desk_mc230.toml")).unwrap();
    let back = PipelineConfig::from_toml(&shipped.to_toml()).unwrap();
    assert_eq!(back, shipped);
}

#[test]
fn geometry_round_trip_is_bit_exact() {
    let mut g = GeometryConfig::desk_scale();
    g.grid.dx = 0.1 + 0.2;
    g.arc.height = 700.0 + f64::EPSILON * 512.0;
    g.detector.origin[0] = -4.08 / 3.0;
    let text = toml::to_string(&g).unwrap();
    let back: GeometryConfig = toml::from_str(&text).unwrap();
    assert_eq!(back.grid.dx.to_bits(), g.grid.dx.to_bits());
    assert_eq!(back.arc.height.to_bits(), g.arc.height.to_bits());
    assert_eq!(back.detector.origin[0].to_bits(), g.detector.origin[0].to_bits());
    assert_eq!(back, g);
}

#[test]
fn zero_span_names_field_and_line() {
    let text = "output_dir = \"x\"\n\n[geometry.arc]\nn_angles = 11\narc_span_deg = 0.0\nheight = 700.0\ncenter = [0.0, 0.0, 0.0]\n";
    // The other geometry sections fall back to nothing, so give them too.
    let full = format!(
        "{text}{}",
        section("detector", &GeometryConfig::desk_scale().detector)
            + &section("grid", &GeometryConfig::desk_scale().grid)
    );
    let e = PipelineConfig::from_toml(&full).unwrap_err();
    assert_eq!(e.field, "geometry.arc.arc_span_deg");
    assert_eq!(e.line, Some(5));
    assert!(e.to_string().starts_with("line 5: geometry.arc.arc_span_deg"), "{e}");
}

fn section<T: serde::Serialize>(name: &str, v: &T) -> String {
    format!("\n[geometry.{name}]\n{}", toml::to_string(v).unwrap())
}

#[test]
fn parse_errors_carry_lines() {
    let e = PipelineConfig::from_toml("[solver]\nname = \"sgp\"\nmax_itr = 3\n").unwrap_err();
    assert_eq!(e.line, Some(3));
    assert!(e.message.contains("max_itr"), "{}", e.message);

    let e = PipelineConfig::from_toml("[solver]\nname = \"newton\"\n").unwrap_err();
    assert_eq!(e.line, Some(2));

    let e = PipelineConfig::from_toml("[noise]\nmodel = \"gaussian\"\n").unwrap_err();
    assert!(e.line.is_some());
}

#[test]
fn validation_errors_point_at_fields() {
    let cases: [(&str, &str, Option<usize>); 7] = [
        ("[solver]\ncheckpoints = [15, 5]\n", "solver.checkpoints", Some(2)),
        ("[solver]\nmax_iter = 10\n", "solver.checkpoints", Some(1)),
        ("[solver.sgp]\ngamma = 1.5\n", "solver.sgp.gamma", Some(2)),
        ("[solver]\nname = \"fp\"\n[solver.fp]\ncg_iter = 0\n", "solver.fp.cg_iter", Some(4)),
        ("[simulation]\nrefine = [0, 1, 1]\n", "simulation.refine", Some(2)),
        (
            "[[metrics.roi]]\nname = \"a\"\nkind = \"MC\"\ncenter = [32, 32, 8]\nbackground = [14, 14]\n\n[[metrics.roi]]\nname = \"b\"\nkind = \"MC\"\ncenter = [32, 32, 99]\nbackground = [14, 14]\n",
            "metrics.roi[1].center",
            Some(10),
        ),
        ("[phantom]\n[[phantom.objects]]\nkind = \"MC\"\ncenter = [0.0, 0.0, 8.5]\ndiameter = 230.0\ncontrast = -1.0\n", "phantom.objects[0].contrast", Some(6)),
    ];
    for (text, field, line) in cases {
        let e = PipelineConfig::from_toml(text).unwrap_err();
        assert_eq!(e.field, field, "{text}");
        assert_eq!(e.line, line, "{text}: {e}");
    }
}

#[test]
fn locate_field_handles_dotted_keys() {
    let text = "geometry.arc.n_angles = 0\n[solver]\nlambda.mode = \"fixed\"\n";
    assert_eq!(locate_field(text, "geometry.arc.n_angles"), Some(1));
    assert_eq!(locate_field(text, "solver.lambda.value"), Some(3));
}

#[test]
fn overrides_and_solver_options() {
    let mut cfg = PipelineConfig::default();
    Overrides { solver: Some(SolverKind::Fp), checkpoints: Some(vec![5, 50]), seed: Some(9), ..Default::default() }
        .apply(&mut cfg)
        .unwrap();
    assert_eq!(cfg.solver.max_iter, 50);
    assert_eq!(cfg.noise.seed, 9);
    assert_eq!(cfg.solver.lambda_mode(), LambdaMode::fixed(0.001));
    match cfg.solver.options() {
        // 50 work units at 4 CG iterations per outer step.
        SolverOptions::Fp(o) => assert_eq!(o.outer_iter, 10),
        other => panic!("{other:?}"),
    }

    let bad = Overrides { checkpoints: Some(vec![3, 3]), ..Default::default() };
    let e = bad.apply(&mut PipelineConfig::default()).unwrap_err();
    assert_eq!(e.field, "solver.checkpoints");

    let cfg =
        PipelineConfig::from_toml("[solver]\nmax_iter = 40\ncheckpoints = [5]\n[solver.sgp]\nmax_iter = 3\n").unwrap();
    match cfg.solver.options() {
        SolverOptions::Sgp(o) => assert_eq!(o.max_iter, 40),
        other => panic!("{other:?}"),
    }
}
