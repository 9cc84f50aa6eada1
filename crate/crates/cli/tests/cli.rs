use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[geometry.detector]
n_u = 48
n_v = 48
pitch = 0.085
origin = [-2.04, -2.04, 0.0]

[geometry.arc]
n_angles = 11
arc_span_deg = 30.0
height = 700.0
center = [0.0, 0.0, 0.0]

[geometry.grid]
n_x = 32
n_y = 32
n_z = 4
dx = 0.09
dy = 0.09
dz = 1.0
origin = [-1.44, -1.44, 0.0]

[phantom]
texture_seed = 1

[[phantom.objects]]
kind = "MC"
center = [-0.675, 0.045, 2.5]
diameter = 230.0
contrast = 0.25

[noise]
model = "gaussian"
sigma = 0.01

[solver]
checkpoints = [2, 4]
max_iter = 4

[solver.lambda]
mode = "fixed"
value = 0.5

[[metrics.roi]]
name = "mc"
kind = "MC"
center = [8, 16, 2]
background = [16, 6]
background_diameter = 9
"#;

fn dbt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbt-recon")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn zero_span_is_a_config_error_with_location() {
    let dir = setup();
    let bad = SMALL.replace("arc_span_deg = 30.0", "arc_span_deg = 0.0");
    fs::write(dir.path().join("bad.toml"), &bad).unwrap();
    let line = bad.lines().position(|l| l.starts_with("arc_span_deg")).unwrap() + 1;
    let o = dbt(&["simulate", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains(&format!("bad.toml:{line}: geometry.arc.arc_span_deg")), "{err}");
}

#[test]
fn unknown_key_and_bad_flag() {
    let dir = setup();
    fs::write(dir.path().join("typo.toml"), "[solver]\nmax_iters = 4\n").unwrap();
    let o = dbt(&["simulate", "--config", "typo.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("typo.toml:2:"), "{}", stderr(&o));

    let o = dbt(&["reconstruct", "--config", "small.toml", "--solver", "newton"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = dbt(&["reconstruct", "--config", "small.toml", "--checkpoints", "4,2"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("solver.checkpoints"));
}

#[test]
fn pipeline_through_the_binary() {
    let dir = setup();
    let o = dbt(&["reconstruct", "--config", "small.toml", "--output", "run"], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    for cmd in ["simulate", "reconstruct", "evaluate"] {
        let o = dbt(&[cmd, "--config", "small.toml", "--output", "run", "--threads", "2"], dir.path());
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let run = dir.path().join("run");
    for f in ["recon/sgp/iter_0002.dbtv", "recon/sgp/iter_0004.dbtv", "recon/sgp/final.dbtv", "eval/sgp/metrics.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }

    // FP with the checkpoint list overridden on the command line.
    let args = ["--config", "small.toml", "--output", "run", "--solver", "fp", "--checkpoints", "5,10"];
    for cmd in ["reconstruct", "evaluate"] {
        let o = dbt(&[&[cmd][..], &args[..]].concat(), dir.path());
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    assert!(run.join("recon/fp/iter_0010.dbtv").exists());

    let cfg_fp = SMALL
        .replace("[solver]\n", "[solver]\nname = \"fp\"\n")
        .replace("[2, 4]", "[5, 10]")
        .replace("max_iter = 4", "max_iter = 10");
    fs::write(dir.path().join("fp.toml"), cfg_fp).unwrap();
    let o = dbt(&["compare", "--config", "small.toml", "--config", "fp.toml", "--output", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(run.join("comparison.csv")).unwrap();
    assert!(table.starts_with("object,metric,checkpoint,sgp,fp,best,spread\n"), "{table}");
    // Checkpoint 2 exists only for sgp, 5 only for fp.
    assert!(table.contains("mc,cnr_mc,2,") && table.contains(",absent,"), "{table}");
}

#[test]
fn seed_controls_the_noise() {
    let dir = setup();
    let sim = |out: &str, seed: &str| {
        let o = dbt(&["simulate", "--config", "small.toml", "--output", out, "--seed", seed], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(dir.path().join(out).join("projections.dbtp")).unwrap()
    };
    let a = sim("a", "3");
    assert_eq!(sim("b", "3"), a);
    assert_ne!(sim("c", "4"), a);
}
