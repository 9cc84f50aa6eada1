//! Simulate, reconstruct, evaluate and compare, driven by a [`PipelineConfig`].
//!
//! Output directory layout:
//!
//! ```text
//! manifest.sha256            sha256sum-style checksums of every file below
//! ground_truth.dbtv          simulated truth on the reconstruction grid
//! projections.dbtp
//! recon/<solver>/iter_NNNN.dbtv, final.dbtv, history.csv
//! eval/<solver>/metrics.csv, widths.csv, profile_*.csv, asf_*.csv, slices/*.pgm
//! eval/truth/...             same metrics on the ground truth
//! comparison.csv
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::geometry::Geometry;
use crate::io::{self, Dtype, IoError, ProjectionFile};
use crate::metrics::{self, MetricsError};
use crate::phantom::{simulate_refined, ObjectKind, PhantomError};
use crate::projector::Projector;
use crate::solvers::{self, initial_volume, IterationRecord, Problem, SolverError, SolverKind};
use crate::volume::Volume;

pub const MANIFEST: &str = "manifest.sha256";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Io(#[from] IoError),
    #[error("{path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

impl PipelineError {
    /// Process exit status: 2 config, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Numerical(_) => 3,
            PipelineError::Io(_) | PipelineError::Manifest { .. } => 4,
        }
    }

    fn config(field: &str, message: impl Into<String>) -> Self {
        PipelineError::Config(ConfigError { path: None, field: field.to_string(), line: None, message: message.into() })
    }
}

impl From<PhantomError> for PipelineError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::Invalid { ref field, .. } => PipelineError::config(field, e.to_string()),
            PhantomError::OutsideGrid { .. } => PipelineError::config("phantom.objects", e.to_string()),
            other => PipelineError::Numerical(other.to_string()),
        }
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        PipelineError::config("metrics", e.to_string())
    }
}

fn solver_error(e: SolverError) -> PipelineError {
    match e {
        SolverError::InvalidInput(m) | SolverError::Dimension(m) => PipelineError::config("solver", m),
        other => PipelineError::Numerical(other.to_string()),
    }
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source }.into())
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub solver: Option<SolverKind>,
    /// Raises `max_iter` to the last checkpoint when needed.
    pub checkpoints: Option<Vec<usize>>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<(), ConfigError> {
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.noise.seed = s;
        }
        if let Some(k) = self.solver {
            cfg.solver.name = k;
        }
        if let Some(c) = &self.checkpoints {
            cfg.solver.checkpoints = c.clone();
            if let Some(&last) = c.last() {
                cfg.solver.max_iter = cfg.solver.max_iter.max(last);
            }
        }
        cfg.validate().map_err(|(field, message)| ConfigError {
            path: None,
            field,
            line: None,
            message: format!("{message} (after command-line overrides)"),
        })
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().expect("thread pool").install(f),
        None => f(),
    }
}

// ---------------------------------------------------------------- manifest

/// Checksums of the files in an output directory, keyed by `/`-separated
/// relative path. Stored in `sha256sum` format, sorted by path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    root: PathBuf,
    entries: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let bytes = fs::read(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self, PipelineError> {
        let path = root.join(MANIFEST);
        let mut m = Manifest { root: root.to_path_buf(), entries: BTreeMap::new() };
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(m),
            Err(source) => return Err(IoError::Io { path, source }.into()),
        };
        for (n, line) in text.lines().enumerate() {
            let Some((hash, rel)) = line.split_once("  ") else {
                return Err(PipelineError::Manifest { path, reason: format!("malformed line {}", n + 1) });
            };
            m.entries.insert(rel.to_string(), hash.to_string());
        }
        Ok(m)
    }

    fn rel(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
    }

    pub fn get(&self, path: &Path) -> Option<&str> {
        self.entries.get(&self.rel(path)).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn record(&mut self, path: &Path) -> Result<(), PipelineError> {
        let hash = sha256_file(path)?;
        self.entries.insert(self.rel(path), hash);
        Ok(())
    }

    /// Drops every entry below `dir`.
    pub fn forget_dir(&mut self, dir: &Path) {
        let prefix = format!("{}/", self.rel(dir));
        self.entries.retain(|k, _| !k.starts_with(&prefix));
    }

    /// Fails unless `path` exists, is listed, and matches its checksum.
    pub fn verify(&self, path: &Path) -> Result<(), PipelineError> {
        let actual = sha256_file(path)?;
        match self.get(path) {
            None => {
                Err(PipelineError::Manifest { path: path.to_path_buf(), reason: format!("not listed in {MANIFEST}") })
            }
            Some(h) if h != actual => Err(PipelineError::Manifest {
                path: path.to_path_buf(),
                reason: format!("checksum mismatch with {MANIFEST}"),
            }),
            Some(_) => Ok(()),
        }
    }

    pub fn save(&self) -> Result<(), PipelineError> {
        let mut text = String::new();
        for (rel, hash) in &self.entries {
            let _ = writeln!(text, "{hash}  {rel}");
        }
        io::write_atomic(&self.root.join(MANIFEST), |w| w.write_all(text.as_bytes()))?;
        Ok(())
    }
}

// ---------------------------------------------------------------- paths

pub fn ground_truth_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("ground_truth.dbtv")
}

pub fn projections_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("projections.dbtp")
}

pub fn recon_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("recon").join(cfg.solver.name.name())
}

pub fn checkpoint_path(cfg: &PipelineConfig, k: usize) -> PathBuf {
    recon_dir(cfg).join(format!("iter_{k:04}.dbtv"))
}

pub fn eval_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("eval").join(cfg.solver.name.name())
}

pub fn comparison_path(out: &Path) -> PathBuf {
    out.join("comparison.csv")
}

// ---------------------------------------------------------------- simulate

#[derive(Clone, Debug)]
pub struct SimulateOutput {
    pub ground_truth: PathBuf,
    pub projections: PathBuf,
}

pub fn cmd_simulate(cfg: &PipelineConfig) -> Result<SimulateOutput, PipelineError> {
    let geom = cfg.build_geometry()?;
    let (truth, y) = simulate_refined(&geom, &cfg.phantom, cfg.simulation.refine, &cfg.noise)?;
    create_dir(&cfg.output_dir)?;
    let mut manifest = Manifest::load(&cfg.output_dir)?;
    let out = SimulateOutput { ground_truth: ground_truth_path(cfg), projections: projections_path(cfg) };
    io::write_volume(&out.ground_truth, &truth, Dtype::F64)?;
    io::write_projections(&out.projections, &ProjectionFile::new(y, &geom), Dtype::F64)?;
    manifest.record(&out.ground_truth)?;
    manifest.record(&out.projections)?;
    manifest.save()?;
    log::info!(
        "simulated {} projections of {}x{} pixels into {}",
        geom.n_angles(),
        geom.detector.n_u,
        geom.detector.n_v,
        cfg.output_dir.display()
    );
    Ok(out)
}

// ---------------------------------------------------------------- reconstruct

#[derive(Clone, Debug)]
pub struct ReconstructOutput {
    /// `(requested checkpoint, iteration of the saved iterate, path)`.
    pub checkpoints: Vec<(usize, usize, PathBuf)>,
    pub final_volume: PathBuf,
    pub history: PathBuf,
    pub notes: Vec<String>,
}

/// Writes checkpoint volumes as iterates stream past. Checkpoint `c` gets
/// the last iterate whose iteration count is `<= c`, which for the
/// fixed-point solver is the last outer iterate within the budget.
struct CheckpointWriter<'a> {
    cfg: &'a PipelineConfig,
    grid: crate::geometry::VoxelGrid,
    pending: Vec<usize>,
    last: Option<(usize, Vec<f64>)>,
    written: Vec<(usize, usize, PathBuf)>,
    records: Vec<IterationRecord>,
    error: Option<PipelineError>,
}

impl CheckpointWriter<'_> {
    fn save(&mut self, c: usize, iter: usize, x: &[f64]) {
        if self.error.is_some() {
            return;
        }
        let path = checkpoint_path(self.cfg, c);
        match io::write_volume(&path, &Volume::from_values(self.grid, x.to_vec()), Dtype::F64) {
            Ok(()) => self.written.push((c, iter, path)),
            Err(e) => self.error = Some(e.into()),
        }
    }

    fn observe(&mut self, rec: &IterationRecord, x: &[f64]) {
        self.records.push(rec.clone());
        while let Some(&c) = self.pending.first() {
            if rec.iter < c {
                break;
            }
            if rec.iter == c {
                self.save(c, rec.iter, x);
            } else if let Some((it, prev)) = self.last.take() {
                self.save(c, it, &prev);
                self.last = Some((it, prev));
            }
            self.pending.remove(0);
        }
        self.last = Some((rec.iter, x.to_vec()));
    }
}

pub fn cmd_reconstruct(cfg: &PipelineConfig) -> Result<ReconstructOutput, PipelineError> {
    let geom = cfg.build_geometry()?;
    let mut manifest = Manifest::load(&cfg.output_dir)?;
    let proj_path = projections_path(cfg);
    manifest.verify(&proj_path)?;
    let file = io::read_projections(&proj_path)?;
    check_projections(&file, &geom)?;

    let projector = Projector::new(&geom);
    let s = &cfg.solver;
    let problem = Problem::new(&projector, geom.grid, &file.stack.values, s.regularizer.clone(), s.lambda_mode())
        .map_err(solver_error)?;
    let opts = s.options();
    let x0 = initial_volume(&problem, s.init);

    let dir = recon_dir(cfg);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|source| IoError::Io { path: dir.clone(), source })?;
    }
    create_dir(&dir)?;
    manifest.forget_dir(&dir);

    let mut cw = CheckpointWriter {
        cfg,
        grid: geom.grid,
        pending: s.checkpoints.clone(),
        last: None,
        written: Vec::new(),
        records: Vec::new(),
        error: None,
    };
    let run = solvers::reconstruct_with(&problem, &opts, &x0, &mut |r, x| cw.observe(r, x));
    let history = dir.join("history.csv");

    let result = match run {
        Ok(r) => r,
        Err(e) => {
            // Keep what was written before the failure.
            let reason = format!("failed: {e}");
            write_history(&history, &cw.records, &reason, &[])?;
            manifest.record(&history)?;
            for (_, _, p) in &cw.written {
                manifest.record(p)?;
            }
            manifest.save()?;
            return Err(solver_error(e));
        }
    };
    if let Some(e) = cw.error.take() {
        return Err(e);
    }

    let mut notes = result.diagnostics.clone();
    let last_iter = result.history.last().map_or(0, |r| r.iter);
    for c in std::mem::take(&mut cw.pending) {
        notes.push(format!(
            "checkpoint {c} not reached ({}; stopped at iteration {last_iter}), final iterate saved",
            result.termination
        ));
        cw.save(c, last_iter, &result.volume.values);
    }
    if let Some(e) = cw.error.take() {
        return Err(e);
    }

    let final_volume = dir.join("final.dbtv");
    io::write_volume(&final_volume, &result.volume, Dtype::F64)?;
    write_history(&history, &result.history, &result.termination.to_string(), &notes)?;
    for (_, _, p) in &cw.written {
        manifest.record(p)?;
    }
    manifest.record(&final_volume)?;
    manifest.record(&history)?;
    manifest.save()?;
    for n in &notes {
        log::warn!("{n}");
    }
    log::info!(
        "{}: {} after {} iterations, objective {:e}",
        s.name,
        result.termination,
        result.iterations(),
        result.final_objective()
    );
    Ok(ReconstructOutput { checkpoints: cw.written, final_volume, history, notes })
}

fn check_projections(file: &ProjectionFile, geom: &Geometry) -> Result<(), PipelineError> {
    if !file.matches(geom) {
        return Err(PipelineError::config(
            "geometry",
            "projections were acquired with a different geometry than the config describes",
        ));
    }
    Ok(())
}

fn write_history(
    path: &Path,
    records: &[IterationRecord],
    reason: &str,
    notes: &[String],
) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    solvers::write_history_csv(records, reason, &mut buf)
        .map_err(|source| IoError::Csv { path: path.to_path_buf(), source })?;
    for n in notes {
        buf.extend_from_slice(format!("# note={n}\n").as_bytes());
    }
    io::write_atomic(path, |w| w.write_all(&buf))?;
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub roi: String,
    pub kind: ObjectKind,
    /// Empty for the ground truth.
    pub checkpoint: Option<usize>,
    /// `cnr_mc` or `cnr_mass`.
    pub metric: String,
    pub value: f64,
    /// False when the CNR denominator was zero.
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthRow {
    pub profile: String,
    pub checkpoint: Option<usize>,
    pub fwhm_samples: f64,
    pub width_um: f64,
    pub diameter_um: Option<f64>,
    pub fit_ok: bool,
}

#[derive(Clone, Debug, Default)]
pub struct EvaluateOutput {
    pub metrics: Vec<MetricRow>,
    pub widths: Vec<WidthRow>,
    pub files: Vec<PathBuf>,
}

/// Evaluates every checkpoint of the configured solver, and the ground
/// truth when the output directory has one.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<EvaluateOutput, PipelineError> {
    cfg.build_geometry()?;
    let mut manifest = Manifest::load(&cfg.output_dir)?;
    let mut volumes = Vec::new();
    for &c in &cfg.solver.checkpoints {
        let path = checkpoint_path(cfg, c);
        if !path.exists() {
            return Err(IoError::Io {
                path,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing checkpoint volume"),
            }
            .into());
        }
        manifest.verify(&path)?;
        volumes.push((Some(c), io::read_volume(&path)?));
    }

    let dir = eval_dir(cfg);
    let out = evaluate_set(cfg, &dir, &volumes, &mut manifest)?;

    let truth = ground_truth_path(cfg);
    if truth.exists() {
        manifest.verify(&truth)?;
        let v = io::read_volume(&truth)?;
        evaluate_set(cfg, &cfg.output_dir.join("eval").join("truth"), &[(None, v)], &mut manifest)?;
    }
    manifest.save()?;
    Ok(out)
}

fn label(c: Option<usize>) -> String {
    c.map_or_else(|| "truth".to_string(), |c| format!("iter_{c:04}"))
}

fn evaluate_set(
    cfg: &PipelineConfig,
    dir: &Path,
    volumes: &[(Option<usize>, Volume)],
    manifest: &mut Manifest,
) -> Result<EvaluateOutput, PipelineError> {
    let m = &cfg.metrics;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|source| IoError::Io { path: dir.to_path_buf(), source })?;
    }
    manifest.forget_dir(dir);
    create_dir(dir)?;
    let mut out = EvaluateOutput::default();

    for roi in &m.roi {
        for (c, v) in volumes {
            let (o, b) = (roi.object_roi(), roi.background_roi());
            let (metric, cnr) = match roi.kind {
                ObjectKind::Mc => ("cnr_mc", metrics::cnr_mc(v, &o, &b)?),
                ObjectKind::Ms => ("cnr_mass", metrics::cnr_mass(v, &o, &b)?),
            };
            out.metrics.push(MetricRow {
                roi: roi.name.clone(),
                kind: roi.kind,
                checkpoint: *c,
                metric: metric.into(),
                value: cnr.value,
                valid: cnr.valid,
            });
        }
    }

    for p in &m.profile {
        for (c, v) in volumes {
            let prof = metrics::plane_profile(v, p.slice, p.x, p.y[0]..p.y[1])?;
            let path = dir.join(format!("profile_{}_{}.csv", p.name, label(*c)));
            io::write_profile_csv(&path, &prof)?;
            out.files.push(path);
            let row = match metrics::fit_gaussian(&prof) {
                Ok(fit) => {
                    let f = metrics::fwhm(&fit);
                    WidthRow {
                        profile: p.name.clone(),
                        checkpoint: *c,
                        fwhm_samples: f,
                        width_um: 1000.0 * metrics::width_mm(f, prof.spacing),
                        diameter_um: p.diameter_um,
                        fit_ok: true,
                    }
                }
                Err(e) => {
                    log::warn!("profile {} at {}: {e}", p.name, label(*c));
                    WidthRow {
                        profile: p.name.clone(),
                        checkpoint: *c,
                        fwhm_samples: f64::NAN,
                        width_um: f64::NAN,
                        diameter_um: p.diameter_um,
                        fit_ok: false,
                    }
                }
            };
            out.widths.push(row);
        }
    }

    for a in &m.asf {
        for (c, v) in volumes {
            let bg = [a.background[0], a.background[1], a.center[2]];
            let values = metrics::asf(v, a.center, bg, a.shape)?;
            let path = dir.join(format!("asf_{}_{}.csv", a.name, label(*c)));
            io::write_asf_csv(&path, &values)?;
            out.files.push(path);
        }
    }

    if !m.slices.is_empty() {
        let sdir = dir.join("slices");
        create_dir(&sdir)?;
        let window = m.window.map(|[lo, hi]| (lo, hi));
        for (c, v) in volumes {
            for &k in &m.slices {
                let path = sdir.join(format!("{}_z{k:02}.pgm", label(*c)));
                io::export_slice(v, k, &path, window)?;
                out.files.push(path);
            }
        }
    }

    let metrics_path = dir.join("metrics.csv");
    io::write_csv_rows(&metrics_path, &out.metrics)?;
    let widths_path = dir.join("widths.csv");
    io::write_csv_rows(&widths_path, &out.widths)?;
    out.files.push(metrics_path);
    out.files.push(widths_path);
    for f in &out.files {
        manifest.record(f)?;
    }
    Ok(out)
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(|source| IoError::Csv { path: path.to_path_buf(), source })?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|source| IoError::Csv { path: path.to_path_buf(), source }.into())
}

// ---------------------------------------------------------------- compare

/// Marker written for a run that has no value for a row.
pub const ABSENT: &str = "absent";

#[derive(Clone, Debug, PartialEq)]
pub struct CompareOutput {
    pub path: PathBuf,
    /// Column labels, one per run.
    pub runs: Vec<String>,
    pub rows: Vec<CompareRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub object: String,
    pub metric: String,
    pub checkpoint: usize,
    pub values: Vec<Option<f64>>,
    /// Run with the highest valid CNR; `None` for width rows.
    pub best: Option<usize>,
    /// Max minus min over the present values.
    pub spread: f64,
}

/// (object, metric, checkpoint).
type RowKey = (String, String, usize);

/// Merges the evaluations of several runs into one table keyed by
/// (object, metric, checkpoint) with one column per run. Runs without
/// evaluation output get absent cells.
pub fn cmd_compare(configs: &[PipelineConfig], out_dir: &Path) -> Result<CompareOutput, PipelineError> {
    let Some(first) = configs.first() else {
        return Err(PipelineError::config("", "compare needs at least one config"));
    };
    for (n, c) in configs.iter().enumerate().skip(1) {
        if c.metrics.roi != first.metrics.roi {
            return Err(PipelineError::config(
                "metrics.roi",
                format!("ROI declarations of run {} differ from run 0", n),
            ));
        }
    }

    let mut runs = Vec::new();
    let mut cells: BTreeMap<RowKey, BTreeMap<usize, (f64, bool)>> = BTreeMap::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (n, c) in configs.iter().enumerate() {
        let base = c.solver.name.name().to_string();
        let count = seen.entry(base.clone()).or_insert(0);
        runs.push(if *count == 0 { base.clone() } else { format!("{base}#{count}") });
        *count += 1;

        let dir = eval_dir(c);
        let metrics_path = dir.join("metrics.csv");
        if !metrics_path.exists() {
            log::warn!("no evaluation for run {} in {}", runs[n], dir.display());
            continue;
        }
        let manifest = Manifest::load(&c.output_dir)?;
        manifest.verify(&metrics_path)?;
        for r in read_rows::<MetricRow>(&metrics_path)? {
            let Some(k) = r.checkpoint else { continue };
            cells.entry((r.roi, r.metric, k)).or_default().insert(n, (r.value, r.valid));
        }
        let widths_path = dir.join("widths.csv");
        if widths_path.exists() {
            manifest.verify(&widths_path)?;
            for r in read_rows::<WidthRow>(&widths_path)? {
                let Some(k) = r.checkpoint else { continue };
                cells.entry((r.profile, "width_um".into(), k)).or_default().insert(n, (r.width_um, r.fit_ok));
            }
        }
    }

    // Every declared ROI and checkpoint gets a row, even if no run has it.
    let checkpoints: BTreeSet<usize> = configs.iter().flat_map(|c| c.solver.checkpoints.iter().copied()).collect();
    for roi in &first.metrics.roi {
        let metric = match roi.kind {
            ObjectKind::Mc => "cnr_mc",
            ObjectKind::Ms => "cnr_mass",
        };
        for &k in &checkpoints {
            cells.entry((roi.name.clone(), metric.into(), k)).or_default();
        }
    }

    let mut rows = Vec::new();
    for ((object, metric, checkpoint), by_run) in cells {
        let values: Vec<Option<f64>> = (0..configs.len()).map(|n| by_run.get(&n).map(|v| v.0)).collect();
        let best = metric.starts_with("cnr").then(|| {
            by_run
                .iter()
                .filter(|(_, (v, ok))| *ok && v.is_finite())
                .fold(None::<(usize, f64)>, |b, (&n, &(v, _))| match b {
                    Some((_, bv)) if bv >= v => b,
                    _ => Some((n, v)),
                })
                .map(|(n, _)| n)
        });
        let present: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
        let spread = if present.is_empty() {
            0.0
        } else {
            present.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - present.iter().cloned().fold(f64::INFINITY, f64::min)
        };
        rows.push(CompareRow { object, metric, checkpoint, values, best: best.flatten(), spread });
    }

    let mut text = format!("object,metric,checkpoint,{},best,spread\n", runs.join(","));
    for r in &rows {
        let cells: Vec<String> =
            r.values.iter().map(|v| v.map_or_else(|| ABSENT.to_string(), |x| x.to_string())).collect();
        let best = r.best.map_or(String::new(), |n| runs[n].clone());
        let _ = writeln!(text, "{},{},{},{},{},{}", r.object, r.metric, r.checkpoint, cells.join(","), best, r.spread);
    }
    create_dir(out_dir)?;
    let path = comparison_path(out_dir);
    io::write_atomic(&path, |w| w.write_all(text.as_bytes()))?;
    let mut manifest = Manifest::load(out_dir)?;
    manifest.record(&path)?;
    manifest.save()?;
    Ok(CompareOutput { path, runs, rows })
}
