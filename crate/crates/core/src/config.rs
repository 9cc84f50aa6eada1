//! Pipeline configuration file (TOML).
//!
//! Every section is optional and falls back to the desk-scale defaults.
//! Validation errors carry the dotted field path and, when the field is
//! present in the file, its line number.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::{Geometry, GeometryConfig, GeometryError, VoxelGrid};
use crate::metrics::{AsfNeighborhood, Roi};
use crate::phantom::{NoiseSpec, ObjectKind, PhantomError, PhantomSpec};
use crate::regularizers::RegularizerConfig;
use crate::solvers::{
    CpOptions, FpOptions, Initialization, LambdaMode, SgpOptions, SolverError, SolverKind, SolverOptions,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub geometry: GeometryConfig,
    pub phantom: PhantomSpec,
    pub simulation: SimulationConfig,
    pub noise: NoiseSpec,
    pub solver: SolverConfig,
    pub metrics: MetricsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            output_dir: PathBuf::from("out"),
            geometry: GeometryConfig::desk_scale(),
            phantom: PhantomSpec::default(),
            simulation: SimulationConfig::default(),
            noise: NoiseSpec::none(),
            solver: SolverConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Sub-voxel refinement of the grid the data are simulated on.
    pub refine: [usize; 3],
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { refine: [1, 1, 1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub name: SolverKind,
    /// Iterations at which the iterate is saved, strictly ascending.
    pub checkpoints: Vec<usize>,
    /// Iteration budget. For `fp` this counts outer plus inner CG iterations.
    pub max_iter: usize,
    pub tol: f64,
    /// Defaults to the solver's fixed lambda.
    pub lambda: Option<LambdaMode>,
    pub init: Initialization,
    pub regularizer: RegularizerConfig,
    /// Per-solver tuning. Their `max_iter`/`tol` fields are ignored in
    /// favour of the section-level values.
    pub sgp: SgpOptions,
    pub fp: FpOptions,
    pub cp: CpOptions,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            name: SolverKind::Sgp,
            checkpoints: vec![5, 15, 30],
            max_iter: 30,
            tol: 1e-6,
            lambda: None,
            init: Initialization::default(),
            regularizer: RegularizerConfig::default(),
            sgp: SgpOptions::default(),
            fp: FpOptions::default(),
            cp: CpOptions::default(),
        }
    }
}

impl SolverConfig {
    pub fn lambda_mode(&self) -> LambdaMode {
        self.lambda.unwrap_or(LambdaMode::fixed(self.name.default_lambda()))
    }

    pub fn options(&self) -> SolverOptions {
        match self.name {
            SolverKind::Sgp => {
                SolverOptions::Sgp(SgpOptions { max_iter: self.max_iter, tol: self.tol, ..self.sgp.clone() })
            }
            SolverKind::Fp => {
                let mut o = FpOptions { tol: self.tol, ..self.fp.clone() };
                o.outer_iter = o.outer_for_budget(self.max_iter);
                SolverOptions::Fp(o)
            }
            SolverKind::Cp => {
                SolverOptions::Cp(CpOptions { max_iter: self.max_iter, tol: self.tol, ..self.cp.clone() })
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub roi: Vec<RoiConfig>,
    pub profile: Vec<ProfileConfig>,
    pub asf: Vec<AsfConfig>,
    /// Slices exported as PGM images for every checkpoint.
    pub slices: Vec<usize>,
    /// Fixed `[low, high]` display window; min/max of the slice otherwise.
    pub window: Option<[f64; 2]>,
}

/// An object ROI and its background ROI, both disks in the same slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiConfig {
    pub name: String,
    pub kind: ObjectKind,
    /// Voxel indices `[i, j, k]`.
    pub center: [usize; 3],
    /// Disk diameter in voxels. Defaults: 5 for MC, 40 for MS.
    pub diameter: Option<usize>,
    /// In-plane background center `[i, j]`; the slice is the object's.
    pub background: [usize; 2],
    /// Defaults: 20 for MC, 80 for MS.
    pub background_diameter: Option<usize>,
}

impl RoiConfig {
    pub fn object_roi(&self) -> Roi {
        let d = self.diameter.unwrap_or(match self.kind {
            ObjectKind::Mc => 5,
            ObjectKind::Ms => 40,
        });
        Roi::new(self.center[0], self.center[1], self.center[2], d)
    }

    pub fn background_roi(&self) -> Roi {
        let d = self.background_diameter.unwrap_or(match self.kind {
            ObjectKind::Mc => 20,
            ObjectKind::Ms => 80,
        });
        Roi::new(self.background[0], self.background[1], self.center[2], d)
    }
}

/// Plane profile along y for the FWHM / width measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub name: String,
    pub slice: usize,
    pub x: usize,
    /// Half-open `[start, end)` range of y indices.
    pub y: [usize; 2],
    /// Inserted object diameter, reported next to the measured width.
    pub diameter_um: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsfConfig {
    pub name: String,
    pub center: [usize; 3],
    pub background: [usize; 2],
    #[serde(default)]
    pub shape: AsfNeighborhood,
}

/// Validation or parse failure, pointing into the config file.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = &self.path {
            write!(f, "{}", p.display())?;
            if let Some(l) = self.line {
                write!(f, ":{l}")?;
            }
            write!(f, ": ")?;
        } else if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

impl PipelineConfig {
    /// Parses and validates TOML text.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            ConfigError { path: None, field: String::new(), line, message: e.message().trim().to_string() }
        })?;
        cfg.validate().map_err(|(field, message)| ConfigError {
            line: locate_field(text, &field),
            path: None,
            field,
            message,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: Some(path.to_path_buf()),
            field: String::new(),
            line: None,
            message: format!("cannot read config: {e}"),
        })?;
        Self::from_toml(&text).map_err(|e| ConfigError { path: Some(path.to_path_buf()), ..e })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn build_geometry(&self) -> Result<Geometry, ConfigError> {
        self.geometry.build().map_err(|e| ConfigError {
            path: None,
            field: geometry_field(&e),
            line: None,
            message: e.to_string(),
        })
    }

    /// Checks everything that can be checked without running anything.
    /// Errors are `(dotted field path, message)`.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let geom = self.geometry.build().map_err(|e| (geometry_field(&e), reason(&e)))?;
        let grid = geom.grid;
        self.phantom.validate(&grid).map_err(phantom_field)?;
        self.noise.validate().map_err(phantom_field)?;
        if self.simulation.refine.contains(&0) {
            return Err(("simulation.refine".into(), "factors must be >= 1".into()));
        }
        self.validate_solver()?;
        self.validate_metrics(&grid)
    }

    fn validate_solver(&self) -> Result<(), (String, String)> {
        let s = &self.solver;
        if s.max_iter == 0 {
            return Err(("solver.max_iter".into(), "must be >= 1".into()));
        }
        if !(s.tol >= 0.0 && s.tol.is_finite()) {
            return Err(("solver.tol".into(), format!("must be >= 0, got {}", s.tol)));
        }
        if s.checkpoints.contains(&0) {
            return Err(("solver.checkpoints".into(), "iterations start at 1".into()));
        }
        if s.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(("solver.checkpoints".into(), format!("must be strictly ascending, got {:?}", s.checkpoints)));
        }
        if let Some(&last) = s.checkpoints.last() {
            if last > s.max_iter {
                return Err((
                    "solver.checkpoints".into(),
                    format!("checkpoint {last} exceeds max_iter {}", s.max_iter),
                ));
            }
        }
        match s.lambda_mode() {
            LambdaMode::Fixed { value } if !(value >= 0.0 && value.is_finite()) => {
                return Err(("solver.lambda.value".into(), format!("must be >= 0, got {value}")));
            }
            LambdaMode::Automatic { fallback, .. } if !(fallback >= 0.0 && fallback.is_finite()) => {
                return Err(("solver.lambda.fallback".into(), format!("must be >= 0, got {fallback}")));
            }
            _ => {}
        }
        s.regularizer.validate().map_err(|m| (field_of(&m, "solver.regularizer", "beta/weights"), m))?;
        let checked = match s.options() {
            SolverOptions::Sgp(o) => o.validate(),
            SolverOptions::Fp(o) => o.validate(),
            SolverOptions::Cp(o) => o.validate(),
        };
        checked.map_err(|e| {
            let m = match e {
                SolverError::InvalidInput(m) => m,
                other => other.to_string(),
            };
            (field_of(&m, "solver", s.name.name()), m)
        })?;
        Ok(())
    }

    fn validate_metrics(&self, grid: &VoxelGrid) -> Result<(), (String, String)> {
        let m = &self.metrics;
        let in_grid = |c: [usize; 3]| c[0] < grid.n_x && c[1] < grid.n_y && c[2] < grid.n_z;
        let disk_fits = |i: usize, j: usize, d: usize| {
            let reach = d / 2;
            i >= reach && j >= reach && i + reach < grid.n_x && j + reach < grid.n_y
        };
        for (n, r) in m.roi.iter().enumerate() {
            let field = |f: &str| format!("metrics.roi[{n}].{f}");
            if !in_grid(r.center) {
                return Err((field("center"), format!("{:?} is outside the grid", r.center)));
            }
            let (o, b) = (r.object_roi(), r.background_roi());
            if o.diameter == 0 || !disk_fits(o.i, o.j, o.diameter) {
                return Err((field("diameter"), format!("disk of {} voxels does not fit in the slice", o.diameter)));
            }
            if b.diameter == 0 || !disk_fits(b.i, b.j, b.diameter) {
                return Err((
                    field("background"),
                    format!("disk of {} voxels at {:?} does not fit in the slice", b.diameter, r.background),
                ));
            }
        }
        for (n, p) in m.profile.iter().enumerate() {
            let field = |f: &str| format!("metrics.profile[{n}].{f}");
            if p.slice >= grid.n_z {
                return Err((field("slice"), format!("{} >= n_z = {}", p.slice, grid.n_z)));
            }
            if p.x >= grid.n_x {
                return Err((field("x"), format!("{} >= n_x = {}", p.x, grid.n_x)));
            }
            if p.y[0] >= p.y[1] || p.y[1] > grid.n_y {
                return Err((field("y"), format!("{:?} is not a range inside [0, {})", p.y, grid.n_y)));
            }
        }
        for (n, a) in m.asf.iter().enumerate() {
            let field = |f: &str| format!("metrics.asf[{n}].{f}");
            if !in_grid(a.center) {
                return Err((field("center"), format!("{:?} is outside the grid", a.center)));
            }
            let d = match a.shape {
                AsfNeighborhood::Cross => 3,
                AsfNeighborhood::Disk { diameter } => diameter,
            };
            if !disk_fits(a.center[0], a.center[1], d) {
                return Err((field("center"), "neighbourhood does not fit in the slice".into()));
            }
            if !disk_fits(a.background[0], a.background[1], d) {
                return Err((field("background"), "neighbourhood does not fit in the slice".into()));
            }
        }
        if let Some(&k) = m.slices.iter().find(|&&k| k >= grid.n_z) {
            return Err(("metrics.slices".into(), format!("slice {k} >= n_z = {}", grid.n_z)));
        }
        if let Some([lo, hi]) = m.window {
            if !(lo < hi) {
                return Err(("metrics.window".into(), format!("need low < high, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Field named at the start of a validator message (`"sgp.gamma must ..."`
/// becomes `solver.sgp.gamma`), `prefix.fallback` otherwise.
fn field_of(message: &str, prefix: &str, fallback: &str) -> String {
    let first = message.split_whitespace().next().unwrap_or("").trim_end_matches(',');
    let is_path = !first.is_empty() && first.chars().all(|c| c.is_ascii_lowercase() || c == '_' || c == '.');
    format!("{prefix}.{}", if is_path { first } else { fallback })
}

fn geometry_field(e: &GeometryError) -> String {
    match e {
        GeometryError::Invalid { field, .. } => format!("geometry.{field}"),
        GeometryError::SourceBelowGrid { .. } => "geometry.arc.height".into(),
    }
}

fn reason(e: &GeometryError) -> String {
    match e {
        GeometryError::Invalid { reason, .. } => reason.clone(),
        other => other.to_string(),
    }
}

fn phantom_field(e: PhantomError) -> (String, String) {
    match e {
        PhantomError::Invalid { field, reason } => (field, reason),
        PhantomError::OutsideGrid { index, .. } => (format!("phantom.objects[{index}].center"), e.to_string()),
        other => ("phantom".into(), other.to_string()),
    }
}

/// 1-based line of a byte offset.
fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Finds the line declaring `field` (dotted path, array elements written
/// `name[i]`, alternatives separated by `/` in the last segment). Falls back
/// to the closest enclosing key or table header. `None` when the field only
/// has its default value.
pub fn locate_field(text: &str, field: &str) -> Option<usize> {
    let (stem, last) = match field.rsplit_once('.') {
        Some((s, l)) => (Some(s), l),
        None => (None, field),
    };
    let targets: Vec<String> = last
        .split('/')
        .map(|alt| match stem {
            Some(s) => format!("{s}.{alt}"),
            None => alt.to_string(),
        })
        .collect();
    let keys = key_lines(text);
    for t in &targets {
        if let Some((_, line)) = keys.iter().find(|(k, _)| k == t) {
            return Some(*line);
        }
    }
    // Closest enclosing declaration: drop trailing segments / indices.
    let mut path = targets[0].clone();
    while let Some(cut) = path.rfind(['.', '[']) {
        path.truncate(cut);
        let nested = format!("{path}.");
        if let Some((_, line)) = keys.iter().find(|(k, _)| *k == path).or_else(|| {
            // `a.b.c = ...` declares `a.b`; top-level sections are too coarse.
            let deep = path.contains('.');
            keys.iter().find(|(k, _)| deep && k.starts_with(&nested))
        }) {
            return Some(*line);
        }
    }
    None
}

/// Every key and table header of a TOML document with its full dotted path.
/// Array-of-table entries are indexed `name[i]`.
fn key_lines(text: &str) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    let mut table = String::new();
    let mut counts: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    let mut depth = 0i32;
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if depth == 0 {
            if let Some(inner) = line.strip_prefix("[[").and_then(|l| l.strip_suffix("]]")) {
                let name = normalize_key(inner);
                let idx = counts.entry(name.clone()).or_insert(0);
                table = format!("{name}[{idx}]");
                *idx += 1;
                out.push((table.clone(), line_no));
                continue;
            }
            if let Some(inner) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                table = rebase(&normalize_key(inner), &counts);
                out.push((table.clone(), line_no));
                continue;
            }
            if let Some((k, _)) = line.split_once('=') {
                let key = normalize_key(k);
                let full = if table.is_empty() { key } else { format!("{table}.{key}") };
                out.push((full, line_no));
            }
        }
        depth += bracket_balance(line);
        depth = depth.max(0);
    }
    out
}

/// `[a.b]` after `[[a]]` entries refers to the latest `a[i]`.
fn rebase(name: &str, counts: &std::collections::HashMap<String, usize>) -> String {
    let mut best: Option<(&String, usize)> = None;
    for (k, &c) in counts {
        if name.starts_with(&format!("{k}.")) && best.is_none_or(|(b, _)| k.len() > b.len()) {
            best = Some((k, c));
        }
    }
    match best {
        Some((k, c)) => format!("{k}[{}]{}", c - 1, &name[k.len()..]),
        None => name.to_string(),
    }
}

fn normalize_key(k: &str) -> String {
    k.split('.').map(|s| s.trim().trim_matches('"')).collect::<Vec<_>>().join(".")
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_str = !in_str,
            '#' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Net count of open brackets/braces outside strings in the value part.
fn bracket_balance(line: &str) -> i32 {
    let value = line.split_once('=').map(|(_, v)| v).unwrap_or(line);
    let mut in_str = false;
    let mut d = 0;
    for c in value.chars() {
        match c {
            '"' => in_str = !in_str,
            '[' | '{' if !in_str => d += 1,
            ']' | '}' if !in_str => d -= 1,
            _ => {}
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locates_keys_tables_and_array_entries() {
        let text = "output_dir = \"o\"\n\n[geometry.arc]\nn_angles = 11 # views\narc_span_deg = 0\n\n[[metrics.roi]]\nname = \"a\"\n[[metrics.roi]]\nname = \"b\"\ncenter = [1,\n  2, 3]\nkind = \"MC\"\n";
        assert_eq!(locate_field(text, "output_dir"), Some(1));
        assert_eq!(locate_field(text, "geometry.arc.arc_span_deg"), Some(5));
        assert_eq!(locate_field(text, "metrics.roi[1].center"), Some(11));
        assert_eq!(locate_field(text, "metrics.roi[1].kind"), Some(13));
        assert_eq!(locate_field(text, "metrics.roi[0].diameter"), Some(7));
        assert_eq!(locate_field(text, "geometry.grid.n_x/n_y/n_z"), None);
        assert_eq!(locate_field("[geometry.grid]\nn_y = 0\n", "geometry.grid.n_x/n_y/n_z"), Some(2));
    }
}
