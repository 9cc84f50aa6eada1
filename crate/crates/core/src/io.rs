//! File formats.
//!
//! Volume file (`.dbtv`), little-endian throughout:
//!
//! ```text
//! "DBTV" | version u32 | n_x u32 | n_y u32 | n_z u32 | dx dy dz f64 | origin 3 x f64 | dtype u32 | values
//! ```
//!
//! Projection file (`.dbtp`):
//!
//! ```text
//! "DBTP" | version u32 | n_angles u32 | n_u u32 | n_v u32 | pitch f64 | origin 3 x f64 | dtype u32
//!        | angles n_angles x f64 | values (angle, row, column)
//! ```
//!
//! `dtype` is 4 for f32 and 8 for f64. Every writer goes through a temporary
//! file in the target directory that is renamed into place once complete.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{Geometry, Point3, VoxelGrid};
use crate::metrics::Profile;
use crate::volume::{ProjectionStack, Volume};

pub const FORMAT_VERSION: u32 = 1;
const VOLUME_MAGIC: &[u8; 4] = b"DBTV";
const PROJECTION_MAGIC: &[u8; 4] = b"DBTP";
const VOLUME_HEADER: usize = 4 + 4 + 3 * 4 + 6 * 8 + 4;
const PROJECTION_HEADER: usize = 4 + 4 + 3 * 4 + 8 + 3 * 8 + 4;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a {expected} file")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{path}: format version {found}, this build reads version {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated ({found} bytes, {expected} expected)")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: inconsistent file: {reason}")]
    Inconsistent { path: PathBuf, reason: String },
    #[error("{path}: stored as {found:?}, {requested:?} requested")]
    DtypeMismatch { path: PathBuf, found: Dtype, requested: Dtype },
    #[error("slice {k} out of range (volume has {n_z} slices)")]
    SliceOutOfRange { k: usize, n_z: usize },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            4 => Some(Dtype::F32),
            8 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn size(self) -> usize {
        self.code() as usize
    }
}

/// Writes a file atomically: `fill` writes into a temporary file next to
/// `path`, which then replaces `path`.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

fn write_values(w: &mut dyn Write, values: &[f64], dtype: Dtype) -> std::io::Result<()> {
    match dtype {
        Dtype::F32 => values.iter().try_for_each(|&v| w.write_f32::<LittleEndian>(v as f32)),
        Dtype::F64 => values.iter().try_for_each(|&v| w.write_f64::<LittleEndian>(v)),
    }
}

fn read_values(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => bytes.chunks_exact(4).map(|c| LittleEndian::read_f32(c) as f64).collect(),
        Dtype::F64 => bytes.chunks_exact(8).map(LittleEndian::read_f64).collect(),
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>, IoError> {
    let mut buf = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(io_err(path))?;
    Ok(buf)
}

/// Little-endian field reader over a byte buffer whose length was checked.
struct Fields<'b> {
    bytes: &'b [u8],
    at: usize,
}

impl Fields<'_> {
    fn u32(&mut self) -> u32 {
        let v = LittleEndian::read_u32(&self.bytes[self.at..]);
        self.at += 4;
        v
    }

    fn f64(&mut self) -> f64 {
        let v = LittleEndian::read_f64(&self.bytes[self.at..]);
        self.at += 8;
        v
    }

    fn point(&mut self) -> Point3 {
        [self.f64(), self.f64(), self.f64()]
    }
}

/// Magic and version checks shared by both formats.
fn open_header<'b>(
    path: &Path,
    bytes: &'b [u8],
    magic: &[u8; 4],
    kind: &'static str,
    header_len: usize,
) -> Result<Fields<'b>, IoError> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        if bytes.len() < 4 && magic.starts_with(bytes) {
            return Err(IoError::Truncated { path: path.to_path_buf(), expected: header_len, found: bytes.len() });
        }
        return Err(IoError::BadMagic { path: path.to_path_buf(), expected: kind });
    }
    if bytes.len() >= 8 {
        let version = LittleEndian::read_u32(&bytes[4..8]);
        if version != FORMAT_VERSION {
            return Err(IoError::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
    }
    if bytes.len() < header_len {
        return Err(IoError::Truncated { path: path.to_path_buf(), expected: header_len, found: bytes.len() });
    }
    Ok(Fields { bytes, at: 8 })
}

fn check_payload(path: &Path, bytes: &[u8], start: usize, count: usize, dtype: Dtype) -> Result<(), IoError> {
    let expected = start + count * dtype.size();
    if bytes.len() < expected {
        return Err(IoError::Truncated { path: path.to_path_buf(), expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(IoError::Inconsistent {
            path: path.to_path_buf(),
            reason: format!("{} bytes after the payload", bytes.len() - expected),
        });
    }
    Ok(())
}

fn dtype_field(path: &Path, code: u32) -> Result<Dtype, IoError> {
    Dtype::from_code(code)
        .ok_or_else(|| IoError::Inconsistent { path: path.to_path_buf(), reason: format!("unknown dtype code {code}") })
}

fn count_u32(path: &Path, n: usize, what: &str) -> Result<u32, IoError> {
    u32::try_from(n).map_err(|_| IoError::Inconsistent {
        path: path.to_path_buf(),
        reason: format!("{what} = {n} does not fit in 32 bits"),
    })
}

pub fn write_volume(path: &Path, v: &Volume, dtype: Dtype) -> Result<(), IoError> {
    let g = v.grid;
    let dims = [count_u32(path, g.n_x, "n_x")?, count_u32(path, g.n_y, "n_y")?, count_u32(path, g.n_z, "n_z")?];
    write_atomic(path, |w| {
        w.write_all(VOLUME_MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        for d in dims {
            w.write_u32::<LittleEndian>(d)?;
        }
        for s in [g.dx, g.dy, g.dz] {
            w.write_f64::<LittleEndian>(s)?;
        }
        for o in g.origin {
            w.write_f64::<LittleEndian>(o)?;
        }
        w.write_u32::<LittleEndian>(dtype.code())?;
        write_values(w, &v.values, dtype)
    })
}

/// Reads a volume stored with either dtype.
pub fn read_volume(path: &Path) -> Result<Volume, IoError> {
    read_volume_impl(path, None)
}

/// Reads a volume, failing unless it was stored as `dtype`.
pub fn read_volume_as(path: &Path, dtype: Dtype) -> Result<Volume, IoError> {
    read_volume_impl(path, Some(dtype))
}

fn read_volume_impl(path: &Path, requested: Option<Dtype>) -> Result<Volume, IoError> {
    let bytes = read_all(path)?;
    let mut f = open_header(path, &bytes, VOLUME_MAGIC, "volume", VOLUME_HEADER)?;
    let (n_x, n_y, n_z) = (f.u32() as usize, f.u32() as usize, f.u32() as usize);
    let (dx, dy, dz) = (f.f64(), f.f64(), f.f64());
    let origin = f.point();
    let dtype = dtype_field(path, f.u32())?;
    if let Some(req) = requested {
        if req != dtype {
            return Err(IoError::DtypeMismatch { path: path.to_path_buf(), found: dtype, requested: req });
        }
    }
    let grid = VoxelGrid { n_x, n_y, n_z, dx, dy, dz, origin };
    if n_x == 0 || n_y == 0 || n_z == 0 || ![dx, dy, dz].iter().all(|s| *s > 0.0 && s.is_finite()) {
        return Err(IoError::Inconsistent {
            path: path.to_path_buf(),
            reason: format!("invalid grid {n_x}x{n_y}x{n_z} with spacing ({dx}, {dy}, {dz})"),
        });
    }
    check_payload(path, &bytes, VOLUME_HEADER, grid.n_voxels(), dtype)?;
    Ok(Volume::from_values(grid, read_values(&bytes[VOLUME_HEADER..], dtype)))
}

/// Projection data with the acquisition metadata stored alongside it.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionFile {
    pub stack: ProjectionStack,
    pub pitch: f64,
    pub origin: Point3,
    pub angles_deg: Vec<f64>,
}

impl ProjectionFile {
    pub fn new(stack: ProjectionStack, geom: &Geometry) -> Self {
        ProjectionFile {
            stack,
            pitch: geom.detector.pitch,
            origin: geom.detector.origin,
            angles_deg: geom.angles_deg().to_vec(),
        }
    }

    /// Whether the stored metadata describes `geom`'s acquisition.
    pub fn matches(&self, geom: &Geometry) -> bool {
        self.stack.matches(geom)
            && self.pitch == geom.detector.pitch
            && self.origin == geom.detector.origin
            && self.angles_deg == geom.angles_deg()
    }
}

pub fn write_projections(path: &Path, p: &ProjectionFile, dtype: Dtype) -> Result<(), IoError> {
    let s = &p.stack;
    if p.angles_deg.len() != s.n_angles || s.values.len() != s.n_angles * s.n_u * s.n_v {
        return Err(IoError::Inconsistent {
            path: path.to_path_buf(),
            reason: "angle list or payload does not match the stack dimensions".into(),
        });
    }
    let dims =
        [count_u32(path, s.n_angles, "n_angles")?, count_u32(path, s.n_u, "n_u")?, count_u32(path, s.n_v, "n_v")?];
    write_atomic(path, |w| {
        w.write_all(PROJECTION_MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        for d in dims {
            w.write_u32::<LittleEndian>(d)?;
        }
        w.write_f64::<LittleEndian>(p.pitch)?;
        for o in p.origin {
            w.write_f64::<LittleEndian>(o)?;
        }
        w.write_u32::<LittleEndian>(dtype.code())?;
        for a in &p.angles_deg {
            w.write_f64::<LittleEndian>(*a)?;
        }
        write_values(w, &s.values, dtype)
    })
}

pub fn read_projections(path: &Path) -> Result<ProjectionFile, IoError> {
    read_projections_impl(path, None)
}

pub fn read_projections_as(path: &Path, dtype: Dtype) -> Result<ProjectionFile, IoError> {
    read_projections_impl(path, Some(dtype))
}

fn read_projections_impl(path: &Path, requested: Option<Dtype>) -> Result<ProjectionFile, IoError> {
    let bytes = read_all(path)?;
    let mut f = open_header(path, &bytes, PROJECTION_MAGIC, "projection", PROJECTION_HEADER)?;
    let (n_angles, n_u, n_v) = (f.u32() as usize, f.u32() as usize, f.u32() as usize);
    let pitch = f.f64();
    let origin = f.point();
    let dtype = dtype_field(path, f.u32())?;
    if let Some(req) = requested {
        if req != dtype {
            return Err(IoError::DtypeMismatch { path: path.to_path_buf(), found: dtype, requested: req });
        }
    }
    if n_angles == 0 || n_u == 0 || n_v == 0 || !(pitch > 0.0 && pitch.is_finite()) {
        return Err(IoError::Inconsistent {
            path: path.to_path_buf(),
            reason: format!("invalid stack {n_angles}x{n_v}x{n_u} with pitch {pitch}"),
        });
    }
    let angles_end = PROJECTION_HEADER + 8 * n_angles;
    if bytes.len() < angles_end {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            expected: angles_end + n_angles * n_u * n_v * dtype.size(),
            found: bytes.len(),
        });
    }
    let angles_deg = read_values(&bytes[PROJECTION_HEADER..angles_end], Dtype::F64);
    check_payload(path, &bytes, angles_end, n_angles * n_u * n_v, dtype)?;
    Ok(ProjectionFile {
        stack: ProjectionStack { n_u, n_v, n_angles, values: read_values(&bytes[angles_end..], dtype) },
        pitch,
        origin,
        angles_deg,
    })
}

/// Gray level of a constant slice under the automatic window.
pub const MID_GRAY: u16 = 32768;

/// Writes slice `k` as a 16-bit binary PGM, rows along y. Values are mapped
/// linearly from `window` (default: the slice's min and max) to 0..65535.
pub fn export_slice(v: &Volume, k: usize, path: &Path, window: Option<(f64, f64)>) -> Result<(), IoError> {
    let g = v.grid;
    if k >= g.n_z {
        return Err(IoError::SliceOutOfRange { k, n_z: g.n_z });
    }
    let slice = v.slice(k);
    let (lo, hi) = window
        .unwrap_or_else(|| slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x))));
    let gray = |x: f64| -> u16 {
        if hi > lo {
            ((x - lo) / (hi - lo) * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            MID_GRAY
        }
    };
    write_atomic(path, |w| {
        write!(w, "P5\n{} {}\n65535\n", g.n_x, g.n_y)?;
        // PGM stores 16-bit samples most significant byte first.
        slice.iter().try_for_each(|&x| w.write_all(&gray(x).to_be_bytes()))
    })
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv { path: path.to_path_buf(), source }
}

/// Writes serializable rows as CSV with a header line.
pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(csv_err(path))?;
        }
        w.flush().map_err(io_err(path))?;
    }
    write_atomic(path, |w| w.write_all(&buf))
}

/// Two columns: position along y (mm) and value.
pub fn write_profile_csv(path: &Path, p: &Profile) -> Result<(), IoError> {
    let mut buf = String::from("y_mm,value\n");
    for (t, v) in p.samples.iter().enumerate() {
        buf.push_str(&format!("{:e},{:e}\n", (p.y_start + t) as f64 * p.spacing, v));
    }
    write_atomic(path, |w| w.write_all(buf.as_bytes()))
}

/// Two columns: slice index and ASF value.
pub fn write_asf_csv(path: &Path, asf: &[f64]) -> Result<(), IoError> {
    let mut buf = String::from("slice,asf\n");
    for (k, v) in asf.iter().enumerate() {
        buf.push_str(&format!("{k},{v:e}\n"));
    }
    write_atomic(path, |w| w.write_all(buf.as_bytes()))
}
