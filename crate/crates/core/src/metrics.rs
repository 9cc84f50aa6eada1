//! Image-quality figures for reconstructed volumes: contrast-to-noise ratios
//! for masses and microcalcifications, plane profiles with a Gaussian fit
//! (FWHM and physical width), and the artifact spread function along z.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::Volume;

/// `2 sqrt(2 ln 2)`: FWHM of a Gaussian in units of its standard deviation.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

const MAX_SWEEPS: usize = 200;
const FIT_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("ROI centered at ({i}, {j}) in slice {k} with diameter {diameter} leaves the grid")]
    RoiOutside { i: usize, j: usize, k: usize, diameter: usize },
    #[error("ROI diameter must be >= 1")]
    RoiTooSmall,
    #[error("ROIs lie in different slices ({0} and {1})")]
    SliceMismatch(usize, usize),
    #[error("profile index out of bounds: {0}")]
    ProfileOutOfBounds(String),
    #[error("profile has {0} samples, at least 5 are needed for a fit")]
    TooFewSamples(usize),
    #[error("profile has no strict interior maximum")]
    NoInteriorPeak,
    #[error("object and background coincide in the focus slice; ASF undefined")]
    AsfUndefined,
}

/// Disk of voxels inside one slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    /// Diameter in voxels.
    pub diameter: usize,
}

impl Roi {
    pub fn new(i: usize, j: usize, k: usize, diameter: usize) -> Self {
        Roi { i, j, k, diameter }
    }

    /// Offsets `(di, dj)` of the disk `di^2 + dj^2 <= (diameter / 2)^2`.
    fn offsets(&self) -> Vec<(isize, isize)> {
        let r = self.diameter as f64 / 2.0;
        let reach = r.floor() as isize;
        let mut out = Vec::new();
        for dj in -reach..=reach {
            for di in -reach..=reach {
                if ((di * di + dj * dj) as f64) <= r * r {
                    out.push((di, dj));
                }
            }
        }
        out
    }

    /// Values of the voxels inside the disk.
    pub fn values(&self, vol: &Volume) -> Result<Vec<f64>, MetricsError> {
        if self.diameter == 0 {
            return Err(MetricsError::RoiTooSmall);
        }
        let g = vol.grid;
        let outside = MetricsError::RoiOutside { i: self.i, j: self.j, k: self.k, diameter: self.diameter };
        if self.k >= g.n_z {
            return Err(outside);
        }
        let mut vals = Vec::new();
        for (di, dj) in self.offsets() {
            let i = self.i as isize + di;
            let j = self.j as isize + dj;
            if i < 0 || j < 0 || i >= g.n_x as isize || j >= g.n_y as isize {
                return Err(outside);
            }
            vals.push(vol.get(i as usize, j as usize, self.k));
        }
        Ok(vals)
    }
}

/// Mean and population standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// A ratio that may have hit a zero denominator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cnr {
    pub value: f64,
    /// False when the denominator is zero; `value` is then the raw quotient.
    pub valid: bool,
}

impl Cnr {
    fn ratio(num: f64, den: f64) -> Self {
        Cnr { value: num / den, valid: den != 0.0 && den.is_finite() }
    }
}

fn same_slice(a: &Roi, b: &Roi) -> Result<(), MetricsError> {
    if a.k != b.k {
        return Err(MetricsError::SliceMismatch(a.k, b.k));
    }
    Ok(())
}

/// `(mu_MS - mu_BG) / (sigma_MS - sigma_BG)`.
pub fn cnr_mass(vol: &Volume, roi_ms: &Roi, roi_bg: &Roi) -> Result<Cnr, MetricsError> {
    same_slice(roi_ms, roi_bg)?;
    let (m_ms, s_ms) = mean_std(&roi_ms.values(vol)?);
    let (m_bg, s_bg) = mean_std(&roi_bg.values(vol)?);
    Ok(Cnr::ratio(m_ms - m_bg, s_ms - s_bg))
}

/// `(max_MC - mu_BG) / sigma_BG`.
pub fn cnr_mc(vol: &Volume, roi_mc: &Roi, roi_bg: &Roi) -> Result<Cnr, MetricsError> {
    same_slice(roi_mc, roi_bg)?;
    let peak = roi_mc.values(vol)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let (m_bg, s_bg) = mean_std(&roi_bg.values(vol)?);
    Ok(Cnr::ratio(peak - m_bg, s_bg))
}

/// Samples along y at fixed slice and x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub samples: Vec<f64>,
    /// Sample spacing, mm.
    pub spacing: f64,
    pub slice: usize,
    pub x: usize,
    pub y_start: usize,
}

pub fn plane_profile(vol: &Volume, slice: usize, x: usize, y_range: Range<usize>) -> Result<Profile, MetricsError> {
    let g = vol.grid;
    if slice >= g.n_z || x >= g.n_x || y_range.end > g.n_y || y_range.start >= y_range.end {
        return Err(MetricsError::ProfileOutOfBounds(format!(
            "slice {slice}, x {x}, y {y_range:?} in a {}x{}x{} grid",
            g.n_x, g.n_y, g.n_z
        )));
    }
    Ok(Profile {
        samples: y_range.clone().map(|j| vol.get(x, j, slice)).collect(),
        spacing: g.dy,
        slice,
        x,
        y_start: y_range.start,
    })
}

/// `amplitude * exp(-(t - mean)^2 / (2 d^2)) + offset` in sample units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub mean: f64,
    pub d: f64,
    pub offset: f64,
    pub residual_norm: f64,
    pub sweeps: usize,
}

impl GaussianFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude * (-(t - self.mean).powi(2) / (2.0 * self.d * self.d)).exp() + self.offset
    }
}

/// Best amplitude and offset for fixed mean and width, with the squared residual.
fn linear_part(y: &[f64], m: f64, d: f64) -> (f64, f64, f64) {
    let n = y.len() as f64;
    let (mut sg, mut sgg, mut sy, mut sgy) = (0.0, 0.0, 0.0, 0.0);
    let basis: Vec<f64> = (0..y.len()).map(|t| (-((t as f64 - m).powi(2)) / (2.0 * d * d)).exp()).collect();
    for (g, v) in basis.iter().zip(y) {
        sg += g;
        sgg += g * g;
        sy += v;
        sgy += g * v;
    }
    let det = n * sgg - sg * sg;
    let (a, c) =
        if det.abs() > 1e-300 { ((n * sgy - sg * sy) / det, (sgg * sy - sg * sgy) / det) } else { (0.0, sy / n) };
    let r2 = basis.iter().zip(y).map(|(g, v)| (a * g + c - v).powi(2)).sum();
    (a, c, r2)
}

fn golden_section(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-13 * (1.0 + lo.abs().max(hi.abs())) {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    (lo + hi) / 2.0
}

/// Least-squares Gaussian fit: moment start, then alternating golden-section
/// searches over the mean and the width with amplitude and offset solved
/// exactly at every trial.
pub fn fit_gaussian(profile: &Profile) -> Result<GaussianFit, MetricsError> {
    let y = &profile.samples;
    let n = y.len();
    if n < 5 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let (peak_at, peak) =
        y.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (t, &v)| if v > acc.1 { (t, v) } else { acc });
    if peak_at == 0 || peak_at == n - 1 || !(peak > y[0] && peak > y[n - 1]) {
        return Err(MetricsError::NoInteriorPeak);
    }

    let base = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = y.iter().map(|v| v - base).collect();
    let wsum: f64 = w.iter().sum();
    let mut m = (0..n).map(|t| t as f64 * w[t]).sum::<f64>() / wsum;
    let var = (0..n).map(|t| (t as f64 - m).powi(2) * w[t]).sum::<f64>() / wsum;
    let t_max = (n - 1) as f64;
    let (d_lo, d_hi) = (0.05, 2.0 * n as f64);
    let mut d = var.sqrt().clamp(0.5, n as f64);

    let resid = |m: f64, d: f64| linear_part(y, m, d).2;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let m_new = golden_section((m - 2.0 * d).max(0.0), (m + 2.0 * d).min(t_max), |mm| resid(mm, d));
        let d_new = golden_section((d / 3.0).max(d_lo), (d * 3.0).min(d_hi), |dd| resid(m_new, dd));
        let moved = (m_new - m).abs() + (d_new - d).abs();
        m = m_new;
        d = d_new;
        if moved <= FIT_TOL * (1.0 + m.abs() + d) {
            break;
        }
    }
    let (amplitude, offset, r2) = linear_part(y, m, d);
    Ok(GaussianFit { amplitude, mean: m, d, offset, residual_norm: r2.sqrt(), sweeps })
}

/// Full width at half maximum in samples.
pub fn fwhm(fit: &GaussianFit) -> f64 {
    FWHM_PER_SIGMA * fit.d
}

/// Physical width (mm) of a FWHM measured in samples of spacing `dy` (mm).
pub fn width_mm(fwhm: f64, dy: f64) -> f64 {
    fwhm * dy
}

/// In-slice neighbourhood averaged by [`asf`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum AsfNeighborhood {
    /// Center voxel and its four in-plane neighbours.
    #[default]
    Cross,
    Disk {
        diameter: usize,
    },
}

impl AsfNeighborhood {
    fn offsets(&self) -> Vec<(isize, isize)> {
        match *self {
            AsfNeighborhood::Cross => vec![(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)],
            AsfNeighborhood::Disk { diameter } => Roi::new(0, 0, 0, diameter).offsets(),
        }
    }
}

fn neighborhood_mean(vol: &Volume, c: (usize, usize), k: usize, offs: &[(isize, isize)]) -> Result<f64, MetricsError> {
    let g = vol.grid;
    let mut s = 0.0;
    for &(di, dj) in offs {
        let i = c.0 as isize + di;
        let j = c.1 as isize + dj;
        if i < 0 || j < 0 || i >= g.n_x as isize || j >= g.n_y as isize {
            return Err(MetricsError::RoiOutside { i: c.0, j: c.1, k, diameter: 3 });
        }
        s += vol.get(i as usize, j as usize, k);
    }
    Ok(s / offs.len() as f64)
}

/// `ASF(z) = |mu_MC(z) - mu_BG(z)| / |mu_MC(zf) - mu_BG(zf)|` for every slice,
/// with `zf` the slice of `mc_center`. Only the in-plane indices of
/// `bg_center` are used.
pub fn asf(
    vol: &Volume,
    mc_center: [usize; 3],
    bg_center: [usize; 3],
    shape: AsfNeighborhood,
) -> Result<Vec<f64>, MetricsError> {
    let offs = shape.offsets();
    let g = vol.grid;
    if mc_center[2] >= g.n_z {
        return Err(MetricsError::ProfileOutOfBounds(format!("focus slice {}", mc_center[2])));
    }
    let diff = |k: usize| -> Result<f64, MetricsError> {
        let a = neighborhood_mean(vol, (mc_center[0], mc_center[1]), k, &offs)?;
        let b = neighborhood_mean(vol, (bg_center[0], bg_center[1]), k, &offs)?;
        Ok((a - b).abs())
    };
    let focus = diff(mc_center[2])?;
    if !(focus > 0.0 && focus.is_finite()) {
        return Err(MetricsError::AsfUndefined);
    }
    (0..g.n_z).map(|k| Ok(diff(k)? / focus)).collect()
}
