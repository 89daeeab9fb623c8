//! Master masks: synthesis, ingestion, transmission transforms and the
//! statistics used to characterize them.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::io;
use crate::rng::{self, stream};
use crate::spectrum::{radial_power_spectrum, spectrum_summary, RadialSpectrum, SpectrumSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeckleParams {
    pub rows: usize,
    pub cols: usize,
    /// Standard deviation of the Gaussian smoothing kernel, in pixels.
    pub correlation_px: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub seed: u64,
}

impl SpeckleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.correlation_px >= 0.5 && self.correlation_px.is_finite()) {
            return Err(Error::Argument(format!(
                "correlation_px must be at least 0.5, got {}",
                self.correlation_px
            )));
        }
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::Argument(format!(
                "need 0 <= t_min < t_max <= 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        let min_side = 8.0 * self.correlation_px;
        if (self.rows as f64) < min_side || (self.cols as f64) < min_side {
            return Err(Error::Argument(format!(
                "{}x{} mask is smaller than 8 correlation lengths ({min_side} px)",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { seed: u64, params: SpeckleParams },
    Ingested { path: PathBuf },
    Derived { from: Box<Provenance>, transform: String },
}

/// A transmission map with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterMask {
    grid: Grid2D,
    pitch_um: f64,
    label: String,
    provenance: Provenance,
}

impl MasterMask {
    pub fn new(grid: Grid2D, pitch_um: f64, label: impl Into<String>, provenance: Provenance) -> Result<Self> {
        check_transmission(&grid)?;
        let grid = grid.with_pitch(pitch_um)?;
        Ok(MasterMask { grid, pitch_um, label: label.into(), provenance })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn pitch_um(&self) -> f64 {
        self.pitch_um
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.shape()
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_pitch(mut self, pitch_um: f64) -> Result<Self> {
        self.grid = self.grid.with_pitch(pitch_um)?;
        self.pitch_um = pitch_um;
        Ok(self)
    }

    fn derived(&self, grid: Grid2D, transform: String) -> Result<Self> {
        let provenance = Provenance::Derived { from: Box::new(self.provenance.clone()), transform };
        MasterMask::new(grid, self.pitch_um, self.label.clone(), provenance)
    }
}

fn check_transmission(grid: &Grid2D) -> Result<()> {
    if let Some(i) = grid.values().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Range(format!(
            "transmission {} at flat index {i} is outside [0, 1]",
            grid.values()[i]
        )));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps for `-radius..=radius`.
pub(crate) fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Gaussian white noise blurred by an isotropic Gaussian of standard
/// deviation `correlation_px`, then mapped affinely onto `[t_min, t_max]`.
pub fn synthesize_speckle(p: &SpeckleParams) -> Result<MasterMask> {
    p.validate()?;
    let radius = (4.0 * p.correlation_px).ceil() as usize;
    let (pr, pc) = (p.rows + 2 * radius, p.cols + 2 * radius);
    let mut rng = rng::stream_rng(p.seed, stream::SPECKLE);
    let noise: Vec<f64> = (0..pr * pc).map(|_| StandardNormal.sample(&mut rng)).collect();
    let kernel = gaussian_kernel(p.correlation_px, radius);

    // Valid-region separable convolution: rows first, then columns.
    let mut horiz = vec![0.0; pr * p.cols];
    for r in 0..pr {
        let src = &noise[r * pc..(r + 1) * pc];
        for c in 0..p.cols {
            horiz[r * p.cols + c] = kernel.iter().zip(&src[c..c + kernel.len()]).map(|(k, v)| k * v).sum();
        }
    }
    let mut field = vec![0.0; p.rows * p.cols];
    for r in 0..p.rows {
        for c in 0..p.cols {
            field[r * p.cols + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * horiz[(r + i) * p.cols + c])
                .sum();
        }
    }

    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return Err(Error::Argument("synthesized field is constant".into()));
    }
    let values = field
        .iter()
        .map(|v| {
            let u = (v - lo) / span;
            (p.t_min * (1.0 - u) + p.t_max * u).clamp(p.t_min, p.t_max)
        })
        .collect();
    let grid = Grid2D::new(p.rows, p.cols, values)?;
    let label = format!("speckle-c{}-s{}", p.correlation_px, p.seed);
    MasterMask::new(grid, 1.0, label, Provenance::Synthetic { seed: p.seed, params: p.clone() })
}

/// Reads a mask file (PGM or raw float with JSON sidecar) as transmission.
pub fn ingest_mask(path: &Path) -> Result<MasterMask> {
    let loaded = io::read_grid(path)?;
    check_transmission(&loaded.grid)?;
    let label = loaded.meta.label.clone().unwrap_or_else(|| {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    });
    let pitch = loaded.meta.pitch_um.unwrap_or(1.0);
    MasterMask::new(loaded.grid, pitch, label, Provenance::Ingested { path: path.to_path_buf() })
}

/// Elementwise `t -> t^exponent`, used to move transmission between beam energies.
pub fn energy_correct(m: &MasterMask, exponent: f64) -> Result<MasterMask> {
    if !(exponent > 0.0 && exponent.is_finite()) {
        return Err(Error::Argument(format!("exponent must be positive, got {exponent}")));
    }
    let grid = m.grid().map(|t| t.powf(exponent))?;
    m.derived(grid, format!("energy_correct({exponent})"))
}

/// Decay constant (per px^2) that leaves `corner_transmission` at the
/// corner pixels of a `rows x cols` grid.
pub fn source_profile_alpha(rows: usize, cols: usize, corner_transmission: f64) -> Result<f64> {
    if !(corner_transmission > 0.0 && corner_transmission <= 1.0) {
        return Err(Error::Argument(format!(
            "corner transmission must be in (0, 1], got {corner_transmission}"
        )));
    }
    if rows < 2 || cols < 2 {
        return Err(Error::Argument(format!("source profile needs at least 2x2, got {rows}x{cols}")));
    }
    let yc = (rows - 1) as f64 / 2.0;
    let xc = (cols - 1) as f64 / 2.0;
    Ok(-corner_transmission.ln() / (yc * yc + xc * xc))
}

/// Multiplies by the Gaussian beam profile `exp(-alpha r^2)` centred on the grid.
pub fn apply_source_profile(g: &Grid2D, corner_transmission: f64) -> Result<Grid2D> {
    let alpha = source_profile_alpha(g.rows(), g.cols(), corner_transmission)?;
    if alpha == 0.0 {
        return Ok(g.clone());
    }
    let yc = (g.rows() - 1) as f64 / 2.0;
    let xc = (g.cols() - 1) as f64 / 2.0;
    let profile = Grid2D::from_fn(g.rows(), g.cols(), |r, c| {
        let dy = r as f64 - yc;
        let dx = c as f64 - xc;
        (-alpha * (dy * dy + dx * dx)).exp()
    })?;
    g.zip_map(&profile, |v, s| v * s)
}

/// Two masks in series: transmissions multiply.
pub fn compose_consecutive(a: &Grid2D, b: &Grid2D) -> Result<Grid2D> {
    check_transmission(a)?;
    check_transmission(b)?;
    a.zip_map(b, |x, y| x * y)
}

/// Standard deviation of `d/di + d/dj` over the interior, with central
/// differences (transmission per pixel).
pub fn delroughness(g: &Grid2D) -> Result<f64> {
    let (rows, cols) = g.shape();
    if rows < 3 || cols < 3 {
        return Err(Error::Argument(format!("delroughness needs at least 3x3, got {rows}x{cols}")));
    }
    let n = ((rows - 2) * (cols - 2)) as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for r in 1..rows - 1 {
        for c in 1..cols - 1 {
            let d = 0.5 * (g.get(r + 1, c) - g.get(r - 1, c)) + 0.5 * (g.get(r, c + 1) - g.get(r, c - 1));
            sum += d;
            sum_sq += d * d;
        }
    }
    let mean = sum / n;
    // Second pass keeps the variance exact for gradient fields that are constant.
    let mut var = 0.0;
    if sum_sq > 0.0 {
        for r in 1..rows - 1 {
            for c in 1..cols - 1 {
                let d = 0.5 * (g.get(r + 1, c) - g.get(r - 1, c)) + 0.5 * (g.get(r, c + 1) - g.get(r, c - 1));
                var += (d - mean) * (d - mean);
            }
        }
        var /= n;
    }
    Ok(var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub label: String,
    pub rows: usize,
    pub cols: usize,
    pub pitch_um: f64,
    pub mean: f64,
    pub variance: f64,
    pub delroughness: f64,
    /// Spectrum of the transmission fluctuations (mean removed).
    pub spectrum: RadialSpectrum,
    pub summary: Option<SpectrumSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub summary_error: Option<String>,
}

pub fn mask_stats(m: &MasterMask, n_bins: usize) -> Result<MaskStats> {
    let g = m.grid();
    let spectrum = radial_power_spectrum(&g.demeaned(), n_bins)?;
    let (summary, summary_error) = match spectrum_summary(&spectrum) {
        Ok(s) => (Some(s), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(MaskStats {
        label: m.label().to_string(),
        rows: g.rows(),
        cols: g.cols(),
        pitch_um: m.pitch_um(),
        mean: g.mean(),
        variance: g.variance(),
        delroughness: delroughness(g)?,
        spectrum,
        summary,
        summary_error,
    })
}
