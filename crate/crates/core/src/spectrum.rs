//! Azimuthally averaged Fourier power spectra.
//!
//! The forward DFT is unnormalized, so Parseval reads
//! `sum |F|^2 = rows * cols * sum g^2`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;

/// Largest radial frequency on the DFT lattice, in cycles per pixel.
pub const KAPPA_MAX: f64 = std::f64::consts::SQRT_2 / 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialSpectrum {
    pub bin_centers: Vec<f64>,
    pub power: Vec<f64>,
}

impl RadialSpectrum {
    pub fn new(bin_centers: Vec<f64>, power: Vec<f64>) -> Result<Self> {
        if bin_centers.len() != power.len() {
            return Err(Error::Argument("bin_centers and power differ in length".into()));
        }
        if bin_centers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Argument("bin centers must be strictly increasing".into()));
        }
        if power.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Range("power must be finite and non-negative".into()));
        }
        Ok(RadialSpectrum { bin_centers, power })
    }

    pub fn len(&self) -> usize {
        self.power.len()
    }

    pub fn is_empty(&self) -> bool {
        self.power.is_empty()
    }

    pub fn bin_width(&self) -> f64 {
        KAPPA_MAX / self.len() as f64
    }

    /// Index of the bin that holds radial frequency `kappa`.
    pub fn bin_of(&self, kappa: f64) -> usize {
        bin_index(kappa, self.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub mode_freq: f64,
    pub mean_freq: f64,
    pub std_freq: f64,
}

fn bin_index(kappa: f64, n_bins: usize) -> usize {
    let idx = (kappa / KAPPA_MAX * n_bins as f64).floor() as usize;
    idx.min(n_bins - 1)
}

/// Signed DFT frequency of index `k` on an `n`-point axis, in cycles/pixel.
fn dft_freq(k: usize, n: usize) -> f64 {
    if 2 * k <= n {
        k as f64 / n as f64
    } else {
        (k as f64 - n as f64) / n as f64
    }
}

/// Squared modulus of the unnormalized 2-D DFT, unshifted (DC at `(0, 0)`).
pub fn power_spectrum_2d(g: &Grid2D) -> Grid2D {
    let (rows, cols) = g.shape();
    let mut data: Vec<Complex<f64>> = g.values().iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::<f64>::new();

    let row_fft = planner.plan_fft_forward(cols);
    for row in data.chunks_exact_mut(cols) {
        row_fft.process(row);
    }

    let col_fft = planner.plan_fft_forward(rows);
    let mut column = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }

    let power = data.iter().map(|z| z.norm_sqr()).collect();
    Grid2D::new(rows, cols, power).expect("power of a finite grid is finite")
}

/// Annular average of the power spectrum over `n_bins` uniform radial bins
/// spanning `[0, sqrt(2)/2]` cycles/pixel. Bins that contain no lattice
/// frequency report zero power.
pub fn radial_power_spectrum(g: &Grid2D, n_bins: usize) -> Result<RadialSpectrum> {
    if n_bins < 2 {
        return Err(Error::Argument(format!("need at least 2 bins, got {n_bins}")));
    }
    let (rows, cols) = g.shape();
    if rows < 4 || cols < 4 {
        return Err(Error::Argument(format!("grid {rows}x{cols} too small for a spectrum")));
    }
    let power = power_spectrum_2d(g);
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for r in 0..rows {
        let ky = dft_freq(r, rows);
        for c in 0..cols {
            let kx = dft_freq(c, cols);
            let b = bin_index((kx * kx + ky * ky).sqrt(), n_bins);
            sums[b] += power.get(r, c);
            counts[b] += 1;
        }
    }
    let width = KAPPA_MAX / n_bins as f64;
    let centers = (0..n_bins).map(|k| (k as f64 + 0.5) * width).collect();
    let avg = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect();
    RadialSpectrum::new(centers, avg)
}

/// Mode (excluding bin 0), power-weighted mean and standard deviation of the
/// bin centers.
pub fn spectrum_summary(s: &RadialSpectrum) -> Result<SpectrumSummary> {
    if s.is_empty() {
        return Err(Error::Undefined("empty spectrum".into()));
    }
    let total: f64 = s.power.iter().sum();
    if total <= 0.0 {
        return Err(Error::Undefined("spectrum carries no power".into()));
    }
    let mut mode: Option<usize> = None;
    for k in 1..s.len() {
        if s.power[k] > 0.0 && mode.is_none_or(|m| s.power[k] > s.power[m]) {
            mode = Some(k);
        }
    }
    let mode = mode.ok_or_else(|| Error::Undefined("no power outside the DC bin".into()))?;
    let mean = s.bin_centers.iter().zip(&s.power).map(|(k, p)| k * p).sum::<f64>() / total;
    let var = s
        .bin_centers
        .iter()
        .zip(&s.power)
        .map(|(k, p)| (k - mean) * (k - mean) * p)
        .sum::<f64>()
        / total;
    Ok(SpectrumSummary { mode_freq: s.bin_centers[mode], mean_freq: mean, std_freq: var.max(0.0).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_grid_is_dc_only() {
        let g = Grid2D::filled(16, 16, 0.7).unwrap();
        let s = radial_power_spectrum(&g, 8).unwrap();
        assert!(s.power[0] > 0.0);
        assert!(s.power[1..].iter().all(|&p| p < 1e-20));
        assert!(matches!(spectrum_summary(&s), Err(Error::Undefined(_))));
    }

    #[test]
    fn impulse_is_flat() {
        let g = Grid2D::from_fn(64, 64, |r, c| if r == 5 && c == 9 { 1.0 } else { 0.0 }).unwrap();
        let s = radial_power_spectrum(&g, 16).unwrap();
        for p in &s.power {
            assert!((p - 1.0).abs() < 1e-12, "{p}");
        }
    }

    #[test]
    fn cosine_peaks_at_its_frequency() {
        let g = Grid2D::from_fn(64, 64, |_, c| (2.0 * std::f64::consts::PI * c as f64 / 8.0).cos()).unwrap();
        let s = radial_power_spectrum(&g, 32).unwrap();
        let argmax = (0..s.len()).max_by(|&a, &b| s.power[a].total_cmp(&s.power[b])).unwrap();
        assert_eq!(argmax, s.bin_of(0.125));
        let summary = spectrum_summary(&s).unwrap();
        assert_eq!(summary.mode_freq, s.bin_centers[s.bin_of(0.125)]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let g = Grid2D::filled(8, 8, 1.0).unwrap();
        assert!(radial_power_spectrum(&g, 1).is_err());
        let small = Grid2D::filled(3, 8, 1.0).unwrap();
        assert!(radial_power_spectrum(&small, 4).is_err());
    }

    #[test]
    fn summary_single_bin() {
        let s = RadialSpectrum::new(vec![0.05, 0.15, 0.25, 0.35], vec![0.0, 0.0, 3.0, 0.0]).unwrap();
        let sum = spectrum_summary(&s).unwrap();
        assert_eq!((sum.mode_freq, sum.mean_freq, sum.std_freq), (0.25, 0.25, 0.0));
    }

    #[test]
    fn summary_two_bins() {
        let s = RadialSpectrum::new(vec![0.1, 0.3], vec![2.0, 2.0]).unwrap();
        let sum = spectrum_summary(&s).unwrap();
        assert!((sum.mean_freq - 0.2).abs() < 1e-15);
        assert!((sum.std_freq - 0.1).abs() < 1e-15);
        // DC bin is excluded from the mode.
        assert_eq!(sum.mode_freq, 0.3);
    }

    #[test]
    fn summary_of_zero_power_is_undefined() {
        let s = RadialSpectrum::new(vec![0.1, 0.3], vec![0.0, 0.0]).unwrap();
        assert!(matches!(spectrum_summary(&s), Err(Error::Undefined(_))));
    }

    proptest! {
        #[test]
        fn parseval(vals in proptest::collection::vec(-3.0f64..3.0, 6 * 10)) {
            let g = Grid2D::new(6, 10, vals).unwrap();
            let p = power_spectrum_2d(&g);
            let lhs = p.sum();
            let rhs = 60.0 * g.values().iter().map(|v| v * v).sum::<f64>();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1e-300));
        }
    }
}
