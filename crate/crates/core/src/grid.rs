//! Dense row-major 2-D grids of real values.
//!
//! Masks, fields of view, target images and projections are all `Grid2D`s.
//! Grids are immutable once built; every operation returns a new grid.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pitch_um: Option<f64>,
}

impl Grid2D {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Argument(format!("grid must be non-empty, got {rows}x{cols}")));
        }
        if values.len() != rows * cols {
            return Err(Error::Argument(format!(
                "expected {} values for a {rows}x{cols} grid, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Range(format!("non-finite value at flat index {idx}")));
        }
        Ok(Grid2D { rows, cols, values, pitch_um: None })
    }

    /// Constant grid; with `value = 1` this is the all-ones matrix J.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self::new(rows, cols, values)
    }

    pub fn with_pitch(mut self, pitch_um: f64) -> Result<Self> {
        if !(pitch_um > 0.0 && pitch_um.is_finite()) {
            return Err(Error::Argument(format!("pitch must be positive, got {pitch_um}")));
        }
        self.pitch_um = Some(pitch_um);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn pitch_um(&self) -> Option<f64> {
        self.pitch_um
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Arithmetic mean with one corrective pass, so constant grids return
    /// their value exactly.
    pub fn mean(&self) -> f64 {
        let n = self.len() as f64;
        let m = self.sum() / n;
        m + self.values.iter().map(|v| v - m).sum::<f64>() / n
    }

    /// Population variance (divides by the number of values).
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / self.len() as f64
    }

    pub fn mean_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() / self.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = self.values.iter().map(|&v| f(v)).collect();
        let mut g = Self::new(self.rows, self.cols, values)?;
        g.pitch_um = self.pitch_um;
        Ok(g)
    }

    pub fn zip_map(&self, other: &Grid2D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_shape(other.shape())?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        let mut g = Self::new(self.rows, self.cols, values)?;
        g.pitch_um = self.pitch_um;
        Ok(g)
    }

    pub fn ensure_shape(&self, expected: (usize, usize)) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::Shape { expected, got: self.shape() });
        }
        Ok(())
    }

    pub fn demeaned(&self) -> Self {
        let mean = self.mean();
        let mut g = self.clone();
        g.values.iter_mut().for_each(|v| *v -= mean);
        g
    }

    /// Copies out the `rows x cols` window whose top-left corner is `(r0, c0)`.
    pub fn crop(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || r0 + rows > self.rows || c0 + cols > self.cols {
            return Err(Error::Domain(format!(
                "window {rows}x{cols} at ({r0}, {c0}) exceeds {}x{} grid",
                self.rows, self.cols
            )));
        }
        let mut values = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            let start = r * self.cols + c0;
            values.extend_from_slice(&self.values[start..start + cols]);
        }
        Ok(Grid2D { rows, cols, values, pitch_um: self.pitch_um })
    }

    /// Removes `border` pixels from every side.
    pub fn crop_border(&self, border: usize) -> Result<Self> {
        if border == 0 {
            return Ok(self.clone());
        }
        if 2 * border >= self.rows || 2 * border >= self.cols {
            return Err(Error::Argument(format!(
                "border {border} leaves nothing of a {}x{} grid",
                self.rows, self.cols
            )));
        }
        self.crop(border, border, self.rows - 2 * border, self.cols - 2 * border)
    }

    /// Catmull-Rom bicubic interpolation at fractional `(row, col)`.
    ///
    /// The point must lie at least one pixel inside the grid; stencil taps that
    /// fall off the far edge are clamped.
    pub fn interp_bicubic(&self, row: f64, col: f64) -> Result<f64> {
        self.check_interior(row, col)?;
        let (r0, wr) = catmull_rom_taps(row);
        let (c0, wc) = catmull_rom_taps(col);
        Ok(self.stencil(r0, c0, &wr, &wc))
    }

    /// Bicubic re-extraction of a `rows x cols` window whose top-left corner
    /// sits at the fractional position `(row0, col0)`.
    ///
    /// Equivalent to calling [`interp_bicubic`](Self::interp_bicubic) at every
    /// `(row0 + a, col0 + b)`, but the tap weights are shared by all pixels.
    pub fn sample_shifted(&self, row0: f64, col0: f64, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Argument("empty window".into()));
        }
        self.check_interior(row0, col0)?;
        self.check_interior(row0 + (rows - 1) as f64, col0 + (cols - 1) as f64)?;
        let (r0, wr) = catmull_rom_taps(row0);
        let (c0, wc) = catmull_rom_taps(col0);
        let mut values = Vec::with_capacity(rows * cols);
        for a in 0..rows {
            for b in 0..cols {
                values.push(self.stencil(r0 + a as isize, c0 + b as isize, &wr, &wc));
            }
        }
        Ok(Grid2D { rows, cols, values, pitch_um: self.pitch_um })
    }

    fn check_interior(&self, row: f64, col: f64) -> Result<()> {
        let ok = row.is_finite()
            && col.is_finite()
            && self.rows >= 3
            && self.cols >= 3
            && row >= 1.0
            && col >= 1.0
            && row <= (self.rows - 2) as f64
            && col <= (self.cols - 2) as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "({row}, {col}) is not at least one pixel inside a {}x{} grid",
                self.rows, self.cols
            )))
        }
    }

    #[inline]
    fn stencil(&self, r0: isize, c0: isize, wr: &[f64; 4], wc: &[f64; 4]) -> f64 {
        let rmax = self.rows as isize - 1;
        let cmax = self.cols as isize - 1;
        let mut acc = 0.0;
        for (dr, &w_r) in wr.iter().enumerate() {
            if w_r == 0.0 {
                continue;
            }
            let r = (r0 - 1 + dr as isize).clamp(0, rmax) as usize;
            let row = &self.values[r * self.cols..(r + 1) * self.cols];
            let mut line = 0.0;
            for (dc, &w_c) in wc.iter().enumerate() {
                let c = (c0 - 1 + dc as isize).clamp(0, cmax) as usize;
                line += w_c * row[c];
            }
            acc += w_r * line;
        }
        acc
    }
}

/// Base index and the four Catmull-Rom (a = -0.5) weights for taps
/// `base - 1 ..= base + 2`.
#[inline]
fn catmull_rom_taps(x: f64) -> (isize, [f64; 4]) {
    let base = x.floor();
    let t = x - base;
    let t2 = t * t;
    let t3 = t2 * t;
    let w = [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ];
    (base as isize, w)
}
