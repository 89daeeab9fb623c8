//! Zero-mean, unit-contrast target images and the test patterns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::mask::gaussian_kernel;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetImage {
    grid: Grid2D,
    norm_sq: f64,
}

impl TargetImage {
    fn from_grid(grid: Grid2D) -> Self {
        let norm_sq = grid.mean_sq();
        TargetImage { grid, norm_sq }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.shape()
    }

    /// `E[I^2]`, the mean squared pixel value.
    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }

    pub fn contrast(&self) -> f64 {
        self.grid.max() - self.grid.min()
    }
}

/// Affine map to unit contrast, then mean removal.
pub fn normalize(raw: &Grid2D) -> Result<TargetImage> {
    let lo = raw.min();
    let span = raw.max() - lo;
    if !(span > 0.0) {
        return Err(Error::Undefined("constant image has no contrast".into()));
    }
    let scaled = raw.map(|v| (v - lo) / span)?;
    let mean = scaled.mean();
    Ok(TargetImage::from_grid(scaled.map(|v| v - mean)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    /// Centred Gaussian spot. Without `sigma_px` the width is chosen so that
    /// `E[I^2]` equals that of a binary image with 1/16 of its pixels on.
    GaussianDot {
        #[serde(default)]
        sigma_px: Option<f64>,
    },
    /// Centred filled square.
    Square { side: usize },
    /// 1x1 squares on a regular lattice.
    Dots {
        #[serde(default = "default_dot_spacing")]
        spacing: usize,
    },
    /// Column-wise ramp.
    LinearGradient,
    /// Bar groups of halving widths topped up to `on_fraction` of the pixels.
    ResolutionChart {
        #[serde(default = "default_on_fraction")]
        on_fraction: f64,
    },
}

fn default_dot_spacing() -> usize {
    4
}

fn default_on_fraction() -> f64 {
    0.3
}

pub fn make_pattern(pattern: &Pattern, m: usize, n: usize) -> Result<TargetImage> {
    if m == 0 || n == 0 {
        return Err(Error::Argument("image dimensions must be positive".into()));
    }
    let raw = match *pattern {
        Pattern::Square { side } => {
            if side == 0 || side > m || side > n {
                return Err(Error::Argument(format!("square of side {side} does not fit {m}x{n}")));
            }
            let (r0, c0) = ((m - side) / 2, (n - side) / 2);
            Grid2D::from_fn(m, n, |r, c| {
                ((r0..r0 + side).contains(&r) && (c0..c0 + side).contains(&c)) as u8 as f64
            })?
        }
        Pattern::Dots { spacing } => {
            if spacing == 0 || spacing > m || spacing > n {
                return Err(Error::Argument(format!("dot spacing {spacing} does not fit {m}x{n}")));
            }
            let h = spacing / 2;
            Grid2D::from_fn(m, n, |r, c| (r % spacing == h && c % spacing == h) as u8 as f64)?
        }
        Pattern::LinearGradient => {
            if n < 2 {
                return Err(Error::Argument("gradient needs at least 2 columns".into()));
            }
            Grid2D::from_fn(m, n, |_, c| c as f64)?
        }
        Pattern::GaussianDot { sigma_px } => {
            let sigma = match sigma_px {
                Some(s) if s > 0.0 => s,
                Some(s) => return Err(Error::Argument(format!("sigma_px must be positive, got {s}"))),
                None => matched_gaussian_sigma(m, n, 1.0 / 16.0)?,
            };
            gaussian_spot(m, n, sigma)?
        }
        Pattern::ResolutionChart { on_fraction } => resolution_chart(m, n, on_fraction)?,
    };
    normalize(&raw)
}

fn gaussian_spot(m: usize, n: usize, sigma: f64) -> Result<Grid2D> {
    let (yc, xc) = ((m - 1) as f64 / 2.0, (n - 1) as f64 / 2.0);
    Grid2D::from_fn(m, n, |r, c| {
        let d2 = (r as f64 - yc).powi(2) + (c as f64 - xc).powi(2);
        (-0.5 * d2 / (sigma * sigma)).exp()
    })
}

/// Gaussian width whose normalized image has `E[I^2] = f (1 - f)`.
fn matched_gaussian_sigma(m: usize, n: usize, f: f64) -> Result<f64> {
    let goal = f * (1.0 - f);
    let norm = |s: f64| -> Result<f64> { Ok(normalize(&gaussian_spot(m, n, s)?)?.norm_sq()) };
    // E[I^2] grows with width until the spot fills the frame; bracket on that branch.
    let mut lo = 0.2;
    if norm(lo)? > goal {
        return Err(Error::Argument(format!("{m}x{n} frame too small for a matched Gaussian dot")));
    }
    let mut hi = lo;
    loop {
        hi *= 1.25;
        if hi > (m.max(n) as f64) {
            return Err(Error::Argument(format!("no Gaussian width reaches E[I^2] = {goal} on {m}x{n}")));
        }
        if norm(hi)? >= goal {
            break;
        }
        lo = hi;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if norm(mid)? < goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Draws `count` bars of width `w` separated by `w`, for each width in
/// `widths`, along one axis. `place(start, width)` paints one bar.
fn bar_groups(widths: &[usize], extent: usize, mut place: impl FnMut(usize, usize)) {
    let mut pos = 0;
    for &w in widths {
        let span = 3 * w;
        if pos + span > extent {
            continue;
        }
        place(pos, w);
        place(pos + 2 * w, w);
        pos += span + 2;
    }
}

fn resolution_chart(m: usize, n: usize, on_fraction: f64) -> Result<Grid2D> {
    if !(on_fraction > 0.0 && on_fraction < 1.0) {
        return Err(Error::Argument(format!("on_fraction must be in (0, 1), got {on_fraction}")));
    }
    if m < 8 || n < 8 {
        return Err(Error::Argument(format!("resolution chart needs at least 8x8, got {m}x{n}")));
    }
    let mut img = vec![0.0; m * n];
    let w0 = (m.min(n) / 10).max(1);
    let widths: Vec<usize> = std::iter::successors(Some(w0), |&w| (w > 1).then_some(w / 2)).collect();
    let (hm, hn) = (m / 2, n / 2);

    // Top half: vertical bars.
    let (top0, top1) = (1, hm - 1);
    bar_groups(&widths, n - 2, |start, w| {
        for r in top0..top1 {
            for c in 1 + start..1 + start + w {
                img[r * n + c] = 1.0;
            }
        }
    });
    // Bottom-left quadrant: horizontal bars.
    let (left0, left1) = (1, hn);
    bar_groups(&widths, m - hm - 2, |start, w| {
        for r in hm + 1 + start..hm + 1 + start + w {
            for c in left0..left1 {
                img[r * n + c] = 1.0;
            }
        }
    });

    let goal = (on_fraction * (m * n) as f64).round() as usize;
    let mut on = img.iter().filter(|&&v| v > 0.0).count();
    if on > goal {
        return Err(Error::Argument(format!("bar layout already exceeds on_fraction {on_fraction}")));
    }
    // Bottom-right quadrant: solid block filled in raster order up to the goal.
    'fill: for r in hm..m {
        for c in hn..n {
            if on == goal {
                break 'fill;
            }
            img[r * n + c] = 1.0;
            on += 1;
        }
    }
    if on != goal {
        return Err(Error::Argument(format!("{m}x{n} chart cannot reach on_fraction {on_fraction}")));
    }
    Grid2D::new(m, n, img)
}

/// Half-sample symmetric reflection of index `i` into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let k = i.rem_euclid(period);
    (if k < n { k } else { period - 1 - k }) as usize
}

/// Separable Gaussian blur with reflected borders. Contrast is not restored.
pub fn gaussian_smooth(img: &TargetImage, sigma_px: f64) -> Result<TargetImage> {
    if !(sigma_px > 0.0 && sigma_px.is_finite()) {
        return Err(Error::Argument(format!("sigma_px must be positive, got {sigma_px}")));
    }
    let radius = (4.0 * sigma_px).ceil() as usize;
    let k = gaussian_kernel(sigma_px, radius);
    let (m, n) = img.shape();
    let src = img.grid().values();
    let r = radius as isize;

    let mut tmp = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            tmp[i * n + j] = (-r..=r)
                .map(|t| k[(t + r) as usize] * src[i * n + reflect(j as isize + t, n)])
                .sum();
        }
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (-r..=r)
                .map(|t| k[(t + r) as usize] * tmp[reflect(i as isize + t, m) * n + j])
                .sum();
        }
    }
    Ok(TargetImage::from_grid(Grid2D::new(m, n, out)?))
}

/// Wraps an existing zero-mean grid without renormalizing it.
pub fn from_zero_mean(grid: Grid2D) -> Result<TargetImage> {
    let scale = grid.values().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    if grid.mean().abs() > 1e-9 * scale {
        return Err(Error::Argument(format!("image mean {} is not zero", grid.mean())));
    }
    Ok(TargetImage::from_grid(grid))
}
