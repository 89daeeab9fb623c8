//! Sub-field-of-view extraction from one or two master masks.
//!
//! Offsets are `(row, col)` of the FOV's top-left pixel in master coordinates.
//! An offset is valid when the FOV plus `margin_px` on every side fits inside
//! the master.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::mask::{apply_source_profile, MasterMask};
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stride {
    pub y: usize,
    pub x: usize,
}

impl Stride {
    pub fn new(y: usize, x: usize) -> Result<Self> {
        if y == 0 || x == 0 {
            return Err(Error::Argument(format!("stride must be positive, got {x}-by-{y}")));
        }
        Ok(Stride { y, x })
    }

    /// Parses `"12-by-8"`: the first number is the x (column) stride.
    pub fn parse_x_by_y(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("stride {s:?} is not of the form <x>-by-<y>"));
        let (x, y) = s.split_once("-by-").ok_or_else(bad)?;
        let x = x.trim().parse().map_err(|_| bad())?;
        let y = y.trim().parse().map_err(|_| bad())?;
        Stride::new(y, x)
    }

    pub fn to_x_by_y(self) -> String {
        format!("{}-by-{}", self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    Systematic { stride: Stride },
    Random { seed: u64 },
    UniqueTiling,
    ConsecutiveSystematic { stride_a: Stride, stride_b: Stride },
    ConsecutiveUnique { stride_a: Stride },
    ConsecutiveRandom { seed: u64 },
}

impl Protocol {
    pub fn is_consecutive(&self) -> bool {
        matches!(
            self,
            Protocol::ConsecutiveSystematic { .. } | Protocol::ConsecutiveUnique { .. } | Protocol::ConsecutiveRandom { .. }
        )
    }
}

/// Placement of one FOV: offset into master `a`, and into master `b` for
/// consecutive stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offset {
    pub a: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<(usize, usize)>,
}

/// Serializable description of a stack; pixel data is re-derived from the masters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackManifest {
    pub fov_rows: usize,
    pub fov_cols: usize,
    pub count: usize,
    pub margin_px: usize,
    pub protocol: Protocol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_corner: Option<f64>,
    pub master_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_b: Option<String>,
    pub offsets: Vec<Offset>,
}

#[derive(Debug, Clone)]
pub struct FovStack {
    m: usize,
    n: usize,
    fovs: Vec<Grid2D>,
    offsets: Vec<Offset>,
    protocol: Protocol,
    margin_px: usize,
    source_corner: Option<f64>,
    master_a: String,
    master_b: Option<String>,
}

/// The pair of masters a stack was cut from.
#[derive(Debug, Clone, Copy)]
pub struct Masters<'a> {
    pub a: &'a Grid2D,
    pub b: Option<&'a Grid2D>,
}

impl<'a> Masters<'a> {
    pub fn single(a: &'a MasterMask) -> Self {
        Masters { a: a.grid(), b: None }
    }

    pub fn pair(a: &'a MasterMask, b: &'a MasterMask) -> Self {
        Masters { a: a.grid(), b: Some(b.grid()) }
    }
}

impl FovStack {
    pub fn fov_shape(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn len(&self) -> usize {
        self.fovs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fovs.is_empty()
    }

    pub fn fovs(&self) -> &[Grid2D] {
        &self.fovs
    }

    pub fn fov(&self, k: usize) -> &Grid2D {
        &self.fovs[k]
    }

    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    pub fn protocol(&self) -> &Protocol {
        &self.protocol
    }

    pub fn margin_px(&self) -> usize {
        self.margin_px
    }

    pub fn source_corner(&self) -> Option<f64> {
        self.source_corner
    }

    pub fn is_consecutive(&self) -> bool {
        self.protocol.is_consecutive()
    }

    /// Builds a stack from explicit FOVs, e.g. for tests or externally cut data.
    /// Offsets are recorded as the raster position `(k, 0)` and cannot be re-extracted.
    pub fn from_fovs(fovs: Vec<Grid2D>) -> Result<Self> {
        let first = fovs.first().ok_or_else(|| Error::Argument("empty FOV list".into()))?;
        let (m, n) = first.shape();
        for f in &fovs {
            f.ensure_shape((m, n))?;
            if f.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Range("FOV transmission outside [0, 1]".into()));
            }
        }
        let offsets = (0..fovs.len()).map(|k| Offset { a: (k, 0), b: None }).collect();
        Ok(FovStack {
            m,
            n,
            fovs,
            offsets,
            protocol: Protocol::UniqueTiling,
            margin_px: 0,
            source_corner: None,
            master_a: "explicit".into(),
            master_b: None,
        })
    }

    /// First `count` FOVs, preserving order. Used to build nested stacks.
    pub fn truncated(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.len() {
            return Err(Error::Capacity { requested: count, max: self.len() });
        }
        let mut s = self.clone();
        s.fovs.truncate(count);
        s.offsets.truncate(count);
        Ok(s)
    }

    /// Multiplies every FOV by the centred beam profile.
    pub fn with_source_profile(mut self, corner_transmission: f64) -> Result<Self> {
        if self.source_corner.is_some() {
            return Err(Error::Argument("source profile already applied".into()));
        }
        self.fovs = self
            .fovs
            .iter()
            .map(|f| apply_source_profile(f, corner_transmission))
            .collect::<Result<_>>()?;
        self.source_corner = Some(corner_transmission);
        Ok(self)
    }

    pub fn manifest(&self) -> StackManifest {
        StackManifest {
            fov_rows: self.m,
            fov_cols: self.n,
            count: self.len(),
            margin_px: self.margin_px,
            protocol: self.protocol.clone(),
            source_corner: self.source_corner,
            master_a: self.master_a.clone(),
            master_b: self.master_b.clone(),
            offsets: self.offsets.clone(),
        }
    }

    fn check_masters(&self, masters: Masters) -> Result<()> {
        if self.is_consecutive() != masters.b.is_some() {
            return Err(Error::Argument("number of masters does not match the stack protocol".into()));
        }
        Ok(())
    }

    /// Re-reads FOV `k` from the masters at its recorded offsets.
    pub fn extract(&self, masters: Masters, k: usize) -> Result<Grid2D> {
        self.check_masters(masters)?;
        let off = self.offsets[k];
        let mut g = masters.a.crop(off.a.0, off.a.1, self.m, self.n)?;
        if let (Some(b), Some(ob)) = (masters.b, off.b) {
            g = g.zip_map(&b.crop(ob.0, ob.1, self.m, self.n)?, |x, y| x * y)?;
        }
        self.finish(g)
    }

    /// Re-reads FOV `k` with the master(s) displaced by fractional pixel shifts
    /// `(d_row, d_col)`, via bicubic interpolation.
    pub fn extract_shifted(
        &self,
        masters: Masters,
        k: usize,
        shift_a: (f64, f64),
        shift_b: Option<(f64, f64)>,
    ) -> Result<Grid2D> {
        self.check_masters(masters)?;
        let off = self.offsets[k];
        let sample = |g: &Grid2D, o: (usize, usize), s: (f64, f64)| {
            g.sample_shifted(o.0 as f64 + s.0, o.1 as f64 + s.1, self.m, self.n)
        };
        let mut g = sample(masters.a, off.a, shift_a)?;
        if let (Some(b), Some(ob)) = (masters.b, off.b) {
            g = g.zip_map(&sample(b, ob, shift_b.unwrap_or((0.0, 0.0)))?, |x, y| x * y)?;
        }
        self.finish(g)
    }

    fn finish(&self, g: Grid2D) -> Result<Grid2D> {
        match self.source_corner {
            Some(c) => apply_source_profile(&g, c),
            None => Ok(g),
        }
    }
}

/// Valid top-left positions along one axis.
fn axis_range(master: usize, fov: usize, margin: usize) -> Option<(usize, usize)> {
    let hi = master.checked_sub(fov + margin)?;
    (hi >= margin).then_some((margin, hi))
}

fn check_fov(fov: (usize, usize)) -> Result<()> {
    if fov.0 == 0 || fov.1 == 0 {
        return Err(Error::Argument("FOV dimensions must be positive".into()));
    }
    Ok(())
}

/// Raster-order offsets (x fastest) at the given stride.
pub fn systematic_offsets(
    master: (usize, usize),
    fov: (usize, usize),
    stride: Stride,
    margin: usize,
) -> Vec<(usize, usize)> {
    let (Some((y0, y1)), Some((x0, x1))) = (axis_range(master.0, fov.0, margin), axis_range(master.1, fov.1, margin))
    else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for dy in (y0..=y1).step_by(stride.y) {
        for dx in (x0..=x1).step_by(stride.x) {
            out.push((dy, dx));
        }
    }
    out
}

fn tiling_offsets(master: (usize, usize), fov: (usize, usize), margin: usize) -> Result<Vec<(usize, usize)>> {
    let inner = (master.0.checked_sub(2 * margin), master.1.checked_sub(2 * margin));
    let (Some(ir), Some(ic)) = inner else {
        return Err(Error::Divisibility { master, fov });
    };
    if ir == 0 || ic == 0 || ir % fov.0 != 0 || ic % fov.1 != 0 {
        return Err(Error::Divisibility { master, fov });
    }
    let mut out = Vec::new();
    for i in 0..ir / fov.0 {
        for j in 0..ic / fov.1 {
            out.push((margin + i * fov.0, margin + j * fov.1));
        }
    }
    Ok(out)
}

fn random_offsets(
    master: (usize, usize),
    fov: (usize, usize),
    count: usize,
    margin: usize,
    seed: u64,
    stream_id: u64,
) -> Result<Vec<(usize, usize)>> {
    let (Some((y0, y1)), Some((x0, x1))) = (axis_range(master.0, fov.0, margin), axis_range(master.1, fov.1, margin))
    else {
        return Err(Error::Capacity { requested: count, max: 0 });
    };
    let mut rng = rng::stream_rng(seed, stream_id);
    Ok((0..count)
        .map(|_| (rng.random_range(y0..=y1), rng.random_range(x0..=x1)))
        .collect())
}

fn cut(m: &MasterMask, fov: (usize, usize), offs: &[(usize, usize)]) -> Result<Vec<Grid2D>> {
    offs.iter().map(|&(r, c)| m.grid().crop(r, c, fov.0, fov.1)).collect()
}

fn single_stack(m: &MasterMask, fov: (usize, usize), offs: Vec<(usize, usize)>, protocol: Protocol, margin: usize) -> Result<FovStack> {
    let fovs = cut(m, fov, &offs)?;
    Ok(FovStack {
        m: fov.0,
        n: fov.1,
        fovs,
        offsets: offs.into_iter().map(|a| Offset { a, b: None }).collect(),
        protocol,
        margin_px: margin,
        source_corner: None,
        master_a: m.label().to_string(),
        master_b: None,
    })
}

pub fn sample_systematic(m: &MasterMask, fov: (usize, usize), stride: Stride, count: usize, margin: usize) -> Result<FovStack> {
    check_fov(fov)?;
    let mut offs = systematic_offsets(m.shape(), fov, stride, margin);
    if count == 0 || count > offs.len() {
        return Err(Error::Capacity { requested: count, max: offs.len() });
    }
    offs.truncate(count);
    single_stack(m, fov, offs, Protocol::Systematic { stride }, margin)
}

pub fn sample_random(m: &MasterMask, fov: (usize, usize), count: usize, seed: u64, margin: usize) -> Result<FovStack> {
    check_fov(fov)?;
    if count == 0 {
        return Err(Error::Argument("count must be positive".into()));
    }
    let offs = random_offsets(m.shape(), fov, count, margin, seed, stream::OFFSETS)?;
    single_stack(m, fov, offs, Protocol::Random { seed }, margin)
}

pub fn sample_unique_tiling(m: &MasterMask, fov: (usize, usize), margin: usize) -> Result<FovStack> {
    check_fov(fov)?;
    let offs = tiling_offsets(m.shape(), fov, margin)?;
    single_stack(m, fov, offs, Protocol::UniqueTiling, margin)
}

/// Consecutive sampling modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConsecutiveProtocol {
    /// Both masters strided independently; FOV k pairs the k-th offset of each.
    Systematic { stride_a: Stride, stride_b: Stride },
    /// Master `a` strided; master `b` cycles through its unique tiling.
    Unique { stride_a: Stride },
    /// Independent uniform offsets into both masters.
    Random { seed: u64 },
}

pub fn sample_consecutive(
    a: &MasterMask,
    b: &MasterMask,
    fov: (usize, usize),
    protocol: ConsecutiveProtocol,
    count: usize,
    margin: usize,
) -> Result<FovStack> {
    check_fov(fov)?;
    if a.pitch_um() != b.pitch_um() {
        return Err(Error::Argument(format!(
            "consecutive masters need equal pitch, got {} and {} um",
            a.pitch_um(),
            b.pitch_um()
        )));
    }
    if count == 0 {
        return Err(Error::Argument("count must be positive".into()));
    }
    let (offs_a, offs_b, proto) = match protocol {
        ConsecutiveProtocol::Systematic { stride_a, stride_b } => {
            let oa = systematic_offsets(a.shape(), fov, stride_a, margin);
            let ob = systematic_offsets(b.shape(), fov, stride_b, margin);
            let max = oa.len().min(ob.len());
            if count > max {
                return Err(Error::Capacity { requested: count, max });
            }
            (oa[..count].to_vec(), ob[..count].to_vec(), Protocol::ConsecutiveSystematic { stride_a, stride_b })
        }
        ConsecutiveProtocol::Unique { stride_a } => {
            let oa = systematic_offsets(a.shape(), fov, stride_a, margin);
            if count > oa.len() {
                return Err(Error::Capacity { requested: count, max: oa.len() });
            }
            let tiles = tiling_offsets(b.shape(), fov, margin)?;
            let ob = (0..count).map(|k| tiles[k % tiles.len()]).collect();
            (oa[..count].to_vec(), ob, Protocol::ConsecutiveUnique { stride_a })
        }
        ConsecutiveProtocol::Random { seed } => {
            let oa = random_offsets(a.shape(), fov, count, margin, seed, stream::OFFSETS)?;
            let ob = random_offsets(b.shape(), fov, count, margin, seed, stream::OFFSETS_B)?;
            (oa, ob, Protocol::ConsecutiveRandom { seed })
        }
    };
    let fa = cut(a, fov, &offs_a)?;
    let fb = cut(b, fov, &offs_b)?;
    let fovs = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| x.zip_map(y, |p, q| p * q))
        .collect::<Result<_>>()?;
    Ok(FovStack {
        m: fov.0,
        n: fov.1,
        fovs,
        offsets: offs_a.into_iter().zip(offs_b).map(|(a, b)| Offset { a, b: Some(b) }).collect(),
        protocol: proto,
        margin_px: margin,
        source_corner: None,
        master_a: a.label().to_string(),
        master_b: Some(b.label().to_string()),
    })
}
