//! Pixel file formats.
//!
//! * Binary PGM (`P5`), written with maxval 65535 and big-endian samples;
//!   sample values are read as `sample / maxval`.
//! * Raw little-endian `f32`, row-major, with a JSON sidecar holding the shape.
//!
//! Both formats get a sidecar at `path.with_extension("json")`. An optional
//! affine in the sidecar maps file values `u` to grid values `offset + scale * u`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;

const PGM_MAXVAL: u32 = 65535;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Affine {
    pub offset: f64,
    pub scale: f64,
}

impl Affine {
    /// Affine taking `[lo, hi]` onto the file range `[0, 1]`.
    pub fn spanning(lo: f64, hi: f64) -> Affine {
        let scale = if hi > lo { hi - lo } else { 1.0 };
        Affine { offset: lo, scale }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cols: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch_um: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<Affine>,
}

#[derive(Debug, Clone)]
pub struct LoadedGrid {
    pub grid: Grid2D,
    pub meta: GridMeta,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn is_pgm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn write_sidecar(path: &Path, grid: &Grid2D, meta: &GridMeta) -> Result<()> {
    let mut meta = meta.clone();
    meta.rows = Some(grid.rows());
    meta.cols = Some(grid.cols());
    if meta.pitch_um.is_none() {
        meta.pitch_um = grid.pitch_um();
    }
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(sidecar_path(path), text)?;
    Ok(())
}

fn read_sidecar(path: &Path, required: bool) -> Result<GridMeta> {
    let side = sidecar_path(path);
    match fs::read_to_string(&side) {
        Ok(text) => serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("sidecar {}: {e}", side.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && !required => Ok(GridMeta::default()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::Format(format!("missing sidecar {}", side.display())))
        }
        Err(e) => Err(e.into()),
    }
}

fn to_file_values(grid: &Grid2D, meta: &GridMeta) -> Vec<f64> {
    match meta.affine {
        Some(a) => grid.values().iter().map(|v| (v - a.offset) / a.scale).collect(),
        None => grid.values().to_vec(),
    }
}

fn from_file_values(values: Vec<f64>, meta: &GridMeta) -> Vec<f64> {
    match meta.affine {
        Some(a) => values.into_iter().map(|u| a.offset + a.scale * u).collect(),
        None => values,
    }
}

/// Writes a 16-bit PGM. File values (after the inverse affine) must be in `[0, 1]`.
pub fn write_pgm(path: &Path, grid: &Grid2D, meta: &GridMeta) -> Result<()> {
    let file_vals = to_file_values(grid, meta);
    let tol = 1e-12;
    if let Some(v) = file_vals.iter().find(|v| !(-tol..=1.0 + tol).contains(*v)) {
        return Err(Error::Range(format!("PGM sample value {v} is outside [0, 1]")));
    }
    let mut out = format!("P5\n{} {}\n{}\n", grid.cols(), grid.rows(), PGM_MAXVAL).into_bytes();
    out.reserve(2 * file_vals.len());
    for v in file_vals {
        let s = (v.clamp(0.0, 1.0) * PGM_MAXVAL as f64).round() as u16;
        out.extend_from_slice(&s.to_be_bytes());
    }
    fs::write(path, out)?;
    write_sidecar(path, grid, meta)
}

fn pgm_token(data: &[u8], pos: &mut usize) -> Result<u32> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && data[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated or non-numeric PGM header".into()));
    }
    std::str::from_utf8(&data[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("PGM header value out of range".into()))
}

pub fn read_pgm(path: &Path) -> Result<LoadedGrid> {
    let data = fs::read(path)?;
    if data.len() < 2 || &data[..2] != b"P5" {
        return Err(Error::Format(format!("{} is not a binary PGM", path.display())));
    }
    let mut pos = 2;
    let cols = pgm_token(&data, &mut pos)? as usize;
    let rows = pgm_token(&data, &mut pos)? as usize;
    let maxval = pgm_token(&data, &mut pos)?;
    if maxval == 0 || maxval > PGM_MAXVAL {
        return Err(Error::Format(format!("PGM maxval {maxval} not in 1..=65535")));
    }
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(Error::Format("PGM header not terminated".into()));
    }
    pos += 1;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let body = &data[pos..];
    if body.len() != rows * cols * bytes_per {
        return Err(Error::Format(format!(
            "PGM body has {} bytes, expected {}",
            body.len(),
            rows * cols * bytes_per
        )));
    }
    let samples: Vec<u32> = if bytes_per == 1 {
        body.iter().map(|&b| b as u32).collect()
    } else {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect()
    };
    if samples.iter().any(|&s| s > maxval) {
        return Err(Error::Format("PGM sample exceeds maxval".into()));
    }
    let meta = read_sidecar(path, false)?;
    check_sidecar_shape(&meta, rows, cols)?;
    let values = samples.into_iter().map(|s| s as f64 / maxval as f64).collect();
    let grid = Grid2D::new(rows, cols, from_file_values(values, &meta))?;
    let grid = match meta.pitch_um {
        Some(p) => grid.with_pitch(p)?,
        None => grid,
    };
    Ok(LoadedGrid { grid, meta })
}

fn check_sidecar_shape(meta: &GridMeta, rows: usize, cols: usize) -> Result<()> {
    if meta.rows.is_some_and(|r| r != rows) || meta.cols.is_some_and(|c| c != cols) {
        return Err(Error::Format(format!(
            "sidecar shape {:?}x{:?} disagrees with file shape {rows}x{cols}",
            meta.rows, meta.cols
        )));
    }
    Ok(())
}

/// Writes little-endian `f32` samples plus the sidecar.
pub fn write_raw(path: &Path, grid: &Grid2D, meta: &GridMeta) -> Result<()> {
    let file_vals = to_file_values(grid, meta);
    let mut out = Vec::with_capacity(4 * file_vals.len());
    for v in file_vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    write_sidecar(path, grid, meta)
}

pub fn read_raw(path: &Path) -> Result<LoadedGrid> {
    let meta = read_sidecar(path, true)?;
    let (rows, cols) = match (meta.rows, meta.cols) {
        (Some(r), Some(c)) => (r, c),
        _ => return Err(Error::Format("raw sidecar must give rows and cols".into())),
    };
    let data = fs::read(path)?;
    if data.len() != 4 * rows * cols {
        return Err(Error::Format(format!(
            "raw file has {} bytes, expected {}",
            data.len(),
            4 * rows * cols
        )));
    }
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("raw file holds non-finite samples".into()));
    }
    let grid = Grid2D::new(rows, cols, from_file_values(values, &meta))?;
    let grid = match meta.pitch_um {
        Some(p) => grid.with_pitch(p)?,
        None => grid,
    };
    Ok(LoadedGrid { grid, meta })
}

/// Dispatches on the extension: `.pgm` is PGM, anything else is raw float.
pub fn read_grid(path: &Path) -> Result<LoadedGrid> {
    if is_pgm(path) {
        read_pgm(path)
    } else {
        read_raw(path)
    }
}

pub fn write_grid(path: &Path, grid: &Grid2D, meta: &GridMeta) -> Result<()> {
    if is_pgm(path) {
        write_pgm(path, grid, meta)
    } else {
        write_raw(path, grid, meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_sample_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut bytes = b"P5\n# comment\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&32768u16.to_be_bytes());
        bytes.extend_from_slice(&65535u16.to_be_bytes());
        fs::write(&path, bytes).unwrap();
        let g = read_pgm(&path).unwrap().grid;
        assert_eq!(g.shape(), (1, 2));
        assert!((g.get(0, 0) - 0.500_007_63).abs() < 1e-8);
        assert_eq!(g.get(0, 0), 32768.0 / 65535.0);
        assert_eq!(g.get(0, 1), 1.0);
    }

    #[test]
    fn eight_bit_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        fs::write(&path, b"P5 2 2 255\n\x00\x80\xff\x40").unwrap();
        let g = read_pgm(&path).unwrap().grid;
        assert_eq!(g.values(), &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
    }

    #[test]
    fn malformed_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        fs::write(&path, b"P2 2 2 255\n0 0 0 0").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::Format(_))));
        fs::write(&path, b"P5 2 2 255\n\x00").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::Format(_))));
        fs::write(&path, b"P5 2 2 70000\n").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        let g = Grid2D::from_fn(5, 7, |r, c| ((r * 7 + c) as f64 * 0.0291).fract()).unwrap();
        let meta = GridMeta { pitch_um: Some(2.5), label: Some("g".into()), ..Default::default() };
        write_pgm(&path, &g, &meta).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.meta.label.as_deref(), Some("g"));
        assert_eq!(back.grid.pitch_um(), Some(2.5));
        for (a, b) in g.values().iter().zip(back.grid.values()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
        }
    }

    #[test]
    fn pgm_with_affine() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let g = Grid2D::new(1, 3, vec![-0.3, 0.2, 0.7]).unwrap();
        let meta = GridMeta { affine: Some(Affine::spanning(-0.3, 0.7)), ..Default::default() };
        write_pgm(&path, &g, &meta).unwrap();
        let back = read_grid(&path).unwrap().grid;
        for (a, b) in g.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
        assert!(write_pgm(&path, &g, &GridMeta::default()).is_err());
    }

    #[test]
    fn raw_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.raw");
        let g = Grid2D::from_fn(4, 3, |r, c| (r as f64 + 0.1) / (c as f64 + 1.7)).unwrap();
        write_raw(&path, &g, &GridMeta::default()).unwrap();
        let back = read_grid(&path).unwrap().grid;
        for (a, b) in g.values().iter().zip(back.values()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        let meta: GridMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!((meta.rows, meta.cols), (Some(4), Some(3)));
    }

    #[test]
    fn raw_requires_sidecar_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.raw");
        fs::write(&path, [0u8; 8]).unwrap();
        assert!(matches!(read_raw(&path), Err(Error::Format(_))));
        fs::write(sidecar_path(&path), r#"{"rows": 2, "cols": 2}"#).unwrap();
        assert!(matches!(read_raw(&path), Err(Error::Format(_))));
        fs::write(sidecar_path(&path), r#"{"rows": 1, "cols": 2, "bogus": 1}"#).unwrap();
        assert!(matches!(read_raw(&path), Err(Error::Format(_))));
    }
}
