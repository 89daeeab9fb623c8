//! Run configuration: one JSON document shared by every command.
//!
//! Unknown keys are rejected everywhere. Strides are written `"<x>-by-<y>"`,
//! the first number being the column step.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fov::Stride;
use crate::noise::NoiseConfig;
use crate::target::Pattern;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mask: MaskSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_b: Option<MaskSection>,
    pub sampling: SamplingSection,
    pub target: TargetSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<RoutingSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSection {
    Synth {
        rows: usize,
        cols: usize,
        correlation_px: f64,
        #[serde(default)]
        t_min: f64,
        #[serde(default = "one")]
        t_max: f64,
        seed: u64,
        #[serde(default = "one")]
        pitch_um: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
        /// Exponent of the energy correction `T -> T^e`, if any.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        energy_exponent: Option<f64>,
    },
    Ingest {
        path: PathBuf,
        /// Overrides the sidecar pitch.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pitch_um: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        energy_exponent: Option<f64>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub fov_rows: usize,
    pub fov_cols: usize,
    /// Defaults to the margin translational noise needs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_px: Option<usize>,
    /// Corner transmission of the beam profile applied to every FOV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_corner: Option<f64>,
    pub protocol: SamplingProtocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingProtocol {
    Systematic { stride: String, count: usize },
    Random { count: usize, seed: u64 },
    UniqueTiling,
    ConsecutiveSystematic { stride_a: String, stride_b: String, count: usize },
    ConsecutiveUnique { stride_a: String, count: usize },
    ConsecutiveRandom { count: usize, seed: u64 },
}

impl SamplingProtocol {
    pub fn is_consecutive(&self) -> bool {
        matches!(
            self,
            SamplingProtocol::ConsecutiveSystematic { .. }
                | SamplingProtocol::ConsecutiveUnique { .. }
                | SamplingProtocol::ConsecutiveRandom { .. }
        )
    }

    /// Label used in the report's stride column.
    pub fn stride_label(&self) -> String {
        match self {
            SamplingProtocol::Systematic { stride, .. } => stride.clone(),
            SamplingProtocol::Random { .. } => "random".into(),
            SamplingProtocol::UniqueTiling => "unique".into(),
            SamplingProtocol::ConsecutiveSystematic { stride_a, stride_b, .. } => format!("{stride_a}/{stride_b}"),
            SamplingProtocol::ConsecutiveUnique { stride_a, .. } => format!("{stride_a}/unique"),
            SamplingProtocol::ConsecutiveRandom { .. } => "random/random".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Pattern>,
    /// Image file; normalized to unit contrast and zero mean on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Optional Gaussian blur applied after normalization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smooth_sigma_px: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    #[default]
    Demeaned,
    Enforced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default)]
    pub mode: SolverMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pedestal_target: Option<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iter() -> usize {
    100_000
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection { mode: SolverMode::Demeaned, pedestal_target: None, tol: default_tol(), max_iter: default_max_iter() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingSection {
    pub v_mm_s: f64,
    /// Photons per pixel per second.
    pub flux: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelFormat {
    #[default]
    Raw,
    Pgm,
}

impl PixelFormat {
    pub fn extension(self) -> &'static str {
        match self {
            PixelFormat::Raw => "raw",
            PixelFormat::Pgm => "pgm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub directory: PathBuf,
    #[serde(default)]
    pub pixel_format: PixelFormat,
    /// Also write the first simulated projection of every source.
    #[serde(default)]
    pub dump_projections: bool,
    #[serde(default = "default_bins")]
    pub spectrum_bins: usize,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_bins() -> usize {
    64
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: default_dir(),
            pixel_format: PixelFormat::Raw,
            dump_projections: false,
            spectrum_bins: default_bins(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for m in [Some(&mut cfg.mask), cfg.mask_b.as_mut()].into_iter().flatten() {
            if let MaskSection::Ingest { path, .. } = m {
                rebase(path);
            }
        }
        if let Some(f) = cfg.target.file.as_mut() {
            rebase(f);
        }
        rebase(&mut cfg.output.directory);
        Ok(cfg)
    }

    /// Schema checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sampling.protocol.is_consecutive() != self.mask_b.is_some() {
            return bad("consecutive protocols need mask_b, and only they accept it".into());
        }
        match (&self.target.pattern, &self.target.file) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return bad("target needs exactly one of pattern or file".into()),
        }
        match (self.solver.mode, self.solver.pedestal_target) {
            (SolverMode::Enforced, None) => return bad("enforced solver mode needs pedestal_target".into()),
            (SolverMode::Demeaned, Some(_)) => return bad("pedestal_target is only valid in enforced mode".into()),
            _ => {}
        }
        let strides: Vec<&String> = match &self.sampling.protocol {
            SamplingProtocol::Systematic { stride, .. } => vec![stride],
            SamplingProtocol::ConsecutiveSystematic { stride_a, stride_b, .. } => vec![stride_a, stride_b],
            SamplingProtocol::ConsecutiveUnique { stride_a, .. } => vec![stride_a],
            _ => vec![],
        };
        for s in strides {
            Stride::parse_x_by_y(s).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.output.spectrum_bins == 0 {
            return bad("spectrum_bins must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization, hex encoded. The output
    /// directory is left out so relocating a run does not change it.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output.directory = PathBuf::new();
        digest_of(&c)
    }

    /// Stack margin: the configured one, else what translational noise needs.
    pub fn effective_margin(&self) -> usize {
        self.sampling.margin_px.unwrap_or_else(|| self.noise.required_margin())
    }

    /// Digest of the sections that determine a plan. Downstream commands use
    /// it to refuse a plan made from a different stack or target.
    pub fn plan_digest(&self) -> String {
        let mut sampling = self.sampling.clone();
        sampling.margin_px = Some(self.effective_margin());
        digest_of(&(&self.mask, &self.mask_b, &sampling, &self.target, &self.solver))
    }
}

fn digest_of<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "mask": {"source": "synth", "rows": 64, "cols": 64, "correlation_px": 1.0, "seed": 1},
        "sampling": {"fov_rows": 8, "fov_cols": 8, "protocol": {"kind": "systematic", "stride": "3-by-2", "count": 20}},
        "target": {"pattern": {"kind": "square", "side": 4}}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.solver.tol, 1e-10);
        assert_eq!(c.noise.runs, 100);
        assert_eq!(c.output.directory, PathBuf::from("out"));
        assert_eq!(c.digest(), RunConfig::from_json(MINIMAL).unwrap().digest());
    }

    #[test]
    fn unknown_keys_rejected() {
        let extra = MINIMAL.replacen("\"seed\": 1}", "\"seed\": 1, \"colour\": 2}", 1);
        assert!(matches!(RunConfig::from_json(&extra), Err(Error::Config(_))));
        let top = MINIMAL.replacen('{', "{\"extra\": 1,", 1);
        assert!(matches!(RunConfig::from_json(&top), Err(Error::Config(_))));
    }

    #[test]
    fn cross_field_checks() {
        let bad_stride = MINIMAL.replace("3-by-2", "3x2");
        assert!(matches!(RunConfig::from_json(&bad_stride), Err(Error::Config(_))));
        let enforced = MINIMAL.replacen("\"target\"", "\"solver\": {\"mode\": \"enforced\"}, \"target\"", 1);
        assert!(matches!(RunConfig::from_json(&enforced), Err(Error::Config(_))));
        let both = MINIMAL.replace("{\"kind\": \"square\", \"side\": 4}}", "{\"kind\": \"square\", \"side\": 4}, \"file\": \"t.raw\"}");
        assert!(matches!(RunConfig::from_json(&both), Err(Error::Config(_))));
    }

    #[test]
    fn plan_digest_ignores_noise() {
        let a = RunConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.noise.seed = 99;
        assert_eq!(a.plan_digest(), b.plan_digest());
        assert_ne!(a.digest(), b.digest());
        b.solver.tol = 1e-8;
        assert_ne!(a.plan_digest(), b.plan_digest());
    }
}
