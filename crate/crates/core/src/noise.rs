//! Monte Carlo noise on a planned projection.
//!
//! Three sources, composed in this order when combined: exposure jitter on the
//! weights, then mask displacement, then per-mask photon counting. Each source
//! draws from its own stream of the run seed, so enabling one source never
//! changes the draws of another.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{self, snr_json};
use crate::error::{Error, Result};
use crate::fov::{FovStack, Masters};
use crate::grid::Grid2D;
use crate::planner::{noise_free_projection, Plan};
use crate::rng::{self, stream};
use crate::target::TargetImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Photons per pixel per unit weight.
    #[serde(default = "default_lambda")]
    pub lambda_photons: f64,
    /// Exposure standard deviation, in weight units.
    #[serde(default)]
    pub sigma_w: f64,
    /// Positional standard deviation per axis, in pixels.
    #[serde(default)]
    pub sigma_ij: f64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub poisson: bool,
    #[serde(default)]
    pub exposure: bool,
    #[serde(default)]
    pub translational: bool,
}

fn default_lambda() -> f64 {
    1e4
}

fn default_runs() -> usize {
    100
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            lambda_photons: default_lambda(),
            sigma_w: 0.0,
            sigma_ij: 0.0,
            runs: default_runs(),
            seed: 0,
            poisson: false,
            exposure: false,
            translational: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Poisson,
    Exposure,
    Translational,
    All,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Poisson => "poisson",
            Source::Exposure => "exposure",
            Source::Translational => "translational",
            Source::All => "all",
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_photons > 0.0 && self.lambda_photons.is_finite()) {
            return Err(Error::Argument(format!("lambda_photons must be positive, got {}", self.lambda_photons)));
        }
        if !(self.sigma_w >= 0.0 && self.sigma_w.is_finite()) || !(self.sigma_ij >= 0.0 && self.sigma_ij.is_finite()) {
            return Err(Error::Argument("noise sigmas must be finite and non-negative".into()));
        }
        if self.runs == 0 {
            return Err(Error::Argument("runs must be at least 1".into()));
        }
        Ok(())
    }

    /// Copy with exactly the given source enabled (`All` enables all three).
    pub fn only(&self, source: Source) -> NoiseConfig {
        let mut c = self.clone();
        c.poisson = matches!(source, Source::Poisson | Source::All);
        c.exposure = matches!(source, Source::Exposure | Source::All);
        c.translational = matches!(source, Source::Translational | Source::All);
        c
    }

    pub fn any_enabled(&self) -> bool {
        self.poisson || self.exposure || self.translational
    }

    /// Border excluded from SNR: one pixel whenever masks are displaced.
    pub fn border_crop_px(&self) -> usize {
        usize::from(self.translational)
    }

    /// Margin a stack needs so displaced bicubic reads stay inside the master.
    pub fn required_margin(&self) -> usize {
        if self.sigma_ij > 0.0 {
            (3.0 * self.sigma_ij).ceil() as usize + 2
        } else {
            0
        }
    }
}

fn support_weights(plan: &Plan, stack: &FovStack) -> Result<()> {
    if plan.weights.len() != stack.len() {
        return Err(Error::Shape { expected: (stack.len(), 1), got: (plan.weights.len(), 1) });
    }
    Ok(())
}

/// Draws a photon count for mean `mu`; zero mean gives zero.
fn poisson_draw(mu: f64, rng: &mut ChaCha8Rng) -> f64 {
    if mu <= 0.0 {
        return 0.0;
    }
    Poisson::new(mu).expect("finite positive Poisson mean").sample(rng)
}

fn add_counts(acc: &mut [f64], fov: &[f64], scale: f64, rng: &mut ChaCha8Rng) {
    for (a, r) in acc.iter_mut().zip(fov) {
        *a += poisson_draw(scale * r, rng);
    }
}

/// Photon noise: each exposed mask contributes independent Poisson counts.
pub fn simulate_poisson(stack: &FovStack, plan: &Plan, cfg: &NoiseConfig, run_seed: u64) -> Result<Grid2D> {
    cfg.validate()?;
    support_weights(plan, stack)?;
    let (m, n) = stack.fov_shape();
    let mut rng = rng::stream_rng(run_seed, stream::POISSON);
    let mut acc = vec![0.0; m * n];
    for &k in &plan.support {
        add_counts(&mut acc, stack.fov(k).values(), cfg.lambda_photons * plan.weights[k], &mut rng);
    }
    Grid2D::new(m, n, acc.into_iter().map(|c| c / cfg.lambda_photons).collect())
}

/// Jittered weights `w_k + sigma_w z`, clamped at zero, over the support in
/// ascending order. Returns the weights and how many were clamped.
fn jitter_weights(plan: &Plan, sigma_w: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
    let mut clamped = 0;
    let w = plan
        .support
        .iter()
        .map(|&k| {
            let z: f64 = StandardNormal.sample(rng);
            let v = plan.weights[k] + sigma_w * z;
            if v < 0.0 {
                clamped += 1;
                0.0
            } else {
                v
            }
        })
        .collect();
    (w, clamped)
}

/// Exposure noise, also reporting the number of clamped weights.
pub fn simulate_exposure_counted(stack: &FovStack, plan: &Plan, cfg: &NoiseConfig, run_seed: u64) -> Result<(Grid2D, usize)> {
    cfg.validate()?;
    support_weights(plan, stack)?;
    if cfg.sigma_w == 0.0 {
        return Ok((noise_free_projection(stack, plan)?, 0));
    }
    let (m, n) = stack.fov_shape();
    let mut rng = rng::stream_rng(run_seed, stream::EXPOSURE);
    let (w, clamped) = jitter_weights(plan, cfg.sigma_w, &mut rng);
    let mut acc = vec![0.0; m * n];
    for (&k, &wk) in plan.support.iter().zip(&w) {
        for (a, v) in acc.iter_mut().zip(stack.fov(k).values()) {
            *a += wk * v;
        }
    }
    Ok((Grid2D::new(m, n, acc)?, clamped))
}

pub fn simulate_exposure(stack: &FovStack, plan: &Plan, cfg: &NoiseConfig, run_seed: u64) -> Result<Grid2D> {
    Ok(simulate_exposure_counted(stack, plan, cfg, run_seed)?.0)
}

/// One axis draw from `N(0, sigma^2)` restricted to `|d| <= 3 sigma` by resampling.
fn truncated_normal(sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    let normal = Normal::new(0.0, sigma).expect("finite non-negative sigma");
    loop {
        let d: f64 = normal.sample(rng);
        if d.abs() <= 3.0 * sigma {
            return d;
        }
    }
}

type Shift = ((f64, f64), Option<(f64, f64)>);

fn draw_shifts(stack: &FovStack, plan: &Plan, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Shift> {
    let consecutive = stack.is_consecutive();
    plan.support
        .iter()
        .map(|_| {
            let a = (truncated_normal(sigma, rng), truncated_normal(sigma, rng));
            let b = consecutive.then(|| (truncated_normal(sigma, rng), truncated_normal(sigma, rng)));
            (a, b)
        })
        .collect()
}

fn check_translational(stack: &FovStack, masters: Option<Masters>, cfg: &NoiseConfig) -> Result<()> {
    if cfg.sigma_ij == 0.0 {
        return Ok(());
    }
    if masters.is_none() {
        return Err(Error::Argument("translational noise needs the master mask(s)".into()));
    }
    let need = cfg.required_margin();
    if stack.margin_px() < need {
        return Err(Error::Precondition(format!(
            "stack margin {} px is below the {} px needed for sigma_ij = {}",
            stack.margin_px(),
            need,
            cfg.sigma_ij
        )));
    }
    Ok(())
}

/// Displaced masks: every exposed FOV is re-read from its master(s) at a
/// randomly perturbed sub-pixel offset.
pub fn simulate_translational(masters: Masters, stack: &FovStack, plan: &Plan, cfg: &NoiseConfig, run_seed: u64) -> Result<Grid2D> {
    cfg.validate()?;
    support_weights(plan, stack)?;
    check_translational(stack, Some(masters), cfg)?;
    if cfg.sigma_ij == 0.0 {
        return noise_free_projection(stack, plan);
    }
    let (m, n) = stack.fov_shape();
    let mut rng = rng::stream_rng(run_seed, stream::TRANSLATION);
    let shifts = draw_shifts(stack, plan, cfg.sigma_ij, &mut rng);
    let mut acc = vec![0.0; m * n];
    for (&k, &(sa, sb)) in plan.support.iter().zip(&shifts) {
        let f = stack.extract_shifted(masters, k, sa, sb)?;
        let w = plan.weights[k];
        for (a, v) in acc.iter_mut().zip(f.values()) {
            *a += w * v;
        }
    }
    Grid2D::new(m, n, acc)
}

/// All enabled sources, nested as exposure -> displacement -> photon counting.
pub fn simulate_all(masters: Option<Masters>, stack: &FovStack, plan: &Plan, cfg: &NoiseConfig, run_seed: u64) -> Result<Grid2D> {
    Ok(simulate_all_counted(masters, stack, plan, cfg, run_seed)?.0)
}

fn simulate_all_counted(
    masters: Option<Masters>,
    stack: &FovStack,
    plan: &Plan,
    cfg: &NoiseConfig,
    run_seed: u64,
) -> Result<(Grid2D, usize)> {
    cfg.validate()?;
    support_weights(plan, stack)?;
    let displaced = cfg.translational && cfg.sigma_ij > 0.0;
    if displaced {
        check_translational(stack, masters, cfg)?;
    }
    let (m, n) = stack.fov_shape();

    let (weights, clamped) = if cfg.exposure && cfg.sigma_w > 0.0 {
        jitter_weights(plan, cfg.sigma_w, &mut rng::stream_rng(run_seed, stream::EXPOSURE))
    } else {
        (plan.support.iter().map(|&k| plan.weights[k]).collect(), 0)
    };
    let shifts = if displaced {
        Some(draw_shifts(stack, plan, cfg.sigma_ij, &mut rng::stream_rng(run_seed, stream::TRANSLATION)))
    } else {
        None
    };
    let mut photon_rng = cfg.poisson.then(|| rng::stream_rng(run_seed, stream::POISSON));

    let mut acc = vec![0.0; m * n];
    for (i, (&k, &w)) in plan.support.iter().zip(&weights).enumerate() {
        let shifted;
        let fov = match (&shifts, masters) {
            (Some(s), Some(ms)) => {
                shifted = stack.extract_shifted(ms, k, s[i].0, s[i].1)?;
                &shifted
            }
            _ => stack.fov(k),
        };
        match photon_rng.as_mut() {
            Some(rng) => add_counts(&mut acc, fov.values(), cfg.lambda_photons * w, rng),
            None => {
                for (a, v) in acc.iter_mut().zip(fov.values()) {
                    *a += w * v;
                }
            }
        }
    }
    if cfg.poisson {
        acc.iter_mut().for_each(|a| *a /= cfg.lambda_photons);
    }
    Ok((Grid2D::new(m, n, acc)?, clamped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// Projection of run 0, in contrast units.
    #[serde(skip)]
    pub projection: Option<Grid2D>,
    #[serde(with = "snr_json::vec")]
    pub per_run_snr: Vec<f64>,
    #[serde(with = "snr_json::scalar")]
    pub snr_mean: f64,
    #[serde(with = "snr_json::scalar")]
    pub snr_std: f64,
    pub border_crop_px: usize,
    pub clamp_count: usize,
    pub runs: usize,
}

/// Mean and sample standard deviation. Identical values (including all
/// infinite) give zero spread.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if !mean.is_finite() || n < 2 {
        return (mean, if n < 2 { 0.0 } else { f64::INFINITY });
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Runs `cfg.runs` independent realizations with seeds `run_seed(cfg.seed, i)`
/// and summarizes their SNR.
pub fn monte_carlo(
    masters: Option<Masters>,
    stack: &FovStack,
    plan: &Plan,
    target: &TargetImage,
    cfg: &NoiseConfig,
) -> Result<SimResult> {
    cfg.validate()?;
    let border = cfg.border_crop_px();
    let runs: Vec<(f64, usize, Option<Grid2D>)> = (0..cfg.runs)
        .into_par_iter()
        .map(|i| {
            let (p, clamped) = simulate_all_counted(masters, stack, plan, cfg, rng::run_seed(cfg.seed, i as u64))?;
            let s = analytics::snr(target, &p, border)?;
            Ok((s, clamped, (i == 0).then_some(p)))
        })
        .collect::<Result<_>>()?;
    let per_run_snr: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let clamp_count = runs.iter().map(|r| r.1).sum();
    let projection = runs.into_iter().next().and_then(|r| r.2);
    let (snr_mean, snr_std) = mean_std(&per_run_snr);
    Ok(SimResult { projection, per_run_snr, snr_mean, snr_std, border_crop_px: border, clamp_count, runs: cfg.runs })
}
