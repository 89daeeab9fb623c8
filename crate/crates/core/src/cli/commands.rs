//! The subcommands. Each reads the run config, rebuilds whatever inputs it
//! needs deterministically, and writes its outputs into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{MaskSection, RunConfig, SamplingProtocol, SolverMode};
use crate::analytics::{self, predict_all, report_plan, NoisePrediction, Report, CSV_HEADER};
use crate::error::{Error, Result};
use crate::fov::{
    sample_consecutive, sample_random, sample_systematic, sample_unique_tiling, ConsecutiveProtocol, FovStack, Masters,
    StackManifest, Stride,
};
use crate::grid::Grid2D;
use crate::io::{self, Affine, GridMeta};
use crate::mask::{energy_correct, ingest_mask, mask_stats, synthesize_speckle, MasterMask, MaskStats, SpeckleParams};
use crate::noise::{monte_carlo, SimResult, Source};
use crate::planner::{noise_free_projection, plan_for, Plan, SolveOptions};
use crate::routing::{path_length, plan_route, Route};
use crate::target::{gaussian_smooth, make_pattern, normalize, TargetImage};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Common header of every JSON payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_digest: String,
    #[serde(flatten)]
    pub payload: T,
}

pub struct Session {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub quiet: bool,
}

impl Session {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn pixel_path(&self, stem: &str) -> PathBuf {
        self.path(&format!("{stem}.{}", self.cfg.output.pixel_format.extension()))
    }

    fn write_json<T: Serialize>(&self, name: &str, command: &str, payload: T) -> Result<PathBuf> {
        let env = Envelope {
            tool: "ghostplan".into(),
            version: VERSION.into(),
            command: command.into(),
            config_digest: self.cfg.digest(),
            payload,
        };
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        fs::write(&path, text)?;
        self.say(format!("wrote {}", path.display()));
        Ok(path)
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str, hint: &str) -> Result<Envelope<T>> {
        let path = self.path(name);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Precondition(format!("cannot read {} ({e}); run `{hint}` first", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write_pixels(&self, stem: &str, grid: &Grid2D, label: &str, pitch_um: Option<f64>) -> Result<PathBuf> {
        let path = self.pixel_path(stem);
        let affine = match self.cfg.output.pixel_format {
            super::config::PixelFormat::Pgm if grid.min() < 0.0 || grid.max() > 1.0 => {
                Some(Affine::spanning(grid.min(), grid.max()))
            }
            _ => None,
        };
        let meta = GridMeta {
            rows: Some(grid.rows()),
            cols: Some(grid.cols()),
            pitch_um,
            label: Some(label.to_string()),
            affine,
        };
        io::write_grid(&path, grid, &meta)?;
        self.say(format!("wrote {}", path.display()));
        Ok(path)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text)?;
        self.say(format!("wrote {}", path.display()));
        Ok(path)
    }
}

fn load_mask(section: &MaskSection) -> Result<MasterMask> {
    let (mask, label, exponent) = match section {
        MaskSection::Synth { rows, cols, correlation_px, t_min, t_max, seed, pitch_um, label, energy_exponent } => {
            let p = SpeckleParams {
                rows: *rows,
                cols: *cols,
                correlation_px: *correlation_px,
                t_min: *t_min,
                t_max: *t_max,
                seed: *seed,
            };
            let m = synthesize_speckle(&p)?.with_pitch(*pitch_um)?;
            (m, label.clone(), *energy_exponent)
        }
        MaskSection::Ingest { path, pitch_um, label, energy_exponent } => {
            let mut m = ingest_mask(path)?;
            if let Some(p) = pitch_um {
                m = m.with_pitch(*p)?;
            }
            (m, label.clone(), *energy_exponent)
        }
    };
    let mask = match exponent {
        Some(e) => energy_correct(&mask, e)?,
        None => mask,
    };
    Ok(match label {
        Some(l) => mask.with_label(l),
        None => mask,
    })
}

pub struct Inputs {
    pub a: MasterMask,
    pub b: Option<MasterMask>,
    pub stack: FovStack,
    pub target: TargetImage,
}

impl Inputs {
    pub fn masters(&self) -> Masters<'_> {
        match &self.b {
            Some(b) => Masters::pair(&self.a, b),
            None => Masters::single(&self.a),
        }
    }
}

fn masks(cfg: &RunConfig) -> Result<(MasterMask, Option<MasterMask>)> {
    let a = load_mask(&cfg.mask)?;
    let b = cfg.mask_b.as_ref().map(load_mask).transpose()?;
    Ok((a, b))
}

fn stride(s: &str) -> Result<Stride> {
    Stride::parse_x_by_y(s)
}

pub fn build_stack(cfg: &RunConfig, a: &MasterMask, b: Option<&MasterMask>) -> Result<FovStack> {
    let s = &cfg.sampling;
    let fov = (s.fov_rows, s.fov_cols);
    let margin = cfg.effective_margin();
    let need_b = || b.ok_or_else(|| Error::Config("consecutive protocol needs mask_b".into()));
    let stack = match &s.protocol {
        SamplingProtocol::Systematic { stride: st, count } => sample_systematic(a, fov, stride(st)?, *count, margin)?,
        SamplingProtocol::Random { count, seed } => sample_random(a, fov, *count, *seed, margin)?,
        SamplingProtocol::UniqueTiling => sample_unique_tiling(a, fov, margin)?,
        SamplingProtocol::ConsecutiveSystematic { stride_a, stride_b, count } => {
            let p = ConsecutiveProtocol::Systematic { stride_a: stride(stride_a)?, stride_b: stride(stride_b)? };
            sample_consecutive(a, need_b()?, fov, p, *count, margin)?
        }
        SamplingProtocol::ConsecutiveUnique { stride_a, count } => {
            let p = ConsecutiveProtocol::Unique { stride_a: stride(stride_a)? };
            sample_consecutive(a, need_b()?, fov, p, *count, margin)?
        }
        SamplingProtocol::ConsecutiveRandom { count, seed } => {
            sample_consecutive(a, need_b()?, fov, ConsecutiveProtocol::Random { seed: *seed }, *count, margin)?
        }
    };
    match s.source_corner {
        Some(c) => stack.with_source_profile(c),
        None => Ok(stack),
    }
}

pub fn build_target(cfg: &RunConfig) -> Result<TargetImage> {
    let t = &cfg.target;
    let (m, n) = (cfg.sampling.fov_rows, cfg.sampling.fov_cols);
    let img = match (&t.pattern, &t.file) {
        (Some(p), _) => make_pattern(p, m, n)?,
        (None, Some(f)) => {
            let g = io::read_grid(f)?.grid;
            g.ensure_shape((m, n))?;
            normalize(&g)?
        }
        (None, None) => return Err(Error::Config("target needs a pattern or a file".into())),
    };
    match t.smooth_sigma_px {
        Some(s) => gaussian_smooth(&img, s),
        None => Ok(img),
    }
}

pub fn build_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let (a, b) = masks(cfg)?;
    let stack = build_stack(cfg, &a, b.as_ref())?;
    let target = build_target(cfg)?;
    Ok(Inputs { a, b, stack, target })
}

fn solve(cfg: &RunConfig, inputs: &Inputs) -> Result<Plan> {
    let opts = SolveOptions { tol: cfg.solver.tol, max_iter: cfg.solver.max_iter };
    let pedestal = match cfg.solver.mode {
        SolverMode::Demeaned => None,
        SolverMode::Enforced => cfg.solver.pedestal_target,
    };
    plan_for(&inputs.stack, &inputs.target, pedestal, opts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskRecord {
    pub role: String,
    pub file: String,
    pub label: String,
    pub rows: usize,
    pub cols: usize,
    pub pitch_um: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn synth_mask(s: &Session) -> Result<()> {
    let (a, b) = masks(&s.cfg)?;
    let mut records = Vec::new();
    for (role, m) in [("mask", Some(&a)), ("mask_b", b.as_ref())] {
        let Some(m) = m else { continue };
        let path = s.write_pixels(role, m.grid(), m.label(), Some(m.pitch_um()))?;
        let g = m.grid();
        records.push(MaskRecord {
            role: role.into(),
            file: file_name(&path),
            label: m.label().into(),
            rows: g.rows(),
            cols: g.cols(),
            pitch_um: m.pitch_um(),
            mean: g.mean(),
            min: g.min(),
            max: g.max(),
        });
    }
    #[derive(Serialize)]
    struct Payload {
        masks: Vec<MaskRecord>,
    }
    s.write_json("synth-mask.json", "synth-mask", Payload { masks: records })?;
    Ok(())
}

pub const MASK_STATS_HEADER: &str = "label,rows,cols,pitch_um,mean,variance,delroughness,mode_freq,mean_freq,std_freq";

fn stats_row(st: &MaskStats) -> String {
    let summary = match &st.summary {
        Some(x) => format!("{},{},{}", x.mode_freq, x.mean_freq, x.std_freq),
        None => ",,".into(),
    };
    format!(
        "{},{},{},{},{},{},{},{}",
        st.label.replace([',', '\n'], " "),
        st.rows,
        st.cols,
        st.pitch_um,
        st.mean,
        st.variance,
        st.delroughness,
        summary
    )
}

pub fn cmd_mask_stats(s: &Session) -> Result<()> {
    let (a, b) = masks(&s.cfg)?;
    let stats: Vec<MaskStats> = [Some(&a), b.as_ref()]
        .into_iter()
        .flatten()
        .map(|m| mask_stats(m, s.cfg.output.spectrum_bins))
        .collect::<Result<_>>()?;
    let mut csv = format!("{MASK_STATS_HEADER}\n");
    for st in &stats {
        csv.push_str(&stats_row(st));
        csv.push('\n');
    }
    #[derive(Serialize)]
    struct Payload {
        stats: Vec<MaskStats>,
    }
    s.write_json("mask-stats.json", "mask-stats", Payload { stats })?;
    s.write_text("mask-stats.csv", &csv)?;
    Ok(())
}

pub fn make_target(s: &Session) -> Result<()> {
    let t = build_target(&s.cfg)?;
    let path = s.write_pixels("target", t.grid(), "target", None)?;
    #[derive(Serialize)]
    struct Payload {
        file: String,
        rows: usize,
        cols: usize,
        norm_sq: f64,
        contrast: f64,
    }
    let (rows, cols) = t.shape();
    let payload = Payload { file: file_name(&path), rows, cols, norm_sq: t.norm_sq(), contrast: t.contrast() };
    s.write_json("make-target.json", "make-target", payload)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanPayload {
    pub plan_digest: String,
    pub mask_label: String,
    pub pitch_um: f64,
    pub stride: String,
    pub norm_sq: f64,
    pub n_prime: usize,
    pub total_weight: f64,
    pub mean_weight: f64,
    pub mean_transmission: f64,
    pub projection_file: String,
    pub plan: Plan,
    pub stack: StackManifest,
}

pub fn cmd_plan(s: &Session) -> Result<()> {
    let inputs = build_inputs(&s.cfg)?;
    let (plan, failure) = match solve(&s.cfg, &inputs) {
        Ok(p) => (p, None),
        Err(Error::NotConverged { iterations, best }) => (*best.clone(), Some(Error::NotConverged { iterations, best })),
        Err(e) => return Err(e),
    };
    let projection = noise_free_projection(&inputs.stack, &plan)?;
    let path = s.write_pixels("projection", &projection, "noise-free projection", Some(inputs.a.pitch_um()))?;
    let payload = PlanPayload {
        plan_digest: s.cfg.plan_digest(),
        mask_label: inputs.a.label().into(),
        pitch_um: inputs.a.pitch_um(),
        stride: s.cfg.sampling.protocol.stride_label(),
        norm_sq: inputs.target.norm_sq(),
        n_prime: plan.n_prime(),
        total_weight: plan.total_weight(),
        mean_weight: plan.mean_weight(),
        mean_transmission: plan.mean_transmission(),
        projection_file: file_name(&path),
        plan,
        stack: inputs.stack.manifest(),
    };
    s.say(format!(
        "N = {}, N' = {}, pedestal = {}, noise-free SNR = {}",
        inputs.stack.len(),
        payload.n_prime,
        payload.plan.pedestal,
        analytics::snr_json::format(payload.plan.noise_free_snr)
    ));
    s.write_json("plan.json", "plan", payload)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Loads `plan.json` and checks that it was made from this configuration.
fn load_plan(s: &Session) -> Result<PlanPayload> {
    let env: Envelope<PlanPayload> = s.read_json("plan.json", "plan")?;
    if env.payload.plan_digest != s.cfg.plan_digest() {
        return Err(Error::Precondition(
            "plan.json was made from a different mask, sampling, target or solver configuration".into(),
        ));
    }
    Ok(env.payload)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceResult {
    pub source: Source,
    #[serde(flatten)]
    pub result: SimResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulatePayload {
    pub plan_digest: String,
    pub noise: crate::noise::NoiseConfig,
    /// True when no noise source is enabled and nothing was sampled.
    pub noise_free: bool,
    pub results: Vec<SourceResult>,
}

/// Sources simulated for a config: each enabled one alone, then their combination.
pub fn sources(cfg: &crate::noise::NoiseConfig) -> Vec<Source> {
    let mut v: Vec<Source> = [
        (cfg.poisson, Source::Poisson),
        (cfg.exposure, Source::Exposure),
        (cfg.translational, Source::Translational),
    ]
    .into_iter()
    .filter_map(|(on, src)| on.then_some(src))
    .collect();
    v.push(Source::All);
    v
}

pub fn cmd_simulate(s: &Session) -> Result<()> {
    let planned = load_plan(s)?;
    let inputs = build_inputs(&s.cfg)?;
    let noise = &s.cfg.noise;
    let mut results = Vec::new();
    if noise.any_enabled() {
        for src in sources(noise) {
            let cfg = match src {
                Source::All => noise.clone(),
                one => noise.only(one),
            };
            let masters = cfg.translational.then(|| inputs.masters());
            let r = monte_carlo(masters, &inputs.stack, &planned.plan, &inputs.target, &cfg)?;
            if s.cfg.output.dump_projections {
                if let Some(p) = &r.projection {
                    s.write_pixels(&format!("simulate-{}", src.name()), p, src.name(), Some(inputs.a.pitch_um()))?;
                }
            }
            s.say(format!(
                "{}: SNR {} +/- {}",
                src.name(),
                analytics::snr_json::format(r.snr_mean),
                analytics::snr_json::format(r.snr_std)
            ));
            results.push(SourceResult { source: src, result: r });
        }
    } else {
        // Nothing to sample: every realization equals the noise-free projection.
        let r = SimResult {
            projection: None,
            per_run_snr: vec![f64::INFINITY; noise.runs],
            snr_mean: f64::INFINITY,
            snr_std: 0.0,
            border_crop_px: 0,
            clamp_count: 0,
            runs: noise.runs,
        };
        results.push(SourceResult { source: Source::All, result: r });
    }
    let payload = SimulatePayload {
        plan_digest: planned.plan_digest,
        noise: noise.clone(),
        noise_free: !noise.any_enabled(),
        results,
    };
    s.write_json("simulate.json", "simulate", payload)?;
    Ok(())
}

pub fn cmd_predict(s: &Session) -> Result<()> {
    let planned = load_plan(s)?;
    let inputs = build_inputs(&s.cfg)?;
    let predictions = predict_all(&inputs.target, &inputs.stack, &planned.plan, &s.cfg.noise)?;
    for p in &predictions {
        s.say(format!("{}: predicted SNR {}", p.source.name(), analytics::snr_json::format(p.predicted_snr)));
    }
    #[derive(Serialize)]
    struct Payload {
        plan_digest: String,
        noise: crate::noise::NoiseConfig,
        predictions: Vec<NoisePrediction>,
    }
    s.write_json("predict.json", "predict", Payload { plan_digest: planned.plan_digest, noise: s.cfg.noise.clone(), predictions })?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutePayload {
    pub plan_digest: String,
    pub polyline_file: String,
    #[serde(flatten)]
    pub route: Route,
}

pub fn cmd_route(s: &Session) -> Result<()> {
    let routing = s
        .cfg
        .routing
        .clone()
        .ok_or_else(|| Error::Config("route needs a routing section".into()))?;
    let planned = load_plan(s)?;
    if planned.stack.master_b.is_some() {
        return Err(Error::Argument("routing covers single-mask stacks only".into()));
    }
    let plan = &planned.plan;
    let offsets = &planned.stack.offsets;
    let points: Vec<(f64, f64)> = plan.support.iter().map(|&k| (offsets[k].a.0 as f64, offsets[k].a.1 as f64)).collect();
    let mut route = plan_route(
        &points,
        routing.seed,
        plan.total_weight(),
        s.cfg.noise.lambda_photons,
        planned.pitch_um,
        routing.v_mm_s,
        routing.flux,
    )?;
    let mut csv = String::from("step,fov,row,col,cumulative_px\n");
    let mut walked = 0.0;
    for (step, &i) in route.order.iter().enumerate() {
        if step > 0 {
            walked += path_length(&points, &route.order[step - 1..=step]);
        }
        let (r, c) = points[i];
        csv.push_str(&format!("{step},{},{r},{c},{walked}\n", plan.support[i]));
    }
    route.order = route.order.iter().map(|&i| plan.support[i]).collect();
    s.say(format!(
        "path {} px, scan {} s, exposure {} s",
        route.path_length_px, route.scan_time_s, route.exposure_time_s
    ));
    let csv_path = s.write_text("route.csv", &csv)?;
    let payload = RoutePayload { plan_digest: planned.plan_digest, polyline_file: file_name(&csv_path), route };
    s.write_json("route.json", "route", payload)?;
    Ok(())
}

fn read_optional<T>(s: &Session, name: &str, digest: &str) -> Result<Option<T>>
where
    T: DeserializeOwned + HasPlanDigest,
{
    if !s.path(name).exists() {
        return Ok(None);
    }
    let env: Envelope<T> = s.read_json(name, "")?;
    if env.payload.plan_digest() != digest {
        return Err(Error::Precondition(format!("{name} belongs to a different plan")));
    }
    Ok(Some(env.payload))
}

trait HasPlanDigest {
    fn plan_digest(&self) -> &str;
}

impl HasPlanDigest for SimulatePayload {
    fn plan_digest(&self) -> &str {
        &self.plan_digest
    }
}

impl HasPlanDigest for RoutePayload {
    fn plan_digest(&self) -> &str {
        &self.plan_digest
    }
}

pub fn cmd_report(s: &Session) -> Result<()> {
    let planned = load_plan(s)?;
    let inputs = build_inputs(&s.cfg)?;
    let sim: Option<SimulatePayload> = read_optional(s, "simulate.json", &planned.plan_digest)?;
    let route: Option<RoutePayload> = read_optional(s, "route.json", &planned.plan_digest)?;
    let sim_results: Vec<(Source, SimResult)> = sim
        .as_ref()
        .map(|p| p.results.iter().map(|r| (r.source, r.result.clone())).collect())
        .unwrap_or_default();
    // Predictions follow the noise parameters that were simulated, if any.
    let noise = sim.as_ref().map(|p| p.noise.clone()).unwrap_or_else(|| s.cfg.noise.clone());
    let durations = route.as_ref().map(|r| (r.route.scan_time_s, r.route.exposure_time_s));
    let report: Report = report_plan(
        &planned.mask_label,
        &planned.stride,
        &inputs.target,
        &inputs.stack,
        &planned.plan,
        &noise,
        &sim_results,
        durations,
    )?;
    let csv = format!("{CSV_HEADER}\n{}\n", report.csv_row());
    #[derive(Serialize)]
    struct Payload {
        plan_digest: String,
        report: Report,
    }
    s.write_json("report.json", "report", Payload { plan_digest: planned.plan_digest, report })?;
    s.write_text("report.csv", &csv)?;
    Ok(())
}
