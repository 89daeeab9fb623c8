//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.
//!
//! Oracles here are computed independently of the library wherever the
//! criterion allows: closed forms, exhaustive subset search, own summations.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ghostplan::analytics::{poisson_snr, predict_exposure, predict_poisson, predict_translational};
use ghostplan::fov::{sample_systematic, FovStack, Masters, Stride};
use ghostplan::mask::{synthesize_speckle, MasterMask, SpeckleParams};
use ghostplan::nnls::{nnls, ColMajor, NnlsOptions};
use ghostplan::noise::{
    monte_carlo, simulate_all, simulate_exposure, simulate_poisson, simulate_translational, NoiseConfig, Source,
};
use ghostplan::planner::{build_design_matrix, plan_for, DesignMode, Plan, SolveOptions};
use ghostplan::rng::run_seed;
use ghostplan::routing::{estimate_duration, path_length, route_tsp};
use ghostplan::target::{make_pattern, Pattern, TargetImage};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Every plan built in the run, reduced to what the pedestal check needs.
#[derive(Default)]
struct PedestalLog {
    entries: Vec<(String, f64)>,
}

impl PedestalLog {
    /// Worst relative disagreement among the three pedestal expressions and
    /// the plan's own figure, computed from the raw FOV values.
    fn record(&mut self, label: &str, stack: &FovStack, plan: &Plan) {
        let (m, n) = stack.fov_shape();
        let px = (m * n) as f64;
        let mut direct = 0.0;
        let mut proj = vec![0.0; m * n];
        let mut w_sum = 0.0;
        let mut weighted_mean_num = 0.0;
        let mut n_prime = 0usize;
        for (k, &w) in plan.weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            let vals = stack.fov(k).values();
            let mean = vals.iter().sum::<f64>() / px;
            direct += w * mean;
            w_sum += w;
            weighted_mean_num += w * mean;
            n_prime += 1;
            for (p, v) in proj.iter_mut().zip(vals) {
                *p += w * v;
            }
        }
        let spatial = proj.iter().sum::<f64>() / px;
        let factored = n_prime as f64 * (w_sum / n_prime as f64) * (weighted_mean_num / w_sum);
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
        let worst = [rel(factored, direct), rel(spatial, direct), rel(plan.pedestal, direct)]
            .into_iter()
            .fold(0.0f64, f64::max);
        self.entries.push((label.to_string(), worst));
    }
}

/// Largest KKT violation of `min ||A x - b||, x >= 0`, relative to `||A^T b||_inf`.
fn kkt_violation(a: &[f64], rows: usize, cols: usize, b: &[f64], x: &[f64]) -> f64 {
    let mut r = b.to_vec();
    for j in 0..cols {
        if x[j] != 0.0 {
            for i in 0..rows {
                r[i] -= a[j * rows + i] * x[j];
            }
        }
    }
    let mut scale = 0.0f64;
    let mut worst = 0.0f64;
    for j in 0..cols {
        let col = &a[j * rows..(j + 1) * rows];
        let atb: f64 = col.iter().zip(b).map(|(c, v)| c * v).sum();
        let g: f64 = col.iter().zip(&r).map(|(c, v)| c * v).sum();
        scale = scale.max(atb.abs());
        let v = if x[j] > 0.0 { g.abs() } else { g.max(0.0) };
        worst = worst.max(v);
    }
    if scale == 0.0 {
        0.0
    } else {
        worst / scale
    }
}

fn plan_kkt(stack: &FovStack, target: &TargetImage, plan: &Plan) -> f64 {
    let mode = match plan.pedestal_target {
        Some(_) => DesignMode::Raw,
        None => DesignMode::DeMeaned,
    };
    let d = build_design_matrix(stack, mode).unwrap();
    let rows = d.rows();
    let mut a = Vec::with_capacity(rows * d.cols());
    for k in 0..d.cols() {
        a.extend_from_slice(d.column(k));
    }
    let b: Vec<f64> = target.grid().values().iter().map(|v| v + plan.pedestal_target.unwrap_or(0.0)).collect();
    kkt_violation(&a, rows, d.cols(), &b, &plan.weights)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    // Binary pattern with f of its pixels on: E[I^2] = f (1 - f).
    let binary = |on: f64| {
        let f = on / 1600.0;
        f * (1.0 - f)
    };
    // Ramp 0..n-1 scaled to [0, 1]: variance (n^2 - 1) / (12 (n - 1)^2).
    let ramp = (40.0f64 * 40.0 - 1.0) / (12.0 * 39.0 * 39.0);
    // Quoted figures are compared to half a unit in their last printed digit.
    let cases = [
        ("10x10 square", Pattern::Square { side: 10 }, binary(100.0), 0.0586, 5e-5),
        ("20x20 square", Pattern::Square { side: 20 }, binary(400.0), 0.1875, 5e-5),
        ("1x1 square", Pattern::Square { side: 1 }, binary(1.0), 0.0006246, 5e-8),
        ("linear gradient", Pattern::LinearGradient, ramp, 0.0876, 5e-5),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, pattern, closed, quoted, half_unit) in cases {
        let got = make_pattern(&pattern, 40, 40).unwrap().norm_sq();
        pass &= (got - closed).abs() <= 1e-12 && (got - quoted).abs() <= half_unit;
        parts.push(format!("{name} {got:.6e}"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(1);
    outcome(pass, format!("{}; {:.3} s", parts.join(", "), elapsed.as_secs_f64()))
}

struct Scenario {
    master: MasterMask,
    stack: FovStack,
    target: TargetImage,
    plan: Plan,
    plan_time: Duration,
}

/// Synthetic analogue of the foam stack: 40x40 chart, N = 5 m n FOVs strided 12-by-8.
fn foam_analogue() -> Scenario {
    let master = synthesize_speckle(&SpeckleParams {
        rows: 680,
        cols: 1240,
        correlation_px: 0.7,
        t_min: 0.0,
        t_max: 1.0,
        seed: 7,
    })
    .unwrap();
    let noise = NoiseConfig { sigma_ij: 0.1, ..NoiseConfig::default() };
    let stack =
        sample_systematic(&master, (40, 40), Stride::parse_x_by_y("12-by-8").unwrap(), 8000, noise.required_margin())
            .unwrap();
    let target = make_pattern(&Pattern::ResolutionChart { on_fraction: 0.3 }, 40, 40).unwrap();
    let start = Instant::now();
    let plan = plan_for(&stack, &target, None, SolveOptions::default()).unwrap();
    Scenario { master, stack, target, plan, plan_time: start.elapsed() }
}

fn base_noise() -> NoiseConfig {
    NoiseConfig { lambda_photons: 1e4, sigma_w: 0.01, sigma_ij: 0.1, runs: 100, seed: 1, ..NoiseConfig::default() }
}

fn criterion_2(s: &Scenario) -> Outcome {
    let anchor = poisson_snr(1e4, 0.2097, 121.7).unwrap();
    let start = Instant::now();
    let cfg = base_noise().only(Source::Poisson);
    let mc = monte_carlo(None, &s.stack, &s.plan, &s.target, &cfg).unwrap();
    let pred = predict_poisson(&s.target, &s.plan, &cfg).unwrap().predicted_snr;
    let elapsed = s.plan_time + start.elapsed();
    let rel = (mc.snr_mean / pred - 1.0).abs();
    let pedestal_dominant = s.plan.pedestal >= 10.0 * s.target.grid().max().abs().max(s.target.grid().min().abs());
    let pass = (anchor - 4.15).abs() <= 0.01 && rel <= 0.10 && pedestal_dominant && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "anchor {anchor:.4}; pedestal {:.1}, MC {:.3} +/- {:.3} vs predicted {pred:.3} ({:.1}%); {:.0} s",
            s.plan.pedestal,
            mc.snr_mean,
            mc.snr_std,
            100.0 * rel,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3(s: &Scenario) -> Outcome {
    let cfg = base_noise().only(Source::Exposure);
    let mc = monte_carlo(None, &s.stack, &s.plan, &s.target, &cfg).unwrap();
    let pred = predict_exposure(&s.target, &s.stack, &s.plan, &cfg).unwrap().predicted_snr;
    let rel = (mc.snr_mean / pred - 1.0).abs();
    outcome(
        rel <= 0.15,
        format!("MC {:.3} +/- {:.3} vs predicted {pred:.3} ({:.1}%)", mc.snr_mean, mc.snr_std, 100.0 * rel),
    )
}

fn criterion_4(s: &Scenario) -> Outcome {
    let cfg = base_noise().only(Source::Translational);
    let mc = monte_carlo(Some(Masters::single(&s.master)), &s.stack, &s.plan, &s.target, &cfg).unwrap();
    let pred = predict_translational(&s.target, &s.stack, &s.plan, &cfg).unwrap().predicted_snr;
    let rel = (mc.snr_mean / pred - 1.0).abs();
    let pass = rel <= 0.20 && mc.border_crop_px == 1;
    outcome(
        pass,
        format!(
            "MC {:.3} +/- {:.3} vs predicted {pred:.3} ({:.1}%), border {} px",
            mc.snr_mean,
            mc.snr_std,
            100.0 * rel,
            mc.border_crop_px
        ),
    )
}

/// Exhaustive search over column subsets: unconstrained least squares on each
/// subset, kept when every coefficient is non-negative.
fn subset_oracle(a: &[f64], rows: usize, cols: usize, b: &[f64]) -> f64 {
    let bv = DVector::from_column_slice(b);
    let mut best = bv.norm_squared();
    for mask in 1u32..(1 << cols) {
        let idx: Vec<usize> = (0..cols).filter(|j| mask & (1 << j) != 0).collect();
        let sub = DMatrix::from_fn(rows, idx.len(), |i, c| a[idx[c] * rows + i]);
        let Ok(z) = sub.clone().svd(true, true).solve(&bv, 1e-12) else { continue };
        if z.iter().all(|&v| v >= 0.0) {
            best = best.min((&sub * &z - &bv).norm_squared());
        }
    }
    best
}

fn criterion_5(s: &Scenario, start: Instant) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_obj = 0.0f64;
    let mut worst_kkt = 0.0f64;
    for _ in 0..200 {
        let rows = rng.random_range(1..=8);
        let cols = rng.random_range(1..=10);
        let a: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sol = nnls(ColMajor::new(&a, rows, cols), &b, NnlsOptions::default());
        let mut r = b.clone();
        for j in 0..cols {
            for i in 0..rows {
                r[i] -= a[j * rows + i] * sol.x[j];
            }
        }
        let obj: f64 = r.iter().map(|v| v * v).sum();
        let oracle = subset_oracle(&a, rows, cols, &b);
        worst_obj = worst_obj.max((obj - oracle).abs());
        if sol.x.iter().any(|&v| v < 0.0) {
            worst_obj = f64::INFINITY;
        }
        worst_kkt = worst_kkt.max(kkt_violation(&a, rows, cols, &b, &sol.x));
    }
    let plan_kkt_val = plan_kkt(&s.stack, &s.target, &s.plan);
    let elapsed = start.elapsed() + s.plan_time;
    let pass = worst_obj <= 1e-8
        && worst_kkt <= 1e-10
        && plan_kkt_val <= 1e-10
        && s.plan.noise_free_snr >= 1e4
        && elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "worst objective gap {worst_obj:.1e}, worst KKT {worst_kkt:.1e}; 40x40 N=8000 plan KKT {plan_kkt_val:.1e}, SNR {:.3e}; {:.0} s",
            s.plan.noise_free_snr,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_6(log: &PedestalLog) -> Outcome {
    let worst = log.entries.iter().map(|e| e.1).fold(0.0f64, f64::max);
    let bad: Vec<&str> = log.entries.iter().filter(|e| !(e.1 <= 1e-9)).map(|e| e.0.as_str()).collect();
    outcome(
        bad.is_empty() && !log.entries.is_empty(),
        format!("{} plans, worst relative gap {worst:.1e}{}", log.entries.len(), if bad.is_empty() { String::new() } else { format!(", failing: {}", bad.join(" ")) }),
    )
}

fn criterion_7(log: &mut PedestalLog) -> Outcome {
    let master = synthesize_speckle(&SpeckleParams {
        rows: 400,
        cols: 800,
        correlation_px: 1.0,
        t_min: 0.0,
        t_max: 1.0,
        seed: 7,
    })
    .unwrap();
    let cfg = NoiseConfig { poisson: true, exposure: true, translational: true, ..base_noise() };
    let stack =
        sample_systematic(&master, (16, 16), Stride::parse_x_by_y("12-by-8").unwrap(), 1280, cfg.required_margin()).unwrap();
    let target = make_pattern(&Pattern::ResolutionChart { on_fraction: 0.3 }, 16, 16).unwrap();
    let sweep = [1.0, 5.0, 20.0, 50.0, 100.0];
    let mut snrs = Vec::new();
    let mut kkt_ok = true;
    for p in sweep {
        let plan = plan_for(&stack, &target, Some(p), SolveOptions::default()).unwrap();
        kkt_ok &= plan_kkt(&stack, &target, &plan) <= 1e-10;
        log.record(&format!("enforced-{p}"), &stack, &plan);
        snrs.push(monte_carlo(Some(Masters::single(&master)), &stack, &plan, &target, &cfg).unwrap().snr_mean);
    }
    let peak = (0..snrs.len()).max_by(|&i, &j| snrs[i].total_cmp(&snrs[j])).unwrap();
    let strict = snrs.iter().enumerate().all(|(i, &v)| i == peak || v < snrs[peak]);
    let interior = peak > 0 && peak < snrs.len() - 1;
    let listing: Vec<String> = sweep.iter().zip(&snrs).map(|(p, s)| format!("{p}:{s:.3}")).collect();
    outcome(
        strict && interior && kkt_ok,
        format!("all-noise SNR by pedestal {}; peak at {}", listing.join(" "), sweep[peak]),
    )
}

fn brute_force_open_path(points: &[(f64, f64)]) -> f64 {
    fn permute(k: usize, order: &mut Vec<usize>, points: &[(f64, f64)], best: &mut f64) {
        if k == order.len() {
            let mut len = 0.0;
            for w in order.windows(2) {
                let (a, b) = (points[w[0]], points[w[1]]);
                len += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            }
            *best = best.min(len);
            return;
        }
        for i in k..order.len() {
            order.swap(k, i);
            permute(k + 1, order, points, best);
            order.swap(k, i);
        }
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    let mut best = f64::INFINITY;
    permute(0, &mut order, points, &mut best);
    best
}

fn criterion_8() -> Outcome {
    let exposure = estimate_duration(0.0, 18.93, 1e4, 30.0, 1.0, 1e4).unwrap().exposure_time_s;
    let scan = estimate_duration(3678.3, 0.0, 1e4, 30.0, 1.0, 1e4).unwrap().scan_time_s;
    // The scan anchor is quoted to two decimals.
    let anchors_ok = (exposure - 18.93).abs() <= 1e-12 && ((scan * 100.0).round() / 100.0 - 110.35).abs() <= 1e-9;

    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut optimal = 0;
    let mut nn_ok = true;
    for inst in 0..50 {
        let n = rng.random_range(2..=9);
        let points: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
        let tour = route_tsp(&points, inst).unwrap();
        let len = path_length(&points, &tour.order);
        if (len - brute_force_open_path(&points)).abs() <= 1e-9 {
            optimal += 1;
        }
        nn_ok &= tour.path_length_px <= tour.nearest_neighbor_length_px + 1e-9;
    }
    for inst in 0..50 {
        let n = rng.random_range(10..=300);
        let points: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..500.0), rng.random_range(0.0..500.0))).collect();
        let tour = route_tsp(&points, 1000 + inst).unwrap();
        nn_ok &= tour.path_length_px <= tour.nearest_neighbor_length_px + 1e-9;
    }
    outcome(
        anchors_ok && optimal == 50 && nn_ok,
        format!("t_e {exposure} s, t_s {scan:.4} s; brute-force optimum on {optimal}/50; heuristic <= nearest neighbour: {nn_ok}"),
    )
}

/// Mean, variance and their standard errors of a sample.
fn moments(xs: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    (mean, var, (var / n).sqrt(), ((m4 - var * var) / n).max(0.0).sqrt())
}

fn criterion_9(log: &mut PedestalLog) -> Outcome {
    let master = synthesize_speckle(&SpeckleParams {
        rows: 64,
        cols: 64,
        correlation_px: 1.0,
        t_min: 0.0,
        t_max: 1.0,
        seed: 5,
    })
    .unwrap();
    let stack = sample_systematic(&master, (8, 8), Stride::new(5, 5).unwrap(), 40, 3).unwrap();
    let target = make_pattern(&Pattern::Square { side: 4 }, 8, 8).unwrap();
    let plan = plan_for(&stack, &target, None, SolveOptions::default()).unwrap();
    log.record("composition", &stack, &plan);
    let masters = Masters::single(&master);
    let base = NoiseConfig { lambda_photons: 1e3, sigma_w: 0.05, sigma_ij: 0.3, runs: 1, seed: 0, ..NoiseConfig::default() };
    let runs = 10_000u64;
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for src in [Source::Poisson, Source::Exposure, Source::Translational] {
        let cfg = base.only(src);
        let total = |g: ghostplan::Grid2D| g.values().iter().sum::<f64>();
        let (mut combined, mut dedicated) = (Vec::new(), Vec::new());
        // Base seeds differ above bit 14, so `seed ^ i` never coincides between the samples.
        for i in 0..runs {
            combined.push(total(simulate_all(Some(masters), &stack, &plan, &cfg, run_seed(0xA5A5_0000_0000, i)).unwrap()));
            let s = run_seed(0x5A5A_0000_0000, i);
            dedicated.push(total(match src {
                Source::Poisson => simulate_poisson(&stack, &plan, &cfg, s).unwrap(),
                Source::Exposure => simulate_exposure(&stack, &plan, &cfg, s).unwrap(),
                _ => simulate_translational(masters, &stack, &plan, &cfg, s).unwrap(),
            }));
        }
        let (m1, v1, sm1, sv1) = moments(&combined);
        let (m2, v2, sm2, sv2) = moments(&dedicated);
        let z_mean = (m1 - m2).abs() / (sm1 * sm1 + sm2 * sm2).sqrt();
        let z_var = (v1 - v2).abs() / (sv1 * sv1 + sv2 * sv2).sqrt();
        worst = worst.max(z_mean).max(z_var);
        parts.push(format!("{} z_mean {z_mean:.2} z_var {z_var:.2}", src.name()));
    }
    outcome(worst <= 3.0, parts.join(", "))
}

fn run_cli(args: &[&str], config: &Path, out: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_ghostplan"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{
  "mask": {"source": "synth", "rows": 160, "cols": 200, "correlation_px": 1.0, "seed": 3, "pitch_um": 30.0},
  "sampling": {"fov_rows": 16, "fov_cols": 16, "protocol": {"kind": "systematic", "stride": "6-by-4", "count": 300}},
  "target": {"pattern": {"kind": "resolution_chart"}},
  "noise": {"lambda_photons": 10000, "sigma_w": 0.01, "sigma_ij": 0.1, "runs": 20, "seed": 4,
            "poisson": true, "exposure": true, "translational": true},
  "routing": {"v_mm_s": 1.0, "flux": 10000},
  "output": {"dump_projections": true}
}"#,
    )
    .unwrap();
    let commands = ["synth-mask", "mask-stats", "make-target", "plan", "simulate", "predict", "route", "report"];
    let outs = [dir.path().join("a"), dir.path().join("b")];
    for out in &outs {
        for c in commands {
            if !run_cli(&[c], &config, out) {
                return outcome(false, format!("`{c}` failed"));
            }
        }
    }
    let mut names: Vec<String> = std::fs::read_dir(&outs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let json_count = names.iter().filter(|n| n.ends_with(".json")).count();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(outs[0].join(n)).ok() != std::fs::read(outs[1].join(n)).ok())
        .collect();
    outcome(
        differing.is_empty() && json_count >= commands.len(),
        format!("{} files ({json_count} JSON) compared across two runs of {} commands; differing: {differing:?}", names.len(), commands.len()),
    )
}

fn main() {
    let names = [
        "image-norm identities",
        "Poisson prediction anchor and Monte Carlo agreement",
        "exposure prediction vs Monte Carlo",
        "translational prediction vs Monte Carlo",
        "NNLS correctness",
        "pedestal identity",
        "enforced-pedestal rise then fall",
        "routing anchors and heuristic quality",
        "noise-source composition",
        "CLI determinism",
    ];
    let mut results: Vec<Outcome> = Vec::new();
    let mut log = PedestalLog::default();
    let report = |i: usize, o: &Outcome| {
        println!("criterion {:>2} {}: {} | {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, names[i], o.detail);
    };

    results.push(criterion_1());
    report(0, &results[0]);

    let c5_start = Instant::now();
    let scenario = foam_analogue();
    log.record("foam-analogue", &scenario.stack, &scenario.plan);
    for (i, f) in [criterion_2 as fn(&Scenario) -> Outcome, criterion_3, criterion_4].into_iter().enumerate() {
        results.push(f(&scenario));
        report(i + 1, &results[i + 1]);
    }
    results.push(criterion_5(&scenario, c5_start));
    report(4, &results[4]);
    drop(scenario);

    let c7 = criterion_7(&mut log);
    let c9 = criterion_9(&mut log);
    let c8 = criterion_8();
    let c10 = criterion_10();
    results.push(criterion_6(&log));
    report(5, &results[5]);
    for o in [c7, c8, c9, c10] {
        results.push(o);
        let i = results.len() - 1;
        report(i, &results[i]);
    }

    let failed = results.iter().filter(|o| !o.pass).count();
    println!("acceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
