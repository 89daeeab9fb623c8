//! Scan ordering and experiment duration.
//!
//! The stage visits every exposed offset once along an open path. The order
//! comes from a nearest-neighbour tour improved by 2-opt and segment moves
//! until no improving move of either kind remains.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    /// Visiting order, as indices into the offsets given to [`route_tsp`].
    pub order: Vec<usize>,
    pub path_length_px: f64,
    pub scan_time_s: f64,
    pub exposure_time_s: f64,
    pub total_time_s: f64,
    pub stage_speed_mm_s: f64,
    pub flux_photons_px_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tour {
    pub order: Vec<usize>,
    pub path_length_px: f64,
    /// Length of the nearest-neighbour start, before improvement.
    pub nearest_neighbor_length_px: f64,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Sum of consecutive gaps along `order`.
pub fn path_length(points: &[(f64, f64)], order: &[usize]) -> f64 {
    order.windows(2).map(|w| dist(points[w[0]], points[w[1]])).sum()
}

fn nearest_neighbor(points: &[(f64, f64)]) -> Vec<usize> {
    let n = points.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut cur = 0;
    visited[0] = true;
    order.push(0);
    for _ in 1..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (j, &seen) in visited.iter().enumerate() {
            if !seen {
                let d = dist(points[cur], points[j]);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
        }
        visited[best] = true;
        order.push(best);
        cur = best;
    }
    order
}

const EPS: f64 = 1e-10;

/// Segment reversals on an open path, first improvement, until none helps.
fn two_opt(points: &[(f64, f64)], order: &mut [usize]) -> bool {
    let n = order.len();
    let mut changed = false;
    loop {
        let mut improved = false;
        for i in 0..n.saturating_sub(1) {
            for j in i + 1..n {
                let p = |k: usize| points[order[k]];
                let before_in = if i > 0 { dist(p(i - 1), p(i)) } else { 0.0 };
                let before_out = if j + 1 < n { dist(p(j), p(j + 1)) } else { 0.0 };
                let after_in = if i > 0 { dist(p(i - 1), p(j)) } else { 0.0 };
                let after_out = if j + 1 < n { dist(p(i), p(j + 1)) } else { 0.0 };
                if after_in + after_out < before_in + before_out - EPS {
                    order[i..=j].reverse();
                    improved = true;
                    changed = true;
                }
            }
        }
        if !improved {
            return changed;
        }
    }
}

/// Moves segments of up to three points (optionally reversed) to another
/// position, first improvement, until none helps.
fn or_opt(points: &[(f64, f64)], order: &mut Vec<usize>) -> bool {
    let n = order.len();
    let mut changed = false;
    'outer: loop {
        for len in 1..=3.min(n.saturating_sub(1)) {
            for s in 0..=n - len {
                let e = s + len - 1;
                let p = |o: &Vec<usize>, k: usize| points[o[k]];
                // Gain from cutting the segment out and joining its neighbours.
                let prev = (s > 0).then(|| p(order, s - 1));
                let next = (e + 1 < n).then(|| p(order, e + 1));
                let (first, last) = (p(order, s), p(order, e));
                let mut removed = prev.map_or(0.0, |q| dist(q, first)) + next.map_or(0.0, |q| dist(last, q));
                if let (Some(a), Some(b)) = (prev, next) {
                    removed -= dist(a, b);
                }
                let rest: Vec<usize> = order[..s].iter().chain(&order[e + 1..]).copied().collect();
                let seg: Vec<usize> = order[s..=e].to_vec();
                // Insert between rest[g-1] and rest[g], for g in 0..=rest.len().
                for g in 0..=rest.len() {
                    if g == s {
                        continue;
                    }
                    let a = (g > 0).then(|| points[rest[g - 1]]);
                    let b = (g < rest.len()).then(|| points[rest[g]]);
                    let base = match (a, b) {
                        (Some(a), Some(b)) => dist(a, b),
                        _ => 0.0,
                    };
                    for rev in [false, true] {
                        let (h, t) = if rev { (last, first) } else { (first, last) };
                        let added = a.map_or(0.0, |a| dist(a, h)) + b.map_or(0.0, |b| dist(t, b)) - base;
                        if added < removed - EPS {
                            let mut new_order = Vec::with_capacity(n);
                            new_order.extend_from_slice(&rest[..g]);
                            if rev {
                                new_order.extend(seg.iter().rev());
                            } else {
                                new_order.extend_from_slice(&seg);
                            }
                            new_order.extend_from_slice(&rest[g..]);
                            *order = new_order;
                            changed = true;
                            continue 'outer;
                        }
                    }
                }
            }
        }
        return changed;
    }
}

fn local_search(points: &[(f64, f64)], order: &mut Vec<usize>) {
    loop {
        two_opt(points, order);
        if !or_opt(points, order) {
            break;
        }
    }
}

/// Number of seeded random restarts added on top of the nearest-neighbour start.
const RESTARTS: usize = 8;
/// Restarts are only run up to this many points.
const RESTART_LIMIT: usize = 200;

/// Open-path tour through `points`. The nearest-neighbour construction starts
/// at index 0 and breaks distance ties by lowest index. For small instances,
/// seeded random restarts are also locally optimized and the shortest tour
/// wins (earliest on ties), so the result is deterministic given `seed`.
pub fn route_tsp(points: &[(f64, f64)], seed: u64) -> Result<Tour> {
    if points.is_empty() {
        return Err(Error::Argument("route needs at least one point".into()));
    }
    if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::Argument("route points must be finite".into()));
    }
    let nn = nearest_neighbor(points);
    let nn_len = path_length(points, &nn);
    let mut best = nn;
    local_search(points, &mut best);
    let mut best_len = path_length(points, &best);

    if points.len() <= RESTART_LIMIT && points.len() > 3 {
        let mut rng = rng::stream_rng(seed, rng::stream::ROUTING);
        for _ in 0..RESTARTS {
            let mut cand: Vec<usize> = (0..points.len()).collect();
            cand.shuffle(&mut rng);
            local_search(points, &mut cand);
            let len = path_length(points, &cand);
            if len < best_len - EPS {
                best = cand;
                best_len = len;
            }
        }
    }
    Ok(Tour { order: best, path_length_px: best_len, nearest_neighbor_length_px: nn_len })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Durations {
    pub scan_time_s: f64,
    pub exposure_time_s: f64,
    pub total_time_s: f64,
}

/// Stage travel `L * pitch / v` plus exposure `lambda * sum(w) / flux`.
pub fn estimate_duration(
    path_length_px: f64,
    total_weight: f64,
    lambda_photons: f64,
    pitch_um: f64,
    stage_speed_mm_s: f64,
    flux_photons_px_s: f64,
) -> Result<Durations> {
    for (name, v) in [("pitch_um", pitch_um), ("stage speed", stage_speed_mm_s), ("flux", flux_photons_px_s)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Argument(format!("{name} must be positive, got {v}")));
        }
    }
    let scan_time_s = path_length_px * pitch_um * 1e-3 / stage_speed_mm_s;
    let exposure_time_s = lambda_photons * total_weight / flux_photons_px_s;
    Ok(Durations { scan_time_s, exposure_time_s, total_time_s: scan_time_s + exposure_time_s })
}

/// Routes the given offsets and attaches durations.
pub fn plan_route(
    points: &[(f64, f64)],
    seed: u64,
    total_weight: f64,
    lambda_photons: f64,
    pitch_um: f64,
    stage_speed_mm_s: f64,
    flux_photons_px_s: f64,
) -> Result<Route> {
    let tour = route_tsp(points, seed)?;
    let d = estimate_duration(tour.path_length_px, total_weight, lambda_photons, pitch_um, stage_speed_mm_s, flux_photons_px_s)?;
    Ok(Route {
        order: tour.order,
        path_length_px: tour.path_length_px,
        scan_time_s: d.scan_time_s,
        exposure_time_s: d.exposure_time_s,
        total_time_s: d.total_time_s,
        stage_speed_mm_s,
        flux_photons_px_s,
    })
}
