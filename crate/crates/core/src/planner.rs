//! Exposure-weight planning.
//!
//! The projection is `P = sum_k w_k R_k`. Writing `R_k = mean_k + (R_k - mean_k)`
//! splits it into a flat pedestal `sum_k w_k mean_k` and a zero-mean part that
//! is fitted to the target with non-negative weights.

use serde::{Deserialize, Serialize};

use crate::analytics;
use crate::error::{Error, Result};
use crate::fov::FovStack;
use crate::grid::Grid2D;
use crate::nnls::{nnls, ColMajor, NnlsOptions};
use crate::target::TargetImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMode {
    DeMeaned,
    Raw,
}

/// Column-major design matrix with one column per FOV (row-major pixels).
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    mode: DesignMode,
    column_means: Vec<f64>,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mode(&self) -> DesignMode {
        self.mode
    }

    pub fn column_means(&self) -> &[f64] {
        &self.column_means
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.data[k * self.rows..(k + 1) * self.rows]
    }

    pub fn view(&self) -> ColMajor<'_> {
        ColMajor::new(&self.data, self.rows, self.cols)
    }
}

pub fn build_design_matrix(stack: &FovStack, mode: DesignMode) -> Result<DesignMatrix> {
    if stack.is_empty() {
        return Err(Error::Argument("empty stack".into()));
    }
    let (m, n) = stack.fov_shape();
    let rows = m * n;
    let mut data = Vec::with_capacity(rows * stack.len());
    let mut column_means = Vec::with_capacity(stack.len());
    for fov in stack.fovs() {
        let mean = fov.mean();
        column_means.push(mean);
        match mode {
            DesignMode::DeMeaned => data.extend(fov.values().iter().map(|v| v - mean)),
            DesignMode::Raw => data.extend_from_slice(fov.values()),
        }
    }
    Ok(DesignMatrix { rows, cols: stack.len(), data, mode, column_means })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub weights: Vec<f64>,
    /// Indices with strictly positive weight, ascending.
    pub support: Vec<usize>,
    pub pedestal: f64,
    /// `||M w - b||_2` for the system that was solved.
    pub residual_norm: f64,
    #[serde(with = "analytics::snr_json::scalar")]
    pub noise_free_snr: f64,
    pub solver_stats: SolverStats,
    pub mode: DesignMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pedestal_target: Option<f64>,
    pub tol: f64,
    pub column_means: Vec<f64>,
}

impl Plan {
    /// `N'`, the number of FOVs with non-zero weight.
    pub fn n_prime(&self) -> usize {
        self.support.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.support.iter().map(|&k| self.weights[k]).sum()
    }

    /// Mean weight over the support.
    pub fn mean_weight(&self) -> f64 {
        if self.support.is_empty() {
            0.0
        } else {
            self.total_weight() / self.n_prime() as f64
        }
    }

    /// Exposure-weighted mean transmission over the support, so that
    /// `pedestal = N' * mean_weight * mean_transmission`.
    pub fn mean_transmission(&self) -> f64 {
        let total = self.total_weight();
        if total == 0.0 {
            return 0.0;
        }
        self.support.iter().map(|&k| self.weights[k] * self.column_means[k]).sum::<f64>() / total
    }
}

fn pedestal_of(weights: &[f64], means: &[f64]) -> f64 {
    weights.iter().zip(means).filter(|(w, _)| **w > 0.0).map(|(w, m)| w * m).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        let d = NnlsOptions::default();
        SolveOptions { tol: d.tol, max_iter: d.max_iter }
    }
}

fn finish(
    design: &DesignMatrix,
    rhs: &[f64],
    target: &TargetImage,
    sol: crate::nnls::NnlsSolution,
    opts: SolveOptions,
    pedestal_target: Option<f64>,
) -> Result<Plan> {
    let weights = sol.x;
    let support: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] > 0.0).collect();
    let fit = design.view().mul(&weights);
    let residual_norm = fit.iter().zip(rhs).map(|(f, b)| (f - b) * (f - b)).sum::<f64>().sqrt();
    let pedestal = pedestal_of(&weights, &design.column_means);

    // P = sum w_k R_k, rebuilt from the design columns and their means.
    let offset = match design.mode {
        DesignMode::DeMeaned => pedestal,
        DesignMode::Raw => 0.0,
    };
    let (m, n) = target.shape();
    let projection = Grid2D::new(m, n, fit.iter().map(|v| v + offset).collect())?;
    let noise_free_snr = analytics::snr(target, &projection, 0)?;

    let plan = Plan {
        weights,
        support,
        pedestal,
        residual_norm,
        noise_free_snr,
        solver_stats: SolverStats {
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
            converged: sol.converged,
        },
        mode: design.mode,
        pedestal_target,
        tol: opts.tol,
        column_means: design.column_means.clone(),
    };
    if sol.converged {
        Ok(plan)
    } else {
        Err(Error::NotConverged { iterations: sol.iterations, best: Box::new(plan) })
    }
}

fn check_opts(opts: SolveOptions) -> Result<()> {
    if !(opts.tol > 0.0 && opts.tol < 1.0) {
        return Err(Error::Argument(format!("tol must be in (0, 1), got {}", opts.tol)));
    }
    if opts.max_iter == 0 {
        return Err(Error::Argument("max_iter must be positive".into()));
    }
    Ok(())
}

/// Fits the de-meaned columns to the target with non-negative weights.
pub fn solve_nnls(design: &DesignMatrix, target: &TargetImage, opts: SolveOptions) -> Result<Plan> {
    check_opts(opts)?;
    if design.mode != DesignMode::DeMeaned {
        return Err(Error::Argument("solve_nnls needs a de-meaned design matrix".into()));
    }
    let (m, n) = target.shape();
    if m * n != design.rows {
        return Err(Error::Shape { expected: (design.rows, 1), got: (m * n, 1) });
    }
    let rhs = target.grid().values();
    let sol = nnls(design.view(), rhs, NnlsOptions { tol: opts.tol, max_iter: opts.max_iter });
    finish(design, rhs, target, sol, opts, None)
}

/// Fits raw columns to `I + pedestal_target`, fixing the pedestal up front.
pub fn solve_enforced_pedestal(
    stack: &FovStack,
    target: &TargetImage,
    pedestal_target: f64,
    opts: SolveOptions,
) -> Result<Plan> {
    check_opts(opts)?;
    if !(pedestal_target > 0.0 && pedestal_target.is_finite()) {
        return Err(Error::Argument(format!("pedestal_target must be positive, got {pedestal_target}")));
    }
    target.grid().ensure_shape(stack.fov_shape())?;
    let design = build_design_matrix(stack, DesignMode::Raw)?;
    let rhs: Vec<f64> = target.grid().values().iter().map(|v| v + pedestal_target).collect();
    let sol = nnls(design.view(), &rhs, NnlsOptions { tol: opts.tol, max_iter: opts.max_iter });
    finish(&design, &rhs, target, sol, opts, Some(pedestal_target))
}

/// Plans for a stack in either mode.
pub fn plan_for(stack: &FovStack, target: &TargetImage, pedestal_target: Option<f64>, opts: SolveOptions) -> Result<Plan> {
    match pedestal_target {
        Some(p) => solve_enforced_pedestal(stack, target, p, opts),
        None => {
            target.grid().ensure_shape(stack.fov_shape())?;
            solve_nnls(&build_design_matrix(stack, DesignMode::DeMeaned)?, target, opts)
        }
    }
}

/// `P = sum_k w_k R_k`.
pub fn noise_free_projection(stack: &FovStack, plan: &Plan) -> Result<Grid2D> {
    if plan.weights.len() != stack.len() {
        return Err(Error::Shape { expected: (stack.len(), 1), got: (plan.weights.len(), 1) });
    }
    let (m, n) = stack.fov_shape();
    let mut acc = vec![0.0; m * n];
    for &k in &plan.support {
        let w = plan.weights[k];
        for (a, v) in acc.iter_mut().zip(stack.fov(k).values()) {
            *a += w * v;
        }
    }
    Grid2D::new(m, n, acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fov::{sample_systematic, Stride};
    use crate::mask::{synthesize_speckle, SpeckleParams};
    use crate::target::{make_pattern, Pattern};

    fn stack(count: usize, m: usize) -> FovStack {
        let master = synthesize_speckle(&SpeckleParams { rows: 96, cols: 96, correlation_px: 0.8, t_min: 0.0, t_max: 1.0, seed: 21 }).unwrap();
        sample_systematic(&master, (m, m), Stride::new(2, 3).unwrap(), count, 0).unwrap()
    }

    fn chart(m: usize) -> TargetImage {
        make_pattern(&Pattern::ResolutionChart { on_fraction: 0.3 }, m, m).unwrap()
    }

    fn check_pedestal(stack: &FovStack, plan: &Plan) {
        let p = noise_free_projection(stack, plan).unwrap();
        let eq2 = plan.n_prime() as f64 * plan.mean_weight() * plan.mean_transmission();
        assert!((eq2 - plan.pedestal).abs() <= 1e-12 * plan.pedestal.abs());
        assert!((p.mean() - plan.pedestal).abs() <= 1e-9 * plan.pedestal.abs());
    }

    #[test]
    fn design_matrix_modes() {
        let s = stack(20, 8);
        let d = build_design_matrix(&s, DesignMode::DeMeaned).unwrap();
        for k in 0..20 {
            assert!(d.column(k).iter().sum::<f64>().abs() < 1e-9 * 64.0);
            assert!((d.column_means()[k] - s.fov(k).mean()).abs() < 1e-15);
        }
        let r = build_design_matrix(&s, DesignMode::Raw).unwrap();
        assert_eq!(r.column(3), s.fov(3).values());
        let c = FovStack::from_fovs(vec![Grid2D::filled(3, 3, 0.4).unwrap()]).unwrap();
        let dc = build_design_matrix(&c, DesignMode::DeMeaned).unwrap();
        assert!(dc.column(0).iter().all(|&v| v == 0.0));
        assert_eq!(dc.column_means()[0], 0.4);
    }

    #[test]
    fn demeaned_plan_reproduces_chart() {
        let s = stack(600, 8);
        let t = chart(8);
        let plan = plan_for(&s, &t, None, SolveOptions::default()).unwrap();
        assert!(plan.weights.iter().all(|&w| w >= 0.0));
        assert!(plan.solver_stats.kkt_residual <= 1e-10);
        assert!(plan.noise_free_snr > 1e4, "snr {}", plan.noise_free_snr);
        check_pedestal(&s, &plan);
        let p = noise_free_projection(&s, &plan).unwrap();
        let direct = analytics::snr(&t, &p, 0).unwrap();
        let agree = direct == plan.noise_free_snr || (direct / plan.noise_free_snr - 1.0).abs() < 1e-6;
        assert!(agree, "{direct} vs {}", plan.noise_free_snr);
    }

    #[test]
    fn snr_non_decreasing_in_nested_stacks() {
        let s = stack(240, 8);
        let t = chart(8);
        let mut last = 0.0;
        for count in [10, 30, 60, 120, 240] {
            let p = plan_for(&s.truncated(count).unwrap(), &t, None, SolveOptions::default()).unwrap();
            assert!(p.noise_free_snr >= last * (1.0 - 1e-9), "{count}: {} < {last}", p.noise_free_snr);
            last = p.noise_free_snr;
        }
    }

    #[test]
    fn target_as_column_gets_unit_weight() {
        let t = make_pattern(&Pattern::Square { side: 2 }, 4, 4).unwrap();
        let raw: Vec<f64> = t.grid().values().iter().map(|v| v * 0.5 + 0.5).collect();
        let target_fov = Grid2D::new(4, 4, raw).unwrap();
        let other = Grid2D::from_fn(4, 4, |r, c| ((r * 5 + c * 3) % 7) as f64 / 7.0).unwrap();
        let s = FovStack::from_fovs(vec![other, target_fov]).unwrap();
        let d = build_design_matrix(&s, DesignMode::DeMeaned).unwrap();
        let scaled = crate::target::from_zero_mean(t.grid().map(|v| v * 0.5).unwrap()).unwrap();
        let plan = solve_nnls(&d, &scaled, SolveOptions::default()).unwrap();
        assert!((plan.weights[1] - 1.0).abs() < 1e-12);
        assert!(plan.residual_norm <= 1e-10);
    }

    #[test]
    fn enforced_pedestal_single_constant_mask() {
        let s = FovStack::from_fovs(vec![Grid2D::filled(3, 3, 0.25).unwrap()]).unwrap();
        let zero = crate::target::from_zero_mean(Grid2D::filled(3, 3, 0.0).unwrap()).unwrap();
        let plan = solve_enforced_pedestal(&s, &zero, 7.0, SolveOptions::default()).unwrap();
        assert!((plan.weights[0] - 28.0).abs() < 1e-12);
        assert!((plan.pedestal - 7.0).abs() < 1e-12);
        assert!(solve_enforced_pedestal(&s, &zero, 0.0, SolveOptions::default()).is_err());
    }

    #[test]
    fn enforced_pedestal_close_to_request() {
        let s = stack(600, 8);
        let t = chart(8);
        for p in [5.0, 20.0] {
            let plan = plan_for(&s, &t, Some(p), SolveOptions::default()).unwrap();
            check_pedestal(&s, &plan);
            assert!((plan.pedestal / p - 1.0).abs() < 0.05, "{p}: {}", plan.pedestal);
        }
    }

    #[test]
    fn projection_basics() {
        let s = stack(5, 6);
        let square = make_pattern(&Pattern::Square { side: 2 }, 6, 6).unwrap();
        let mut plan = plan_for(&s, &square, None, SolveOptions::default()).unwrap();
        plan.weights = vec![0.0; 5];
        plan.support.clear();
        assert!(noise_free_projection(&s, &plan).unwrap().values().iter().all(|&v| v == 0.0));
        plan.weights[2] = 1.0;
        plan.support = vec![2];
        assert_eq!(noise_free_projection(&s, &plan).unwrap().values(), s.fov(2).values());
    }

    #[test]
    fn iteration_cap_returns_best_plan() {
        let s = stack(200, 8);
        let err = plan_for(&s, &chart(8), None, SolveOptions { tol: 1e-10, max_iter: 3 }).unwrap_err();
        match err {
            Error::NotConverged { best, .. } => assert!(best.weights.iter().all(|&w| w >= 0.0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_mismatch() {
        let s = stack(5, 6);
        assert!(matches!(plan_for(&s, &chart(8), None, SolveOptions::default()), Err(Error::Shape { .. })));
    }
}
