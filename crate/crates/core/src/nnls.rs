//! Lawson–Hanson active-set non-negative least squares.
//!
//! The passive-set least-squares subproblems are solved through a Cholesky
//! factor `R` of `A_P^T A_P`, updated when a column enters and restored with
//! Givens rotations when one leaves. Each subproblem solve is followed by one
//! step of iterative refinement against the true residual.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnlsOptions {
    /// Relative tolerance on the gradient, scaled by `||A^T b||_inf`.
    pub tol: f64,
    /// Upper bound on passive-set least-squares solves.
    pub max_iter: usize,
}

impl Default for NnlsOptions {
    fn default() -> Self {
        NnlsOptions { tol: 1e-10, max_iter: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest KKT violation divided by `||A^T b||_inf` (0 when that norm is 0).
    pub kkt_residual: f64,
}

/// Dense column-major matrix view.
#[derive(Debug, Clone, Copy)]
pub struct ColMajor<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
}

impl<'a> ColMajor<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix storage does not match its shape");
        ColMajor { data, rows, cols }
    }

    pub fn col(&self, j: usize) -> &'a [f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// `A^T v` for all columns.
    pub fn t_mul(&self, v: &[f64]) -> Vec<f64> {
        (0..self.cols).into_par_iter().map(|j| dot(self.col(j), v)).collect()
    }

    /// `A x`, skipping zero entries of `x`.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                axpy(xj, self.col(j), &mut out);
            }
        }
        out
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Upper-triangular Cholesky factor of `A_P^T A_P` for the ordered passive set.
struct Factor {
    cap: usize,
    k: usize,
    r: Vec<f64>, // row-major cap x cap, only the leading k x k upper triangle is live
}

impl Factor {
    fn new(cap: usize) -> Self {
        Factor { cap, k: 0, r: vec![0.0; cap * cap] }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.cap + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.r[i * self.cap + j] = v;
    }

    /// Solves `R^T y = v` in place, sweeping rows of `R` so access stays contiguous.
    fn solve_lower(&self, v: &mut [f64]) {
        let k = self.k;
        for p in 0..k {
            let row = &self.r[p * self.cap..p * self.cap + k];
            let y = v[p] / row[p];
            v[p] = y;
            for (vi, ri) in v[p + 1..k].iter_mut().zip(&row[p + 1..]) {
                *vi -= ri * y;
            }
        }
    }

    /// Solves `R y = v` in place.
    fn solve_upper(&self, v: &mut [f64]) {
        for i in (0..self.k).rev() {
            let row = &self.r[i * self.cap..i * self.cap + self.k];
            let s = v[i] - dot(&row[i + 1..], &v[i + 1..self.k]);
            v[i] = s / row[i];
        }
    }

    fn solve_normal(&self, v: &mut [f64]) {
        self.solve_lower(v);
        self.solve_upper(v);
    }

    /// Appends a column given `A_P^T a` and `a^T a`. Returns false, leaving the
    /// factor untouched, when `a` is numerically in the span of `A_P`.
    fn append(&mut self, mut cross: Vec<f64>, norm_sq: f64) -> bool {
        if self.k == self.cap {
            return false;
        }
        self.solve_lower(&mut cross);
        let rho_sq = norm_sq - dot(&cross, &cross);
        if !(rho_sq > DEPENDENCE_TOL * norm_sq) {
            return false;
        }
        let k = self.k;
        for (i, c) in cross.iter().enumerate() {
            self.set(i, k, *c);
        }
        self.set(k, k, rho_sq.sqrt());
        self.k += 1;
        true
    }

    /// Drops column `p` and re-triangularizes with Givens rotations.
    fn remove(&mut self, p: usize) {
        let k = self.k;
        for i in 0..k {
            let row = &mut self.r[i * self.cap..i * self.cap + k];
            let from = p.max(i.saturating_sub(1));
            if from + 1 < k {
                row.copy_within(from + 1..k, from);
            }
        }
        for i in 0..k {
            self.set(i, k - 1, 0.0);
        }
        for i in p..k - 1 {
            let a = self.at(i, i);
            let b = self.at(i + 1, i);
            let h = a.hypot(b);
            if h == 0.0 {
                continue;
            }
            let (c, s) = (a / h, b / h);
            for j in i..k - 1 {
                let x = self.at(i, j);
                let y = self.at(i + 1, j);
                self.set(i, j, c * x + s * y);
                self.set(i + 1, j, -s * x + c * y);
            }
            self.set(i + 1, i, 0.0);
        }
        for j in 0..k {
            self.set(k - 1, j, 0.0);
        }
        self.k -= 1;
        // Keep the diagonal positive so later solves see a proper Cholesky factor.
        for i in p..self.k {
            if self.at(i, i) < 0.0 {
                for j in i..self.k {
                    let v = self.at(i, j);
                    self.set(i, j, -v);
                }
            }
        }
    }
}

/// A column whose component orthogonal to the passive set has relative
/// squared norm below this is treated as linearly dependent.
const DEPENDENCE_TOL: f64 = 1e-12;

struct Passive<'a> {
    a: ColMajor<'a>,
    b: &'a [f64],
    atb: &'a [f64],
    set: Vec<usize>,
    factor: Factor,
}

impl<'a> Passive<'a> {
    fn try_add(&mut self, j: usize) -> bool {
        let col = self.a.col(j);
        let cross: Vec<f64> = self.set.iter().map(|&p| dot(self.a.col(p), col)).collect();
        if self.factor.append(cross, dot(col, col)) {
            self.set.push(j);
            true
        } else {
            false
        }
    }

    fn remove_at(&mut self, pos: usize) {
        self.factor.remove(pos);
        self.set.remove(pos);
    }

    /// Least-squares coefficients on the passive set, refined once.
    fn solve(&self) -> Vec<f64> {
        let mut z: Vec<f64> = self.set.iter().map(|&p| self.atb[p]).collect();
        self.factor.solve_normal(&mut z);
        let mut r = self.b.to_vec();
        for (&p, &zp) in self.set.iter().zip(&z) {
            axpy(-zp, self.a.col(p), &mut r);
        }
        let mut d: Vec<f64> = self.set.iter().map(|&p| dot(self.a.col(p), &r)).collect();
        self.factor.solve_normal(&mut d);
        z.iter_mut().zip(&d).for_each(|(zi, di)| *zi += di);
        z
    }
}

fn residual(a: ColMajor, b: &[f64], x: &[f64]) -> Vec<f64> {
    let ax = a.mul(x);
    b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect()
}

fn kkt_violation(grad: &[f64], x: &[f64], scale: f64) -> f64 {
    let worst = grad
        .iter()
        .zip(x)
        .map(|(&g, &xi)| if xi > 0.0 { g.abs() } else { g.max(0.0) })
        .fold(0.0, f64::max);
    if scale > 0.0 {
        worst / scale
    } else {
        worst
    }
}

/// Minimizes `||A x - b||` subject to `x >= 0`.
///
/// Ties in the entering-column choice go to the lowest index. When `max_iter`
/// is hit the current feasible iterate is returned with `converged = false`.
pub fn nnls(a: ColMajor, b: &[f64], opts: NnlsOptions) -> NnlsSolution {
    assert_eq!(b.len(), a.rows, "right-hand side length must equal the row count");
    let n = a.cols;
    let atb = a.t_mul(b);
    let scale = atb.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let thresh = opts.tol * scale;

    let mut x = vec![0.0; n];
    let mut in_set = vec![false; n];
    let mut rejected = vec![false; n];
    let mut ps = Passive { a, b, atb: &atb, set: Vec::new(), factor: Factor::new(a.rows.min(n)) };
    let mut iterations = 0;
    let mut grad = atb.clone();
    let mut converged = false;

    loop {
        let mut best: Option<usize> = None;
        for j in 0..n {
            if !in_set[j] && !rejected[j] && grad[j] > thresh && best.is_none_or(|k| grad[j] > grad[k]) {
                best = Some(j);
            }
        }
        let Some(j) = best else {
            converged = true;
            break;
        };
        if iterations >= opts.max_iter {
            break;
        }
        if !ps.try_add(j) {
            rejected[j] = true;
            continue;
        }
        in_set[j] = true;
        iterations += 1;
        let mut z = ps.solve();
        if *z.last().unwrap() <= 0.0 {
            ps.remove_at(ps.set.len() - 1);
            in_set[j] = false;
            rejected[j] = true;
            continue;
        }

        // Step back towards the feasible region until the passive solution is positive.
        while z.iter().any(|&v| v <= 0.0) {
            if iterations >= opts.max_iter {
                break;
            }
            let mut alpha = f64::INFINITY;
            let mut blocking = 0;
            for (pos, (&p, &zp)) in ps.set.iter().zip(&z).enumerate() {
                if zp <= 0.0 {
                    let t = x[p] / (x[p] - zp);
                    if t < alpha {
                        alpha = t;
                        blocking = pos;
                    }
                }
            }
            for (&p, &zp) in ps.set.iter().zip(&z) {
                x[p] += alpha * (zp - x[p]);
            }
            x[ps.set[blocking]] = 0.0;
            let mut pos = ps.set.len();
            while pos > 0 {
                pos -= 1;
                let p = ps.set[pos];
                if x[p] <= 0.0 {
                    x[p] = 0.0;
                    in_set[p] = false;
                    ps.remove_at(pos);
                }
            }
            iterations += 1;
            z = ps.solve();
        }
        if z.iter().any(|&v| v <= 0.0) {
            break;
        }
        for (&p, &zp) in ps.set.iter().zip(&z) {
            x[p] = zp;
        }
        rejected.iter_mut().for_each(|r| *r = false);
        grad = a.t_mul(&residual(a, b, &x));
    }

    let grad = a.t_mul(&residual(a, b, &x));
    NnlsSolution { kkt_residual: kkt_violation(&grad, &x, scale), x, iterations, converged }
}
