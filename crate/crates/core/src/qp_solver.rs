//! Convex QP solver based on ADMM operator splitting.
//!
//! Solves
//!
//! ```text
//! minimize    ½ xᵀ H x + fᵀ x
//! subject to  A_eq x = b_eq,  A_in x ≤ b_in,  lower ≤ x ≤ upper
//! ```
//!
//! Constraints are stacked into `l ≤ A x ≤ u`, the problem is equilibrated
//! with Ruiz scaling and iterated with over-relaxed ADMM. Once the iterates
//! are accurate enough the active set is guessed and the equality-constrained
//! KKT system is solved directly (polishing); a solution is reported optimal
//! only when its scaled KKT residuals are below the requested tolerance.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Dense convex QP.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
}

impl QpProblem {
    /// Unconstrained problem `½ xᵀ H x + fᵀ x`.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            lower: None,
            upper: None,
        }
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_ineq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_bounds(mut self, lower: Option<DVector<f64>>, upper: Option<DVector<f64>>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn n(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    /// Checks dimensions, symmetry and positive semidefiniteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let bad = |m: String| Err(Error::InvalidQp(m));
        if self.hessian.shape() != (n, n) {
            return bad(format!("hessian is {:?}, expected {n}x{n}", self.hessian.shape()));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality block dimensions disagree".into());
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return bad("inequality block dimensions disagree".into());
        }
        for (name, v) in [("lower", &self.lower), ("upper", &self.upper)] {
            if let Some(v) = v {
                if v.len() != n {
                    return bad(format!("{name} bound has length {}, expected {n}", v.len()));
                }
            }
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !finite(&self.hessian)
            || !finite(&self.a_eq)
            || !finite(&self.a_in)
            || self.linear.iter().any(|v| !v.is_finite())
        {
            return bad("non-finite problem data".into());
        }
        if self.b_eq.iter().any(|v| !v.is_finite()) || self.b_in.iter().any(|v| v.is_nan()) {
            return bad("invalid right-hand side".into());
        }
        if let (Some(l), Some(u)) = (&self.lower, &self.upper) {
            if l.iter().zip(u.iter()).any(|(l, u)| l > u) {
                return bad("lower bound exceeds upper bound".into());
            }
        }
        let scale = self.hessian.amax().max(1.0);
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > 1e-12 * scale {
            return bad(format!("hessian is not symmetric (max asymmetry {asym:.3e})"));
        }
        if n > 0 {
            let shifted = &self.hessian + DMatrix::identity(n, n) * (1e-9 * scale);
            if shifted.cholesky().is_none() {
                return bad("hessian is not positive semidefinite".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
    Unbounded,
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Optimal => "optimal",
            Self::MaxIter => "max_iter",
            Self::Infeasible => "infeasible",
            Self::Unbounded => "unbounded",
        })
    }
}

/// Scaled KKT residuals.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    /// Multipliers of `A_eq x = b_eq`.
    pub dual_eq: DVector<f64>,
    /// Multipliers of `A_in x ≤ b_in` (nonnegative at optimality).
    pub dual_ineq: DVector<f64>,
    /// Bound multipliers: positive when the upper bound is active, negative for the lower.
    pub dual_bounds: DVector<f64>,
    pub status: QpStatus,
    pub kkt: KktReport,
    pub objective: f64,
    pub iterations: usize,
    pub polished: bool,
    pub solve_time: Duration,
}

/// Candidate point for [`check_kkt`].
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub primal: &'a DVector<f64>,
    pub dual_eq: &'a DVector<f64>,
    pub dual_ineq: &'a DVector<f64>,
    pub dual_bounds: Option<&'a DVector<f64>>,
}

/// Componentwise scaled KKT residuals at a primal-dual candidate.
///
/// Stationarity divides each gradient entry by `max(1, |f_j|)`, primal
/// violations by `max(1, |b_i|)`, and dual sign violations and
/// complementarity products by `max(1, ‖y‖∞)`.
pub fn check_kkt(problem: &QpProblem, c: Candidate<'_>) -> KktReport {
    let x = c.primal;
    let n = problem.n();
    let mut grad = &problem.hessian * x + &problem.linear;
    if problem.a_eq.nrows() > 0 {
        grad += problem.a_eq.tr_mul(c.dual_eq);
    }
    if problem.a_in.nrows() > 0 {
        grad += problem.a_in.tr_mul(c.dual_ineq);
    }
    let zeros = DVector::zeros(n);
    let yb = c.dual_bounds.unwrap_or(&zeros);
    grad += yb;
    let y_inf = c
        .dual_eq
        .amax()
        .max(if c.dual_ineq.is_empty() { 0.0 } else { c.dual_ineq.amax() })
        .max(if yb.is_empty() { 0.0 } else { yb.amax() })
        .max(1.0);

    let stationarity = (0..n).map(|j| grad[j].abs() / problem.linear[j].abs().max(1.0)).fold(0.0, f64::max);
    let mut primal = 0.0_f64;
    let mut dual = 0.0_f64;
    let mut comp = 0.0_f64;
    if problem.a_eq.nrows() > 0 {
        let r = &problem.a_eq * x - &problem.b_eq;
        for i in 0..r.len() {
            primal = primal.max(r[i].abs() / problem.b_eq[i].abs().max(1.0));
        }
    }
    if problem.a_in.nrows() > 0 {
        let ax = &problem.a_in * x;
        for i in 0..ax.len() {
            let b = problem.b_in[i];
            let mu = c.dual_ineq[i];
            let scale = b.abs().max(1.0);
            primal = primal.max((ax[i] - b).max(0.0) / scale);
            dual = dual.max((-mu).max(0.0) / y_inf);
            if b.is_finite() {
                comp = comp.max((mu * (b - ax[i])).abs() / (y_inf * scale));
            } else if mu != 0.0 {
                comp = comp.max(mu.abs() / y_inf);
            }
        }
    }
    for j in 0..n {
        let lo = problem.lower.as_ref().map_or(f64::NEG_INFINITY, |l| l[j]);
        let hi = problem.upper.as_ref().map_or(f64::INFINITY, |u| u[j]);
        if lo.is_finite() {
            primal = primal.max((lo - x[j]).max(0.0) / lo.abs().max(1.0));
        }
        if hi.is_finite() {
            primal = primal.max((x[j] - hi).max(0.0) / hi.abs().max(1.0));
        }
        let y = yb[j];
        let (slack, bound) = if y > 0.0 { (hi - x[j], hi) } else { (x[j] - lo, lo) };
        if y != 0.0 {
            if bound.is_finite() {
                comp = comp.max((y * slack).abs() / (y_inf * bound.abs().max(1.0)));
            } else {
                dual = dual.max(y.abs() / y_inf);
            }
        }
    }
    KktReport { stationarity, primal, dual, complementarity: comp }
}

/// Solver settings.
#[derive(Debug, Clone)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub kkt_tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    pub check_interval: usize,
    pub polish: bool,
    pub eps_infeasible: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            kkt_tol: 1e-8,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            check_interval: 25,
            polish: true,
            eps_infeasible: 1e-6,
        }
    }
}

impl QpSettings {
    pub fn with_tol(tol: f64, max_iter: usize) -> Self {
        Self { eps_abs: tol, eps_rel: tol, kkt_tol: tol, max_iter, ..Self::default() }
    }
}

/// Initial primal/dual iterate. `y` follows the stacked row order: equalities, inequalities, bounds.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

#[derive(Debug, Clone)]
struct Csr {
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    fn nrows(&self) -> usize {
        self.ptr.len() - 1
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.ptr[i]..self.ptr[i + 1]).map(move |k| (self.idx[k], self.val[k]))
    }

    fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    fn tmul(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                for (j, v) in self.row(i) {
                    out[j] += v * yi;
                }
            }
        }
    }
}

struct Stacked {
    a: Csr,
    l: Vec<f64>,
    u: Vec<f64>,
}

fn stack(problem: &QpProblem) -> Stacked {
    let n = problem.n();
    let mut ptr = vec![0];
    let mut idx = Vec::new();
    let mut val = Vec::new();
    let mut l = Vec::new();
    let mut u = Vec::new();
    let mut push_dense = |m: &DMatrix<f64>, ptr: &mut Vec<usize>| {
        for i in 0..m.nrows() {
            for j in 0..n {
                let v = m[(i, j)];
                if v != 0.0 {
                    idx.push(j);
                    val.push(v);
                }
            }
            ptr.push(idx.len());
        }
    };
    push_dense(&problem.a_eq, &mut ptr);
    l.extend(problem.b_eq.iter());
    u.extend(problem.b_eq.iter());
    push_dense(&problem.a_in, &mut ptr);
    l.extend(std::iter::repeat_n(f64::NEG_INFINITY, problem.b_in.len()));
    u.extend(problem.b_in.iter());
    if problem.lower.is_some() || problem.upper.is_some() {
        for j in 0..n {
            idx.push(j);
            val.push(1.0);
            ptr.push(idx.len());
            l.push(problem.lower.as_ref().map_or(f64::NEG_INFINITY, |v| v[j]));
            u.push(problem.upper.as_ref().map_or(f64::INFINITY, |v| v[j]));
        }
    }
    Stacked { a: Csr { ptr, idx, val }, l, u }
}

const INF_BOUND: f64 = 1e20;

/// Primal, equality, inequality and bound multipliers in original units.
type UnscaledPoint = (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>);

/// Problem prepared for repeated solves: scaled data and solver state.
pub struct QpSolver {
    problem: QpProblem,
    settings: QpSettings,
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: Csr,
    l: Vec<f64>,
    u: Vec<f64>,
    d: DVector<f64>,
    e: Vec<f64>,
    c: f64,
    n_eq: usize,
    n_in: usize,
}

impl QpSolver {
    pub fn new(problem: QpProblem, settings: QpSettings) -> Result<Self> {
        problem.validate()?;
        let n = problem.n();
        let Stacked { mut a, mut l, mut u } = stack(&problem);
        let m = a.nrows();
        let mut p = problem.hessian.clone();
        let mut q = problem.linear.clone();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = vec![1.0; m];
        let mut c = 1.0;
        let clamp = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
        for _ in 0..settings.scaling_iters {
            let mut col = vec![0.0_f64; n];
            for j in 0..n {
                col[j] = p.column(j).amax();
            }
            let mut row = vec![0.0_f64; m];
            for i in 0..m {
                for k in a.ptr[i]..a.ptr[i + 1] {
                    let v = a.val[k].abs();
                    col[a.idx[k]] = col[a.idx[k]].max(v);
                    row[i] = row[i].max(v);
                }
            }
            let dd: Vec<f64> = col.iter().map(|&v| 1.0 / clamp(v).sqrt()).collect();
            let ee: Vec<f64> = row.iter().map(|&v| 1.0 / clamp(v).sqrt()).collect();
            for j in 0..n {
                for i in 0..n {
                    p[(i, j)] *= dd[i] * dd[j];
                }
                q[j] *= dd[j];
                d[j] *= dd[j];
            }
            for i in 0..m {
                for k in a.ptr[i]..a.ptr[i + 1] {
                    a.val[k] *= ee[i] * dd[a.idx[k]];
                }
                e[i] *= ee[i];
            }
            let mean_col = if n > 0 { (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64 } else { 0.0 };
            let gamma = 1.0 / clamp(mean_col.max(q.amax()));
            p *= gamma;
            q *= gamma;
            c *= gamma;
        }
        for i in 0..m {
            l[i] = if l[i].is_finite() { (l[i] * e[i]).max(-INF_BOUND) } else { f64::NEG_INFINITY };
            u[i] = if u[i].is_finite() { (u[i] * e[i]).min(INF_BOUND) } else { f64::INFINITY };
        }
        let n_eq = problem.b_eq.len();
        let n_in = problem.b_in.len();
        Ok(Self { problem, settings, p, q, a, l, u, d, e, c, n_eq, n_in })
    }

    pub fn problem(&self) -> &QpProblem {
        &self.problem
    }

    fn rho_vec(&self, rho: f64) -> Vec<f64> {
        (0..self.a.nrows())
            .map(|i| {
                if self.l[i] == f64::NEG_INFINITY && self.u[i] == f64::INFINITY {
                    1e-6
                } else if (self.u[i] - self.l[i]).abs() < 1e-12 {
                    1e3 * rho
                } else {
                    rho
                }
            })
            .collect()
    }

    fn factor(&self, rho: &[f64]) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let n = self.problem.n();
        let mut k = self.p.clone();
        for j in 0..n {
            k[(j, j)] += self.settings.sigma;
        }
        for i in 0..self.a.nrows() {
            let r = rho[i];
            let (s, t) = (self.a.ptr[i], self.a.ptr[i + 1]);
            for k1 in s..t {
                let (j1, v1) = (self.a.idx[k1], self.a.val[k1]);
                for k2 in s..t {
                    k[(self.a.idx[k2], j1)] += r * v1 * self.a.val[k2];
                }
            }
        }
        k.cholesky().ok_or_else(|| Error::InvalidQp("ADMM system matrix is not positive definite".into()))
    }

    /// Maps scaled iterates back to the user's variables.
    fn unscale(&self, x: &DVector<f64>, y: &[f64]) -> UnscaledPoint {
        let n = self.problem.n();
        let xu = x.component_mul(&self.d);
        let yu: Vec<f64> = y.iter().zip(&self.e).map(|(y, e)| y * e / self.c).collect();
        let dual_eq = DVector::from_column_slice(&yu[..self.n_eq]);
        let dual_in = DVector::from_column_slice(&yu[self.n_eq..self.n_eq + self.n_in]);
        let dual_b = if yu.len() > self.n_eq + self.n_in {
            DVector::from_column_slice(&yu[self.n_eq + self.n_in..])
        } else {
            DVector::zeros(n)
        };
        (xu, dual_eq, dual_in, dual_b)
    }

    fn kkt_of(&self, x: &DVector<f64>, y: &[f64]) -> (KktReport, UnscaledPoint) {
        let parts = self.unscale(x, y);
        let report = check_kkt(
            &self.problem,
            Candidate { primal: &parts.0, dual_eq: &parts.1, dual_ineq: &parts.2, dual_bounds: Some(&parts.3) },
        );
        (report, parts)
    }

    /// Solves from a cold start or from `warm`.
    pub fn solve(&self, warm: Option<&WarmStart>) -> Result<QpSolution> {
        let start = Instant::now();
        let s = &self.settings;
        let n = self.problem.n();
        let m = self.a.nrows();
        let mut x = DVector::zeros(n);
        let mut y = vec![0.0; m];
        if let Some(w) = warm {
            if w.x.len() != n || w.y.len() != m {
                return Err(Error::InvalidQp("warm start has wrong dimensions".into()));
            }
            x = w.x.component_div(&self.d);
            for i in 0..m {
                y[i] = w.y[i] * self.c / self.e[i];
            }
        }
        let mut z = vec![0.0; m];
        self.a.mul(x.as_slice(), &mut z);
        for i in 0..m {
            z[i] = z[i].clamp(self.l[i], self.u[i]);
        }
        if warm.is_some() && s.polish {
            if let Some((xp, yp)) = self.polish(&y, &z) {
                let (rep, _) = self.kkt_of(&xp, &yp);
                if rep.max() <= s.kkt_tol {
                    return Ok(self.finish(xp, yp, QpStatus::Optimal, 0, true, start));
                }
            }
        }
        let mut rho = s.rho;
        let mut rho_v = self.rho_vec(rho);
        let mut chol = self.factor(&rho_v)?;

        let mut ax = vec![0.0; m];
        let mut aty = vec![0.0; n];
        let mut rhs_buf = vec![0.0; m];
        let mut x_prev;
        let mut y_prev;
        let mut eps_stage = s.eps_abs.max(1e-3);
        let mut best: Option<(KktReport, DVector<f64>, Vec<f64>, bool)> = None;
        let mut iterations = 0;
        let mut last_guess: Vec<i8> = Vec::new();
        let mut polished_guess: Vec<i8> = Vec::new();

        for it in 1..=s.max_iter {
            iterations = it;
            x_prev = x.clone();
            y_prev = y.clone();
            for i in 0..m {
                rhs_buf[i] = rho_v[i] * z[i] - y[i];
            }
            self.a.tmul(&rhs_buf, &mut aty);
            let mut rhs = &x * s.sigma - &self.q;
            for j in 0..n {
                rhs[j] += aty[j];
            }
            let x_tilde = chol.solve(&rhs);
            let mut z_tilde = vec![0.0; m];
            self.a.mul(x_tilde.as_slice(), &mut z_tilde);
            x = &x_tilde * s.alpha + &x * (1.0 - s.alpha);
            for i in 0..m {
                let zr = s.alpha * z_tilde[i] + (1.0 - s.alpha) * z[i];
                let zn = (zr + y[i] / rho_v[i]).clamp(self.l[i], self.u[i]);
                y[i] += rho_v[i] * (zr - zn);
                z[i] = zn;
            }

            if it % s.check_interval != 0 && it != s.max_iter {
                continue;
            }
            // Residuals in the unscaled space.
            self.a.mul(x.as_slice(), &mut ax);
            self.a.tmul(&y, &mut aty);
            let px = &self.p * &x;
            let mut prim = 0.0_f64;
            let (mut ax_n, mut z_n) = (0.0_f64, 0.0_f64);
            for i in 0..m {
                prim = prim.max(((ax[i] - z[i]) / self.e[i]).abs());
                ax_n = ax_n.max((ax[i] / self.e[i]).abs());
                z_n = z_n.max((z[i] / self.e[i]).abs());
            }
            let mut dual = 0.0_f64;
            let (mut px_n, mut aty_n, mut q_n) = (0.0_f64, 0.0_f64, 0.0_f64);
            for j in 0..n {
                let inv = 1.0 / (self.d[j] * self.c);
                dual = dual.max(((px[j] + self.q[j] + aty[j]) * inv).abs());
                px_n = px_n.max((px[j] * inv).abs());
                aty_n = aty_n.max((aty[j] * inv).abs());
                q_n = q_n.max((self.q[j] * inv).abs());
            }
            let rel = (s.eps_rel / s.eps_abs.max(1e-300)) * eps_stage;
            let eps_p = eps_stage + rel * ax_n.max(z_n);
            let eps_d = eps_stage + rel * px_n.max(aty_n).max(q_n);

            if let Some(status) = self.infeasibility(&x, &x_prev, &y, &y_prev) {
                return Ok(self.finish(x, y, status, iterations, false, start));
            }

            let stage_done = prim <= eps_p && dual <= eps_d;
            let guess = self.active_guess(&y, &z);
            if s.polish && !stage_done && guess == last_guess && guess != polished_guess {
                if let Some((xp, yp)) = self.polish(&y, &z) {
                    let (rep_p, _) = self.kkt_of(&xp, &yp);
                    if rep_p.max() <= s.kkt_tol {
                        return Ok(self.finish(xp, yp, QpStatus::Optimal, iterations, true, start));
                    }
                }
                polished_guess = guess.clone();
            }
            last_guess = guess;

            if stage_done {
                let (rep, _) = self.kkt_of(&x, &y);
                if best.as_ref().is_none_or(|b| rep.max() < b.0.max()) {
                    best = Some((rep, x.clone(), y.clone(), false));
                }
                if s.polish {
                    if let Some((xp, yp)) = self.polish(&y, &z) {
                        let (rep_p, _) = self.kkt_of(&xp, &yp);
                        if rep_p.max() < best.as_ref().map_or(f64::INFINITY, |b| b.0.max()) {
                            best = Some((rep_p, xp, yp, true));
                        }
                    }
                }
                if let Some(b) = &best {
                    if b.0.max() <= s.kkt_tol {
                        let b = best.take().expect("checked above");
                        return Ok(self.finish(b.1, b.2, QpStatus::Optimal, iterations, b.3, start));
                    }
                }
                eps_stage = (eps_stage * 0.1).max(1e-12);
            }

            let denom_p = ax_n.max(z_n).max(1e-30);
            let denom_d = px_n.max(aty_n).max(q_n).max(1e-30);
            let ratio = ((prim / denom_p) / (dual / denom_d).max(1e-30)).sqrt();
            let new_rho = (rho * ratio).clamp(1e-6, 1e6);
            if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                rho = new_rho;
                rho_v = self.rho_vec(rho);
                chol = self.factor(&rho_v)?;
            }
        }
        let (rep, _) = self.kkt_of(&x, &y);
        let (xb, yb, pol) = match best {
            Some(b) if b.0.max() < rep.max() => (b.1, b.2, b.3),
            _ => (x, y, false),
        };
        Ok(self.finish(xb, yb, QpStatus::MaxIter, iterations, pol, start))
    }

    fn finish(
        &self,
        x: DVector<f64>,
        y: Vec<f64>,
        status: QpStatus,
        iterations: usize,
        polished: bool,
        start: Instant,
    ) -> QpSolution {
        let (kkt, (primal, dual_eq, dual_ineq, dual_bounds)) = self.kkt_of(&x, &y);
        let status = match status {
            QpStatus::Optimal | QpStatus::MaxIter if kkt.max() <= self.settings.kkt_tol => QpStatus::Optimal,
            QpStatus::Optimal => QpStatus::MaxIter,
            other => other,
        };
        let objective = self.problem.objective(&primal);
        QpSolution {
            primal,
            dual_eq,
            dual_ineq,
            dual_bounds,
            status,
            kkt,
            objective,
            iterations,
            polished,
            solve_time: start.elapsed(),
        }
    }

    fn infeasibility(&self, x: &DVector<f64>, x_prev: &DVector<f64>, y: &[f64], y_prev: &[f64]) -> Option<QpStatus> {
        let eps = self.settings.eps_infeasible;
        let m = self.a.nrows();
        let n = self.problem.n();
        let dy: Vec<f64> = y.iter().zip(y_prev).map(|(a, b)| a - b).collect();
        let dy_n = (0..m).map(|i| (dy[i] * self.e[i]).abs()).fold(0.0, f64::max);
        if dy_n > 1e-30 {
            let mut atdy = vec![0.0; n];
            self.a.tmul(&dy, &mut atdy);
            let at_n = (0..n).map(|j| (atdy[j] / self.d[j]).abs()).fold(0.0, f64::max);
            let mut support = 0.0;
            let mut finite = true;
            for i in 0..m {
                if dy[i] > 0.0 {
                    if self.u[i].is_infinite() {
                        finite = false;
                        break;
                    }
                    support += self.u[i] * dy[i];
                } else if dy[i] < 0.0 {
                    if self.l[i].is_infinite() {
                        finite = false;
                        break;
                    }
                    support += self.l[i] * dy[i];
                }
            }
            if finite && at_n <= eps * dy_n && support <= -eps * dy_n {
                return Some(QpStatus::Infeasible);
            }
        }
        let dx = x - x_prev;
        let dx_n = dx.component_mul(&self.d).amax();
        if dx_n > 1e-30 {
            let pdx = &self.p * &dx;
            let p_n = (0..n).map(|j| (pdx[j] / (self.d[j] * self.c)).abs()).fold(0.0, f64::max);
            let qdx = self.q.dot(&dx) / self.c;
            if p_n <= eps * dx_n && qdx <= -eps * dx_n {
                let mut adx = vec![0.0; m];
                self.a.mul(dx.as_slice(), &mut adx);
                let ok = (0..m).all(|i| {
                    let v = adx[i] / self.e[i];
                    let lo_ok = self.l[i].is_infinite() || v >= -eps * dx_n;
                    let hi_ok = self.u[i].is_infinite() || v <= eps * dx_n;
                    lo_ok && hi_ok
                });
                if ok {
                    return Some(QpStatus::Unbounded);
                }
            }
        }
        None
    }

    /// Per-row active-set guess: 0 inactive, -1 at the lower bound, 1 at the upper bound.
    fn active_guess(&self, y: &[f64], z: &[f64]) -> Vec<i8> {
        (0..self.a.nrows())
            .map(|i| {
                if (self.u[i] - self.l[i]).abs() < 1e-12 {
                    1
                } else if self.l[i].is_finite() && z[i] - self.l[i] < -y[i] {
                    -1
                } else if self.u[i].is_finite() && self.u[i] - z[i] < y[i] {
                    1
                } else {
                    0
                }
            })
            .collect()
    }

    /// Solves the KKT system of a guessed active set in the scaled space, then
    /// repairs the guess: violated rows join, rows with wrong-signed multipliers leave.
    fn polish(&self, y: &[f64], z: &[f64]) -> Option<(DVector<f64>, Vec<f64>)> {
        const ROUNDS: usize = 8;
        let m = self.a.nrows();
        let mut guess = self.active_guess(y, z);
        let mut out = None;
        for _ in 0..ROUNDS {
            let (xp, y_full) = self.solve_active(&guess)?;
            let mut ax = vec![0.0; m];
            self.a.mul(xp.as_slice(), &mut ax);
            let mut changed = false;
            for i in 0..m {
                if (self.u[i] - self.l[i]).abs() < 1e-12 {
                    continue;
                }
                let tol = 1e-9 * (1.0 + ax[i].abs());
                match guess[i] {
                    1 if y_full[i] < 0.0 => {
                        guess[i] = 0;
                        changed = true;
                    }
                    -1 if y_full[i] > 0.0 => {
                        guess[i] = 0;
                        changed = true;
                    }
                    0 if ax[i] > self.u[i] + tol => {
                        guess[i] = 1;
                        changed = true;
                    }
                    0 if ax[i] < self.l[i] - tol => {
                        guess[i] = -1;
                        changed = true;
                    }
                    _ => {}
                }
            }
            out = Some((xp, y_full));
            if !changed {
                break;
            }
        }
        out
    }

    fn solve_active(&self, guess: &[i8]) -> Option<(DVector<f64>, Vec<f64>)> {
        let n = self.problem.n();
        let m = self.a.nrows();
        let mut active = Vec::new();
        let mut target = Vec::new();
        for (i, &g) in guess.iter().enumerate() {
            match g {
                -1 => {
                    active.push(i);
                    target.push(self.l[i]);
                }
                1 => {
                    active.push(i);
                    target.push(self.u[i]);
                }
                _ => {}
            }
        }
        let k = active.len();
        let mut a_act = DMatrix::zeros(k, n);
        for (r, &i) in active.iter().enumerate() {
            for (j, v) in self.a.row(i) {
                a_act[(r, j)] = v;
            }
        }
        let delta = 1e-7;
        let mut kmat = &self.p + DMatrix::identity(n, n) * delta;
        kmat += a_act.tr_mul(&a_act) / delta;
        let chol = kmat.cholesky()?;
        let b = DVector::from_vec(target);
        let solve = |r1: &DVector<f64>, r2: &DVector<f64>| {
            let dx = chol.solve(&(r1 + a_act.tr_mul(r2) / delta));
            let dy = (&a_act * &dx - r2) / delta;
            (dx, dy)
        };
        let mut xp = DVector::zeros(n);
        let mut yp = DVector::zeros(k);
        for _ in 0..12 {
            let r1 = -(&self.p * &xp) - &self.q - a_act.tr_mul(&yp);
            let r2 = &b - &a_act * &xp;
            if r1.amax().max(if k > 0 { r2.amax() } else { 0.0 }) < 1e-14 {
                break;
            }
            let (dx, dy) = solve(&r1, &r2);
            xp += dx;
            yp += dy;
        }
        if xp.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut y_full = vec![0.0; m];
        for (r, &i) in active.iter().enumerate() {
            y_full[i] = yp[r];
        }
        Some((xp, y_full))
    }
}

/// Solves `problem` from a cold start.
pub fn solve(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    QpSolver::new(problem.clone(), settings.clone())?.solve(None)
}

/// Writes the problem in the plain-text dump format.
///
/// ```text
/// dermpc-qp 1
/// n <n>
/// hessian            (n lines of n values)
/// linear             (1 line of n values)
/// eq <m>             (m lines: n coefficients then the right-hand side)
/// ineq <m>           (m lines: n coefficients then the right-hand side)
/// lower none | lower (then 1 line of n values)
/// upper none | upper (then 1 line of n values)
/// ```
///
/// Values use the shortest representation that round-trips exactly.
pub fn dump_problem(p: &QpProblem) -> String {
    let mut s = String::new();
    let n = p.n();
    let line = |s: &mut String, vals: &mut dyn Iterator<Item = f64>| {
        let parts: Vec<String> = vals.map(|v| v.to_string()).collect();
        s.push_str(&parts.join(" "));
        s.push('\n');
    };
    let _ = writeln!(s, "dermpc-qp 1\nn {n}\nhessian");
    for i in 0..n {
        line(&mut s, &mut (0..n).map(|j| p.hessian[(i, j)]));
    }
    s.push_str("linear\n");
    line(&mut s, &mut p.linear.iter().copied());
    for (name, a, b) in [("eq", &p.a_eq, &p.b_eq), ("ineq", &p.a_in, &p.b_in)] {
        let _ = writeln!(s, "{name} {}", a.nrows());
        for i in 0..a.nrows() {
            line(&mut s, &mut (0..n).map(|j| a[(i, j)]).chain(std::iter::once(b[i])));
        }
    }
    for (name, v) in [("lower", &p.lower), ("upper", &p.upper)] {
        match v {
            None => {
                let _ = writeln!(s, "{name} none");
            }
            Some(v) => {
                let _ = writeln!(s, "{name}");
                line(&mut s, &mut v.iter().copied());
            }
        }
    }
    s
}

/// Parses the dump format written by [`dump_problem`].
pub fn load_problem(text: &str) -> Result<QpProblem> {
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        lines
            .next()
            .map(|(i, l)| (i + 1, l.trim().to_string()))
            .ok_or(Error::Parse { line: 0, msg: format!("unexpected end of input, expected {what}") })
    };
    let nums = |line: usize, s: &str, count: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Parse { line, msg: format!("invalid number '{t}'") }))
            .collect::<Result<_>>()?;
        if v.len() != count {
            return Err(Error::Parse { line, msg: format!("expected {count} values, found {}", v.len()) });
        }
        Ok(v)
    };
    let keyed = |line: usize, s: &str, key: &str| -> Result<Option<usize>> {
        let mut it = s.split_whitespace();
        if it.next() != Some(key) {
            return Err(Error::Parse { line, msg: format!("expected '{key}', found '{s}'") });
        }
        match it.next() {
            None => Ok(None),
            Some("none") => Ok(Some(usize::MAX)),
            Some(t) => t.parse().map(Some).map_err(|_| Error::Parse { line, msg: format!("invalid count '{t}'") }),
        }
    };
    let (l, s) = next("header")?;
    if s != "dermpc-qp 1" {
        return Err(Error::Parse { line: l, msg: format!("unknown header '{s}'") });
    }
    let (l, s) = next("n")?;
    let n = keyed(l, &s, "n")?.ok_or(Error::Parse { line: l, msg: "missing n".into() })?;
    let (l, s) = next("hessian")?;
    keyed(l, &s, "hessian")?;
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        let (l, s) = next("hessian row")?;
        for (j, v) in nums(l, &s, n)?.into_iter().enumerate() {
            h[(i, j)] = v;
        }
    }
    let (l, s) = next("linear")?;
    keyed(l, &s, "linear")?;
    let (l, s) = next("linear values")?;
    let f = DVector::from_vec(nums(l, &s, n)?);
    let mut blocks = Vec::new();
    for key in ["eq", "ineq"] {
        let (l, s) = next(key)?;
        let m = keyed(l, &s, key)?.ok_or(Error::Parse { line: l, msg: format!("missing {key} row count") })?;
        let mut a = DMatrix::zeros(m, n);
        let mut b = DVector::zeros(m);
        for i in 0..m {
            let (l, s) = next("constraint row")?;
            let v = nums(l, &s, n + 1)?;
            for j in 0..n {
                a[(i, j)] = v[j];
            }
            b[i] = v[n];
        }
        blocks.push((a, b));
    }
    let mut bounds = Vec::new();
    for key in ["lower", "upper"] {
        let (l, s) = next(key)?;
        match keyed(l, &s, key)? {
            Some(usize::MAX) => bounds.push(None),
            None => {
                let (l, s) = next("bound values")?;
                bounds.push(Some(DVector::from_vec(nums(l, &s, n)?)));
            }
            Some(_) => return Err(Error::Parse { line: l, msg: format!("malformed '{key}' line") }),
        }
    }
    let (ineq_a, ineq_b) = blocks.pop().expect("two blocks");
    let (eq_a, eq_b) = blocks.pop().expect("two blocks");
    let upper = bounds.pop().expect("two bounds");
    let lower = bounds.pop().expect("two bounds");
    Ok(QpProblem { hessian: h, linear: f, a_eq: eq_a, b_eq: eq_b, a_in: ineq_a, b_in: ineq_b, lower, upper })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_quadratic() {
        let p = QpProblem::new(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, -6.0));
        let s = solve(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.primal[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn lower_bound_via_inequality() {
        let p = QpProblem::new(DMatrix::from_element(1, 1, 2.0), DVector::zeros(1))
            .with_ineq(DMatrix::from_element(1, 1, -1.0), DVector::from_element(1, -1.0));
        let s = solve(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.primal[0] - 1.0).abs() < 1e-9);
        assert!((s.dual_ineq[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn infeasible_box() {
        let p = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1))
            .with_ineq(DMatrix::from_column_slice(2, 1, &[1.0, -1.0]), DVector::from_vec(vec![-1.0, -1.0]));
        assert_eq!(solve(&p, &QpSettings::default()).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn dump_round_trip() {
        let p = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.0 / 3.0]),
            DVector::from_vec(vec![1e-17, -2.5]),
        )
        .with_eq(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_element(1, 0.3))
        .with_bounds(Some(DVector::from_vec(vec![f64::NEG_INFINITY, 0.0])), None);
        assert_eq!(load_problem(&dump_problem(&p)).unwrap(), p);
    }
}
