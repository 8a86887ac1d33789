//! Bound-constrained limited-memory BFGS (L-BFGS-B).
//!
//! Each iteration finds the generalized Cauchy point along the projected
//! steepest-descent path, minimizes the compact quasi-Newton model over the
//! variables still free there (direct primal method), and backtracks along
//! the resulting direction until the Armijo condition holds. When the accepted
//! point is still descending along the direction, one secant extrapolation is
//! tried and kept if it lowers the objective further.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptStatus {
    Converged,
    MaxIter,
    LineSearchFail,
}

impl std::fmt::Display for OptStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            OptStatus::Converged => "converged",
            OptStatus::MaxIter => "iteration limit reached",
            OptStatus::LineSearchFail => "line search failed",
        };
        f.write_str(s)
    }
}

/// Box, tolerances and iteration budget for [`minimize`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptProblem {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub max_iter: usize,
    /// Stop when an accepted step lowers `f` by less than this fraction of `|f|`.
    pub tol_f: f64,
    /// Stop when the projected gradient's infinity norm falls below this.
    pub tol_g: f64,
    /// Number of correction pairs kept.
    pub memory: usize,
}

impl OptProblem {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let p = Self {
            lower,
            upper,
            max_iter: 100,
            tol_f: 1e-8,
            tol_g: 1e-5,
            memory: 5,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_tolerances(mut self, tol_f: f64, tol_g: f64) -> Self {
        self.tol_f = tol_f;
        self.tol_g = tol_g;
        self
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn validate(&self) -> Result<()> {
        if self.lower.is_empty() {
            return Err(Error::EmptyInput);
        }
        if self.upper.len() != self.lower.len() {
            return Err(Error::DimensionMismatch {
                expected: self.lower.len(),
                found: self.upper.len(),
            });
        }
        for (i, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if l.is_nan() || u.is_nan() || !(l < u) {
                return Err(Error::InvalidParameter(format!(
                    "bounds for coordinate {i} are not ordered: [{l}, {u}]"
                )));
            }
        }
        if !(self.tol_f >= 0.0 && self.tol_g >= 0.0) {
            return Err(Error::InvalidParameter(
                "tolerances must be nonnegative".into(),
            ));
        }
        if self.memory == 0 {
            return Err(Error::InvalidParameter("memory must be positive".into()));
        }
        Ok(())
    }

    fn project(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    fn projected_grad_norm(&self, x: &DVector<f64>, g: &DVector<f64>) -> f64 {
        (0..x.len())
            .map(|i| ((x[i] - g[i]).clamp(self.lower[i], self.upper[i]) - x[i]).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub x_opt: Vec<f64>,
    pub f_opt: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: OptStatus,
    /// Infinity norm of the projected gradient at `x_opt`.
    pub grad_norm: f64,
    /// Objective value after each accepted step, starting with `f(x0)`.
    pub history: Vec<f64>,
}

/// Compact representation `B = theta I - W M W^T` of the limited-memory matrix.
struct Memory {
    cap: usize,
    s: VecDeque<DVector<f64>>,
    y: VecDeque<DVector<f64>>,
    theta: f64,
    w: DMatrix<f64>,
    m: DMatrix<f64>,
}

impl Memory {
    fn new(n: usize, cap: usize) -> Self {
        Self {
            cap,
            s: VecDeque::with_capacity(cap),
            y: VecDeque::with_capacity(cap),
            theta: 1.0,
            w: DMatrix::zeros(n, 0),
            m: DMatrix::zeros(0, 0),
        }
    }

    fn len(&self) -> usize {
        self.s.len()
    }

    fn clear(&mut self) {
        let n = self.w.nrows();
        self.s.clear();
        self.y.clear();
        self.theta = 1.0;
        self.w = DMatrix::zeros(n, 0);
        self.m = DMatrix::zeros(0, 0);
    }

    /// Adds a correction pair; skipped when the curvature condition fails.
    fn push(&mut self, s: DVector<f64>, y: DVector<f64>) {
        let sy = s.dot(&y);
        let yy = y.dot(&y);
        if !(sy > f64::EPSILON * yy) || !sy.is_finite() {
            return;
        }
        if self.s.len() == self.cap {
            self.s.pop_front();
            self.y.pop_front();
        }
        self.s.push_back(s);
        self.y.push_back(y);
        self.theta = yy / sy;
        if !self.rebuild() {
            self.clear();
        }
    }

    fn rebuild(&mut self) -> bool {
        let k = self.len();
        let n = self.w.nrows();
        let mut w = DMatrix::zeros(n, 2 * k);
        for j in 0..k {
            w.column_mut(j).copy_from(&self.y[j]);
            w.column_mut(k + j).copy_from(&(&self.s[j] * self.theta));
        }
        let mut mid = DMatrix::zeros(2 * k, 2 * k);
        for i in 0..k {
            for j in 0..k {
                let sy = self.s[i].dot(&self.y[j]);
                if i == j {
                    mid[(i, i)] = -sy;
                } else if i > j {
                    // L in the lower-left block, its transpose upper-right
                    mid[(k + i, j)] = sy;
                    mid[(j, k + i)] = sy;
                }
                mid[(k + i, k + j)] = self.theta * self.s[i].dot(&self.s[j]);
            }
        }
        match mid.lu().try_inverse() {
            Some(m) if m.iter().all(|v| v.is_finite()) => {
                self.w = w;
                self.m = m;
                true
            }
            _ => false,
        }
    }
}

/// Generalized Cauchy point along the projected gradient path.
///
/// Returns the point and `c = W^T (x_cp - x)`.
fn cauchy_point(
    prob: &OptProblem,
    x: &DVector<f64>,
    g: &DVector<f64>,
    mem: &Memory,
) -> (DVector<f64>, DVector<f64>) {
    let n = x.len();
    let theta = mem.theta;
    let (w, m) = (&mem.w, &mem.m);
    let mut t = vec![f64::INFINITY; n];
    let mut d = DVector::zeros(n);
    for i in 0..n {
        if g[i] < 0.0 {
            t[i] = (x[i] - prob.upper[i]) / g[i];
        } else if g[i] > 0.0 {
            t[i] = (x[i] - prob.lower[i]) / g[i];
        }
        if t[i] > 0.0 {
            d[i] = -g[i];
        }
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| t[i] > 0.0 && t[i].is_finite()).collect();
    order.sort_by(|&a, &b| t[a].total_cmp(&t[b]).then(a.cmp(&b)));

    let mut xcp = x.clone();
    let mut p = w.tr_mul(&d);
    let mut c = DVector::zeros(p.len());
    let mut f1 = -d.dot(&d);
    let f2_orig = -theta * f1 - p.dot(&(m * &p));
    let mut f2 = f2_orig;
    let mut dt_min = -f1 / f2;
    let mut t_old = 0.0;

    for &b in &order {
        let dt = t[b] - t_old;
        if dt_min < dt {
            break;
        }
        let xb = if d[b] > 0.0 {
            prob.upper[b]
        } else {
            prob.lower[b]
        };
        let zb = xb - x[b];
        xcp[b] = xb;
        c.axpy(dt, &p, 1.0);
        let gb = g[b];
        let wb = w.row(b).transpose();
        let mwb = m * &wb;
        f1 += dt * f2 + gb * gb + theta * gb * zb - gb * mwb.dot(&c);
        f2 -= theta * gb * gb + 2.0 * gb * mwb.dot(&p) + gb * gb * mwb.dot(&wb);
        f2 = f2.max(f64::EPSILON * f2_orig);
        p.axpy(gb, &wb, 1.0);
        d[b] = 0.0;
        dt_min = -f1 / f2;
        t_old = t[b];
    }
    let dt_min = dt_min.max(0.0);
    let t_final = t_old + dt_min;
    for i in 0..n {
        if d[i] != 0.0 {
            xcp[i] = (x[i] + t_final * d[i]).clamp(prob.lower[i], prob.upper[i]);
        }
    }
    c.axpy(dt_min, &p, 1.0);
    (xcp, c)
}

/// Minimizes the quadratic model over the free variables at the Cauchy point,
/// truncating the step to stay inside the box.
fn subspace_min(
    prob: &OptProblem,
    x: &DVector<f64>,
    g: &DVector<f64>,
    xcp: &DVector<f64>,
    c: &DVector<f64>,
    mem: &Memory,
) -> DVector<f64> {
    let free: Vec<usize> = (0..x.len())
        .filter(|&i| xcp[i] > prob.lower[i] && xcp[i] < prob.upper[i])
        .collect();
    if free.is_empty() {
        return xcp.clone();
    }
    let theta = mem.theta;
    let k2 = mem.w.ncols();
    let wmc = if k2 > 0 {
        &mem.w * (&mem.m * c)
    } else {
        DVector::zeros(x.len())
    };
    let rc = DVector::from_iterator(
        free.len(),
        free.iter()
            .map(|&i| g[i] + theta * (xcp[i] - x[i]) - wmc[i]),
    );
    let mut du = -&rc / theta;
    if k2 > 0 {
        let wf = DMatrix::from_fn(free.len(), k2, |r, j| mem.w[(free[r], j)]);
        let v = &mem.m * wf.tr_mul(&rc);
        let nmat = DMatrix::identity(k2, k2) - (&mem.m * wf.tr_mul(&wf)) / theta;
        if let Some(v) = nmat.lu().solve(&v) {
            du -= (&wf * v) / (theta * theta);
        }
    }
    let mut alpha: f64 = 1.0;
    for (r, &i) in free.iter().enumerate() {
        if du[r] > 0.0 {
            alpha = alpha.min((prob.upper[i] - xcp[i]) / du[r]);
        } else if du[r] < 0.0 {
            alpha = alpha.min((prob.lower[i] - xcp[i]) / du[r]);
        }
    }
    let mut xbar = xcp.clone();
    for (r, &i) in free.iter().enumerate() {
        xbar[i] = (xcp[i] + alpha * du[r]).clamp(prob.lower[i], prob.upper[i]);
    }
    xbar
}

/// Largest `t` keeping `x + t d` inside the box.
fn max_step(prob: &OptProblem, x: &DVector<f64>, d: &DVector<f64>) -> f64 {
    let mut t = f64::INFINITY;
    for i in 0..x.len() {
        if d[i] > 0.0 {
            t = t.min((prob.upper[i] - x[i]) / d[i]);
        } else if d[i] < 0.0 {
            t = t.min((prob.lower[i] - x[i]) / d[i]);
        }
    }
    t
}

/// Minimizes `fg` over the box in `problem`, starting from `x0` projected onto it.
///
/// `fg` returns the objective and its gradient. A non-finite value away from
/// `x0` is treated as a failed trial point and the line search backs off.
pub fn minimize<F>(problem: &OptProblem, x0: &[f64], mut fg: F) -> Result<OptResult>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    problem.validate()?;
    let n = problem.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: x0.len(),
        });
    }
    let mut x = DVector::from_column_slice(x0);
    problem.project(&mut x);
    let (mut f, g0) = fg(x.as_slice());
    let mut evaluations = 1;
    if g0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: g0.len(),
        });
    }
    let mut g = DVector::from_vec(g0);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "objective or gradient at the starting point",
        ));
    }

    let mut mem = Memory::new(n, problem.memory);
    let mut history = vec![f];
    let mut iterations = 0;
    let status;
    loop {
        let pg = problem.projected_grad_norm(&x, &g);
        if pg <= problem.tol_g {
            status = OptStatus::Converged;
            break;
        }
        if iterations >= problem.max_iter {
            status = OptStatus::MaxIter;
            break;
        }

        let (xcp, c) = cauchy_point(problem, &x, &g, &mem);
        let mut d = subspace_min(problem, &x, &g, &xcp, &c, &mem) - &x;
        let mut gtd = g.dot(&d);
        if !(gtd < 0.0) {
            // model direction is not a descent direction: restart from steepest descent
            mem.clear();
            let mut xs = &x - &g;
            problem.project(&mut xs);
            d = xs - &x;
            gtd = g.dot(&d);
            if !(gtd < 0.0) {
                status = OptStatus::Converged;
                break;
            }
        }

        let mut step = if mem.len() == 0 {
            (1.0 / d.norm()).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut xt = &x + &d * step;
            problem.project(&mut xt);
            let (ft, gt) = fg(xt.as_slice());
            evaluations += 1;
            let finite = ft.is_finite() && gt.len() == n && gt.iter().all(|v| v.is_finite());
            if finite && ft <= f + ARMIJO_C1 * step * gtd {
                let gt = DVector::from_vec(gt);
                let slope = gt.dot(&d);
                let mut best = (xt, ft, gt);
                if slope < 0.0 {
                    // still descending: try the secant minimizer further along d
                    let tq = (step * gtd / (gtd - slope))
                        .min(10.0 * step)
                        .min(max_step(problem, &x, &d));
                    if tq > 1.1 * step {
                        let xq = &x + &d * tq;
                        let (fq, gq) = fg(xq.as_slice());
                        evaluations += 1;
                        let ok =
                            fq.is_finite() && gq.len() == n && gq.iter().all(|v| v.is_finite());
                        if ok && fq < best.1 {
                            best = (xq, fq, DVector::from_vec(gq));
                        }
                    }
                }
                accepted = Some(best);
                break;
            }
            step = if finite {
                // safeguarded quadratic interpolation
                let denom = 2.0 * (ft - f - gtd * step);
                let q = if denom > 0.0 {
                    -gtd * step * step / denom
                } else {
                    0.5 * step
                };
                q.clamp(0.1 * step, 0.5 * step)
            } else {
                0.1 * step
            };
        }

        let Some((xn, fnew, gnew)) = accepted else {
            if mem.len() > 0 {
                mem.clear();
                continue;
            }
            status = OptStatus::LineSearchFail;
            break;
        };
        iterations += 1;
        let s = &xn - &x;
        let y = &gnew - &g;
        let decrease = f - fnew;
        let scale = f.abs().max(fnew.abs()).max(f64::MIN_POSITIVE);
        x = xn;
        f = fnew;
        g = gnew;
        history.push(f);
        mem.push(s, y);
        if decrease <= problem.tol_f * scale {
            status = OptStatus::Converged;
            break;
        }
    }

    Ok(OptResult {
        grad_norm: problem.projected_grad_norm(&x, &g),
        x_opt: x.as_slice().to_vec(),
        f_opt: f,
        grad: g.as_slice().to_vec(),
        iterations,
        evaluations,
        status,
        history,
    })
}
