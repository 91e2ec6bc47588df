//! Dense convex quadratic programming by a primal active-set method.
//!
//! Problems have the form
//!
//! ```text
//!     minimise    ½ xᵀQx + qᵀx
//!     subject to  A x ≥ b
//! ```
//!
//! with `Q` symmetric positive semidefinite. Phase 1 minimises the largest
//! constraint violation `t` over `(x, t)` (an LP handled by the same
//! active-set iteration) and reports infeasibility when its optimum exceeds
//! the tolerance. Phase 2 walks from that feasible point, solving one
//! equality-constrained KKT system per iteration, adding the first blocking
//! constraint and dropping the constraint with the most negative multiplier.
//! A KKT system that is singular because `Q` is only semidefinite is solved
//! with a small Tikhonov shift on the Hessian block.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const DAMPING: f64 = 1e-12;
const PSD_EIG_TOL: f64 = -1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("hessian is not symmetric")]
    NotSymmetric,
    #[error("hessian is not positive semidefinite (smallest eigenvalue {0})")]
    NotPsd(f64),
    #[error("objective is unbounded below on the feasible set")]
    Unbounded,
    #[error("iteration limit {0} exceeded")]
    IterationLimit(usize),
    #[error("solver finished but KKT conditions are violated (residual {0:e})")]
    Numerical(f64),
}

/// `minimise ½ xᵀQx + qᵀx  s.t.  A x ≥ b`, matrices stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexQp {
    n: usize,
    hessian: Vec<f64>,
    linear: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl ConvexQp {
    pub fn new(hessian: Vec<f64>, linear: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self, QpError> {
        let n = linear.len();
        if n == 0 {
            return Err(QpError::Dimension("problem has no variables".into()));
        }
        if hessian.len() != n * n {
            return Err(QpError::Dimension(format!(
                "hessian has {} entries, expected {}",
                hessian.len(),
                n * n
            )));
        }
        if a.len() != b.len() * n {
            return Err(QpError::Dimension(format!(
                "constraint matrix has {} entries, expected {}x{}",
                a.len(),
                b.len(),
                n
            )));
        }
        for i in 0..n {
            for j in 0..i {
                let (x, y) = (hessian[i * n + j], hessian[j * n + i]);
                if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                    return Err(QpError::NotSymmetric);
                }
            }
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &hessian));
        let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if min_eig < PSD_EIG_TOL * scale {
            return Err(QpError::NotPsd(min_eig));
        }
        Ok(ConvexQp {
            n,
            hessian,
            linear,
            a,
            b,
        })
    }

    /// Convenience constructor from row vectors.
    pub fn from_rows(
        hessian: &[Vec<f64>],
        linear: Vec<f64>,
        rows: &[Vec<f64>],
        b: Vec<f64>,
    ) -> Result<Self, QpError> {
        let n = linear.len();
        if hessian.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(QpError::Dimension("row length mismatch".into()));
        }
        ConvexQp::new(hessian.concat(), linear, rows.concat(), b)
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn num_constraints(&self) -> usize {
        self.b.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.n..(i + 1) * self.n]
    }

    pub fn rhs(&self) -> &[f64] {
        &self.b
    }

    pub fn linear(&self) -> &[f64] {
        &self.linear
    }

    pub fn hessian(&self, i: usize, j: usize) -> f64 {
        self.hessian[i * self.n + j]
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut v = 0.0;
        for i in 0..self.n {
            let qx: f64 = (0..self.n).map(|j| self.hessian(i, j) * x[j]).sum();
            v += 0.5 * x[i] * qx + self.linear[i] * x[i];
        }
        v
    }

    /// `a_iᵀx − b_i` for every constraint.
    pub fn slacks(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_constraints())
            .map(|i| dot(self.row(i), x) - self.b[i])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: Vec<f64>,
    /// One multiplier per constraint; zero outside the active set.
    pub multipliers: Vec<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
    /// Phase-2 objective value after every iteration.
    pub objective_history: Vec<f64>,
    /// Optimal value of the phase-1 problem (largest remaining violation).
    pub phase1_violation: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub tol: f64,
    /// Zero picks a limit proportional to the problem size.
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tol: 1e-9,
            max_iter: 0,
        }
    }
}

pub fn solve_qp(qp: &ConvexQp, tol: f64) -> Result<QpSolution, QpError> {
    solve_qp_with(qp, QpOptions { tol, max_iter: 0 }, None)
}

pub fn solve_qp_with(
    qp: &ConvexQp,
    opts: QpOptions,
    start: Option<&[f64]>,
) -> Result<QpSolution, QpError> {
    let n = qp.n;
    let m = qp.num_constraints();
    let max_iter = if opts.max_iter == 0 {
        50 * (n + m) + 1000
    } else {
        opts.max_iter
    };
    let x0 = match start {
        Some(s) if s.len() == n => s.to_vec(),
        Some(s) => {
            return Err(QpError::Dimension(format!(
                "start point has {} entries, expected {n}",
                s.len()
            )))
        }
        None => vec![0.0; n],
    };

    // Phase 1: minimise t subject to A x + t ≥ b, t ≥ 0.
    let (x_feas, violation, iters1) = if m == 0 {
        (x0, 0.0, 0)
    } else {
        let worst = qp
            .slacks(&x0)
            .iter()
            .fold(0.0f64, |acc, s| acc.max(-s));
        let mut z0 = x0.clone();
        z0.push(worst);
        let mut rows = Vec::with_capacity((m + 1) * (n + 1));
        let mut rhs = Vec::with_capacity(m + 1);
        for i in 0..m {
            rows.extend_from_slice(qp.row(i));
            rows.push(1.0);
            rhs.push(qp.b[i]);
        }
        rows.extend(std::iter::repeat(0.0).take(n));
        rows.push(1.0);
        rhs.push(0.0);
        let mut lin = vec![0.0; n + 1];
        lin[n] = 1.0;
        let phase1 = Subproblem {
            n: n + 1,
            hessian: vec![0.0; (n + 1) * (n + 1)],
            linear: lin,
            a: &rows,
            b: &rhs,
        };
        let run = phase1.active_set(z0, opts.tol, max_iter, false)?;
        let t = run.x[n];
        (run.x[..n].to_vec(), t.max(0.0), run.iterations)
    };

    if violation > opts.tol {
        return Ok(QpSolution {
            status: QpStatus::Infeasible,
            x: x_feas,
            multipliers: vec![0.0; m],
            active: Vec::new(),
            iterations: iters1,
            objective_history: Vec::new(),
            phase1_violation: violation,
        });
    }

    let phase2 = Subproblem {
        n,
        hessian: qp.hessian.clone(),
        linear: qp.linear.clone(),
        a: &qp.a,
        b: &qp.b,
    };
    let run = phase2.active_set(x_feas, opts.tol, max_iter.saturating_sub(iters1), true)?;
    let mut multipliers = vec![0.0; m];
    for (&i, &l) in run.working.iter().zip(&run.lambda) {
        multipliers[i] = l.max(0.0);
    }
    let mut active = run.working.clone();
    active.sort_unstable();
    let sol = QpSolution {
        status: QpStatus::Optimal,
        x: run.x,
        multipliers,
        active,
        iterations: iters1 + run.iterations,
        objective_history: run.history,
        phase1_violation: violation,
    };
    let residual = kkt_residual(qp, &sol);
    if residual > opts.tol.max(1e-12) * 1e3 {
        return Err(QpError::Numerical(residual));
    }
    Ok(sol)
}

/// Largest of the stationarity, primal feasibility, dual feasibility and
/// complementarity residuals, recomputed from scratch.
pub fn kkt_residual(qp: &ConvexQp, sol: &QpSolution) -> f64 {
    let n = qp.n;
    let m = qp.num_constraints();
    if sol.x.len() != n || sol.multipliers.len() != m {
        return f64::INFINITY;
    }
    let mut stationarity: f64 = 0.0;
    for i in 0..n {
        let mut g = qp.linear[i];
        for j in 0..n {
            g += qp.hessian(i, j) * sol.x[j];
        }
        for k in 0..m {
            g -= qp.a[k * n + i] * sol.multipliers[k];
        }
        stationarity = stationarity.max(g.abs());
    }
    let slacks = qp.slacks(&sol.x);
    let primal = slacks.iter().fold(0.0f64, |acc, s| acc.max(-s));
    let dual = sol.multipliers.iter().fold(0.0f64, |acc, l| acc.max(-l));
    let comp = slacks
        .iter()
        .zip(&sol.multipliers)
        .fold(0.0f64, |acc, (s, l)| acc.max((s * l).abs()));
    stationarity.max(primal).max(dual).max(comp)
}

pub fn check_kkt(qp: &ConvexQp, sol: &QpSolution, tol: f64) -> bool {
    sol.status == QpStatus::Optimal && kkt_residual(qp, sol) <= tol
}

struct Subproblem<'a> {
    n: usize,
    hessian: Vec<f64>,
    linear: Vec<f64>,
    a: &'a [f64],
    b: &'a [f64],
}

struct ActiveSetRun {
    x: Vec<f64>,
    working: Vec<usize>,
    lambda: Vec<f64>,
    iterations: usize,
    history: Vec<f64>,
}

impl Subproblem<'_> {
    fn m(&self) -> usize {
        self.b.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.n..(i + 1) * self.n]
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.linear[i]
                    + (0..self.n)
                        .map(|j| self.hessian[i * self.n + j] * x[j])
                        .sum::<f64>()
            })
            .collect()
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let g = self.gradient(x);
        // ½xᵀQx + qᵀx = ½ xᵀ(Qx + q) + ½ qᵀx
        0.5 * (dot(&g, x) + dot(&self.linear, x))
    }

    /// Solve `min ½pᵀHp + gᵀp  s.t.  A_W p = 0`, returning `(p, λ, damped)`.
    fn kkt_step(&self, g: &[f64], working: &[usize]) -> (Vec<f64>, Vec<f64>, bool) {
        let n = self.n;
        let w = working.len();
        let dim = n + w;
        let scale = self.hessian.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let build = |shift: f64| {
            let mut k = DMatrix::<f64>::zeros(dim, dim);
            for i in 0..n {
                for j in 0..n {
                    k[(i, j)] = self.hessian[i * n + j];
                }
                k[(i, i)] += shift;
            }
            for (r, &ci) in working.iter().enumerate() {
                for (j, v) in self.row(ci).iter().enumerate() {
                    k[(n + r, j)] = *v;
                    k[(j, n + r)] = -*v;
                }
            }
            k
        };
        let mut rhs = DVector::<f64>::zeros(dim);
        for i in 0..n {
            rhs[i] = -g[i];
        }
        let attempt = |k: DMatrix<f64>| {
            let lu = k.lu();
            let u = lu.u();
            let diag = u.diagonal();
            let big = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let small = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            if big == 0.0 || small <= 1e-13 * big {
                None
            } else {
                lu.solve(&rhs)
            }
        };
        let (sol, damped) = match attempt(build(0.0)) {
            Some(s) => (s, false),
            None => {
                // Nearly dependent working rows can leave even the damped
                // system singular; fall back to a least-squares solution.
                let s = attempt(build(DAMPING * scale)).unwrap_or_else(|| {
                    let k = build(DAMPING * scale);
                    let big = k.amax().max(1.0);
                    k.svd(true, true)
                        .solve(&rhs, 1e-12 * big)
                        .unwrap_or_else(|_| DVector::zeros(dim))
                });
                (s, true)
            }
        };
        let p = sol.rows(0, n).iter().cloned().collect();
        let lambda = sol.rows(n, w).iter().cloned().collect();
        (p, lambda, damped)
    }

    fn active_set(
        &self,
        mut x: Vec<f64>,
        tol: f64,
        max_iter: usize,
        record: bool,
    ) -> Result<ActiveSetRun, QpError> {
        let m = self.m();
        // Anti-cycling: switch to smallest-index rules once progress stalls.
        let bland_after = (3 * m.max(1)).min(100 + 20 * self.n);
        let mut working: Vec<usize> = Vec::new();
        let mut in_working = vec![false; m];
        let mut history = Vec::new();
        if record {
            history.push(self.objective(&x));
        }
        for iter in 0..max_iter {
            let bland = iter >= bland_after;
            let g = self.gradient(&x);
            let (mut p, lambda, damped) = self.kkt_step(&g, &working);
            if working.len() >= self.n && !damped {
                // n independent active rows fix a vertex; any nonzero step is
                // rounding noise.
                p.fill(0.0);
            }
            let xnorm = x.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
            let pnorm = p.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));

            if pnorm <= 1e-12 * xnorm {
                // Stationary on the working face: inspect multipliers.
                let mut drop: Option<(usize, f64)> = None;
                for (k, &l) in lambda.iter().enumerate() {
                    if l < -tol {
                        let better = match drop {
                            None => true,
                            Some((dk, dl)) => {
                                if bland {
                                    working[k] < working[dk]
                                } else {
                                    l < dl
                                }
                            }
                        };
                        if better {
                            drop = Some((k, l));
                        }
                    }
                }
                match drop {
                    None => {
                        return Ok(ActiveSetRun {
                            x,
                            working,
                            lambda,
                            iterations: iter + 1,
                            history,
                        })
                    }
                    Some((k, _)) => {
                        in_working[working[k]] = false;
                        working.remove(k);
                        continue;
                    }
                }
            }

            // Ratio test over constraints outside the working set.
            let mut alpha = 1.0;
            let mut blocking: Option<(usize, f64)> = None;
            for i in 0..m {
                if in_working[i] {
                    continue;
                }
                let ap = dot(self.row(i), &p);
                if ap >= 0.0 {
                    continue;
                }
                let slack = dot(self.row(i), &x) - self.b[i];
                let ratio = slack.max(0.0) / -ap;
                // Violation at the full step breaks ties; lowest index under Bland.
                let full = slack + ap;
                let take = match blocking {
                    None => ratio < alpha || (ratio == alpha && ratio < 1.0),
                    Some((_, bfull)) => {
                        ratio < alpha || (ratio == alpha && !bland && full < bfull)
                    }
                };
                if take {
                    alpha = ratio;
                    blocking = Some((i, full));
                }
            }
            if blocking.is_none() && damped && pnorm > 1e8 * xnorm {
                return Err(QpError::Unbounded);
            }
            for (xi, pi) in x.iter_mut().zip(&p) {
                *xi += alpha * pi;
            }
            if let Some((i, _)) = blocking {
                working.push(i);
                in_working[i] = true;
            }
            if record {
                history.push(self.objective(&x));
            }
        }
        Err(QpError::IterationLimit(max_iter))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn identity(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn unconstrained_minimum() {
        let qp = ConvexQp::from_rows(&identity(3), vec![0.0; 3], &[], vec![]).unwrap();
        let sol = solve_qp(&qp, 1e-10).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_eq!(sol.x, vec![0.0; 3]);
    }

    #[test]
    fn two_constraint_regression_repair() {
        // b² + (w + b − 1)² with x = (w, b): Q = 2[[1,1],[1,2]], q = −2(1, 1).
        let q = vec![vec![2.0, 2.0], vec![2.0, 4.0]];
        let rows = vec![vec![0.0, 1.0], vec![1.0, 1.0]];
        let qp = ConvexQp::from_rows(&q, vec![-2.0, -2.0], &rows, vec![0.51, 0.51]).unwrap();
        let sol = solve_qp(&qp, 1e-10).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 0.49, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.x[1], 0.51, epsilon = 1e-10);
        assert!(check_kkt(&qp, &sol, 1e-8));
    }

    #[test]
    fn contradictory_halflines_are_infeasible() {
        let qp = ConvexQp::from_rows(&identity(1), vec![0.0], &[vec![1.0], vec![-1.0]], vec![1.0, 0.0])
            .unwrap();
        let sol = solve_qp(&qp, 1e-9).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
        assert_abs_diff_eq!(sol.phase1_violation, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn check_kkt_detects_broken_solutions() {
        let qp = ConvexQp::from_rows(&identity(2), vec![0.0, 0.0], &[vec![1.0, 0.0]], vec![1.0])
            .unwrap();
        let sol = solve_qp(&qp, 1e-10).unwrap();
        assert!(check_kkt(&qp, &sol, 1e-8));

        let mut moved = sol.clone();
        moved.x[0] -= 1e-3;
        assert!(!check_kkt(&qp, &moved, 1e-8));

        let mut no_mult = sol.clone();
        no_mult.multipliers = vec![0.0];
        assert!(!check_kkt(&qp, &no_mult, 1e-8));
    }

    #[test]
    fn semidefinite_hessian_uses_damped_steps() {
        // Linear objective in x1: minimise x1 + x0² subject to x1 ≥ 2, x0 + x1 ≥ 3.
        let q = vec![vec![2.0, 0.0], vec![0.0, 0.0]];
        let rows = vec![vec![0.0, 1.0], vec![1.0, 1.0]];
        let qp = ConvexQp::from_rows(&q, vec![0.0, 1.0], &rows, vec![2.0, 3.0]).unwrap();
        let sol = solve_qp(&qp, 1e-10).unwrap();
        // Optimum of x0² + (3 − x0) on x0 ≤ 1 is x0 = 0.5.
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.x[1], 2.5, epsilon = 1e-8);
        assert!(check_kkt(&qp, &sol, 1e-8));
    }

    #[test]
    fn unbounded_linear_direction_is_reported() {
        let q = vec![vec![0.0]];
        let qp = ConvexQp::from_rows(&q, vec![1.0], &[vec![-1.0]], vec![-5.0]).unwrap();
        assert_eq!(solve_qp(&qp, 1e-9), Err(QpError::Unbounded));
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let q = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
        assert!(matches!(
            ConvexQp::from_rows(&q, vec![0.0, 0.0], &[], vec![]),
            Err(QpError::NotPsd(_))
        ));
    }

    #[test]
    fn duplicate_and_redundant_constraints() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
        let qp = ConvexQp::from_rows(&identity(2), vec![0.0, 0.0], &rows, vec![1.0, 1.0, 2.0, -4.0])
            .unwrap();
        let sol = solve_qp(&qp, 1e-10).unwrap();
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[1], 0.0, epsilon = 1e-12);
        assert!(check_kkt(&qp, &sol, 1e-8));
    }
}
