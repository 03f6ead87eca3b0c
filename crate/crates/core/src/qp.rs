//! Dense strictly convex QP solver and its implicit (KKT) derivative.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    ½ uᵀHu + fᵀu
//!     subject to  G u ≤ b
//! ```
//!
//! and are tiny (a handful of variables and constraints), so every step solves
//! the working-set KKT system directly. The solver is a dual active-set method
//! in the Goldfarb-Idnani family: it starts from the unconstrained minimizer
//! and adds violated constraints one at a time, dropping any whose multiplier
//! would turn negative. It needs no feasible starting point and reports
//! infeasibility instead of failing.

use thiserror::Error;

use crate::autodiff::{AutodiffError, CustomOp};
use crate::linalg::{dot, Mat};
use crate::scalar::Real;

/// Multiplier threshold above which a constraint counts as active.
pub const ACTIVITY_TOL: f64 = 1e-7;

/// Default slack weight of the training-time filter.
pub const DEFAULT_ZETA: f64 = 1000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cost matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("backward requires an optimal solution, got {0:?}")]
    NotOptimal(QpStatus),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpProblem<T> {
    h: Mat<T>,
    f: Vec<T>,
    g: Mat<T>,
    b: Vec<T>,
    chol: Mat<T>,
}

impl<T: Real> QpProblem<T> {
    pub fn new(h: Mat<T>, f: Vec<T>, g: Mat<T>, b: Vec<T>) -> Result<Self, QpError> {
        let n = f.len();
        if h.shape() != (n, n) {
            return Err(QpError::Dimension(format!("H is {:?}, expected {n}x{n}", h.shape())));
        }
        if g.cols() != n && g.rows() > 0 {
            return Err(QpError::Dimension(format!("G has {} columns, expected {n}", g.cols())));
        }
        if g.rows() != b.len() {
            return Err(QpError::Dimension(format!("G has {} rows but b has {}", g.rows(), b.len())));
        }
        let asym = h.sub(&h.transpose()).max_abs();
        if asym > h.max_abs() * T::lit(1e-12) {
            return Err(QpError::NotPositiveDefinite);
        }
        let chol = h.cholesky().ok_or(QpError::NotPositiveDefinite)?;
        let g = if g.rows() == 0 { Mat::zeros(0, n) } else { g };
        Ok(Self { h, f, g, b, chol })
    }

    pub fn n_vars(&self) -> usize {
        self.f.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.b.len()
    }

    pub fn h(&self) -> &Mat<T> {
        &self.h
    }

    pub fn f(&self) -> &[T] {
        &self.f
    }

    pub fn g(&self) -> &Mat<T> {
        &self.g
    }

    pub fn b(&self) -> &[T] {
        &self.b
    }

    pub fn with_b(&self, b: Vec<T>) -> Self {
        assert_eq!(b.len(), self.b.len());
        Self { b, ..self.clone() }
    }

    pub fn with_f(&self, f: Vec<T>) -> Self {
        assert_eq!(f.len(), self.f.len());
        Self { f, ..self.clone() }
    }

    fn unconstrained_min(&self) -> Vec<T> {
        // H x = -f via the Cholesky factor.
        let n = self.n_vars();
        let l = &self.chol;
        let mut y = vec![T::zero(); n];
        for i in 0..n {
            let mut s = -self.f[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        y
    }

    /// Solves the working-set KKT system
    /// `[H N_Aᵀ; N_A 0] [x; y] = [top; bottom]`.
    fn kkt_solve(&self, working: &[usize], top: &[T], bottom: &[T]) -> Option<(Vec<T>, Vec<T>)> {
        let n = self.n_vars();
        let k = working.len();
        let mut kkt = Mat::zeros(n + k, n + k);
        kkt.set_block(0, 0, &self.h);
        for (c, &w) in working.iter().enumerate() {
            for j in 0..n {
                let v = self.g[(w, j)];
                kkt[(j, n + c)] = v;
                kkt[(n + c, j)] = v;
            }
        }
        let mut rhs = top.to_vec();
        rhs.extend_from_slice(bottom);
        let sol = kkt.solve(&rhs)?;
        Some((sol[..n].to_vec(), sol[n..].to_vec()))
    }

    fn violation(&self, i: usize, x: &[T]) -> T {
        dot(self.g.row(i), x) - self.b[i]
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution<T> {
    pub u: Vec<T>,
    pub lambda: Vec<T>,
    /// Constraints with multiplier above [`ACTIVITY_TOL`].
    pub active_set: Vec<usize>,
    pub status: QpStatus,
    pub iterations: usize,
}

impl<T: Real> QpSolution<T> {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    /// Largest of the stationarity, primal feasibility and complementarity
    /// residuals.
    pub fn kkt_residual(&self, prob: &QpProblem<T>) -> T {
        let mut station = prob.h.matvec(&self.u);
        for (s, &f) in station.iter_mut().zip(&prob.f) {
            *s += f;
        }
        let gl = prob.g.tmatvec(&self.lambda);
        let stat = station.iter().zip(&gl).map(|(&a, &b)| (a + b) * (a + b)).sum::<T>().sqrt();
        let mut worst = stat;
        for i in 0..prob.n_constraints() {
            let v = prob.violation(i, &self.u);
            worst = worst.max(v).max((self.lambda[i] * v).abs()).max(-self.lambda[i]);
        }
        worst
    }
}

/// Solves `prob`; never panics on infeasible input.
pub fn solve<T: Real>(prob: &QpProblem<T>) -> QpSolution<T> {
    let n = prob.n_vars();
    let m = prob.n_constraints();
    let eps = T::epsilon().powf(T::lit(0.75));
    let max_iter = 10 * (n + m) + 50;

    let mut x = prob.unconstrained_min();
    let mut lambda = vec![T::zero(); m];
    let mut working: Vec<usize> = Vec::new();
    let mut iterations = 0;

    let tol_for = |i: usize, x: &[T]| {
        let gnorm = dot(prob.g.row(i), prob.g.row(i)).sqrt();
        let xnorm = dot(x, x).sqrt();
        eps * (T::one() + prob.b[i].abs() + gnorm * xnorm)
    };

    let status = 'outer: loop {
        // Most violated constraint not in the working set.
        let mut pick: Option<(usize, T)> = None;
        for i in 0..m {
            if working.contains(&i) {
                continue;
            }
            let v = prob.violation(i, &x);
            if v > tol_for(i, &x) && pick.is_none_or(|(_, best)| v > best) {
                pick = Some((i, v));
            }
        }
        let Some((p, _)) = pick else {
            break QpStatus::Optimal;
        };

        loop {
            iterations += 1;
            if iterations > max_iter {
                break 'outer QpStatus::MaxIter;
            }
            let np: Vec<T> = prob.g.row(p).iter().map(|&v| -v).collect();
            let zeros = vec![T::zero(); working.len()];
            let Some((z, r)) = prob.kkt_solve(&working, &np, &zeros) else {
                break 'outer QpStatus::MaxIter;
            };
            let nz = dot(prob.g.row(p), &z);
            let znorm = dot(&z, &z).sqrt();
            let gnorm = dot(prob.g.row(p), prob.g.row(p)).sqrt();

            // Partial step: first working constraint whose multiplier hits zero.
            let mut t1 = T::infinity();
            let mut drop_at = None;
            for (c, &rc) in r.iter().enumerate() {
                if rc < T::zero() {
                    let t = -lambda[working[c]] / rc;
                    if t < t1 {
                        t1 = t;
                        drop_at = Some(c);
                    }
                }
            }
            // Full step: constraint p becomes tight.
            let s = prob.violation(p, &x);
            let t2 = if znorm > eps * gnorm.max(T::one()) && nz < T::zero() { s / -nz } else { T::infinity() };

            if t1.is_infinite() && t2.is_infinite() {
                break 'outer QpStatus::Infeasible;
            }
            let t = t1.min(t2);
            for (xi, &zi) in x.iter_mut().zip(&z) {
                *xi += t * zi;
            }
            for (c, &rc) in r.iter().enumerate() {
                lambda[working[c]] += t * rc;
            }
            lambda[p] += t;

            if t2 <= t1 {
                working.push(p);
                continue 'outer;
            }
            let c = drop_at.expect("finite partial step has a blocking constraint");
            lambda[working[c]] = T::zero();
            working.remove(c);
        }
    };

    if status == QpStatus::Optimal {
        // Polish on the final working set.
        let bw: Vec<T> = working.iter().map(|&w| prob.b[w]).collect();
        let negf: Vec<T> = prob.f.iter().map(|&v| -v).collect();
        if let Some((xs, ls)) = prob.kkt_solve(&working, &negf, &bw) {
            if ls.iter().all(|&l| l >= -eps) {
                x = xs;
                for (c, &w) in working.iter().enumerate() {
                    lambda[w] = ls[c].max(T::zero());
                }
            }
        }
    }

    let act = T::lit(ACTIVITY_TOL);
    let active_set = (0..m).filter(|&i| lambda[i] > act).collect();
    QpSolution {
        u: x,
        lambda,
        active_set,
        status,
        iterations,
    }
}

/// Vector-Jacobian products of the solution map `(H, f, G, b) ↦ u*`.
#[derive(Debug, Clone)]
pub struct QpGradients<T> {
    pub df: Vec<T>,
    pub db: Vec<T>,
    pub dg: Mat<T>,
    pub dh: Mat<T>,
    /// Set when the active-set KKT matrix was singular and a regularized
    /// least-squares solve was used instead.
    pub degenerate: bool,
}

/// Differentiates `u*` through the KKT conditions linearized on the active
/// set. Inactive and weakly active constraints (multiplier at or below
/// [`ACTIVITY_TOL`]) contribute nothing.
pub fn backward<T: Real>(prob: &QpProblem<T>, sol: &QpSolution<T>, gbar_u: &[T]) -> Result<QpGradients<T>, QpError> {
    if sol.status != QpStatus::Optimal {
        return Err(QpError::NotOptimal(sol.status));
    }
    let n = prob.n_vars();
    let m = prob.n_constraints();
    if gbar_u.len() != n {
        return Err(QpError::Dimension(format!("upstream gradient has {} entries, expected {n}", gbar_u.len())));
    }
    let act = &sol.active_set;
    let zeros = vec![T::zero(); act.len()];
    let (dz, dl, degenerate) = match prob.kkt_solve(act, gbar_u, &zeros) {
        Some((dz, dl)) => (dz, dl, false),
        None => {
            let k = act.len();
            let mut kkt = Mat::zeros(n + k, n + k);
            kkt.set_block(0, 0, &prob.h);
            for (c, &w) in act.iter().enumerate() {
                for j in 0..n {
                    kkt[(j, n + c)] = prob.g[(w, j)];
                    kkt[(n + c, j)] = prob.g[(w, j)];
                }
            }
            let mut rhs = gbar_u.to_vec();
            rhs.extend_from_slice(&zeros);
            let s = kkt.lstsq(&rhs);
            log::debug!("degenerate active-set KKT system; used least squares");
            (s[..n].to_vec(), s[n..].to_vec(), true)
        }
    };

    let df: Vec<T> = dz.iter().map(|&v| -v).collect();
    let mut db = vec![T::zero(); m];
    let mut dg = Mat::zeros(m, n);
    for (c, &w) in act.iter().enumerate() {
        db[w] = dl[c];
        for j in 0..n {
            dg[(w, j)] = -(sol.lambda[w] * dz[j] + dl[c] * sol.u[j]);
        }
    }
    let half = T::lit(0.5);
    let dh = Mat::from_fn(n, n, |i, j| -half * (dz[i] * sol.u[j] + sol.u[i] * dz[j]));
    Ok(QpGradients { df, db, dg, dh, degenerate })
}

/// One barrier constraint in control space: `a·u + rhs ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyRow<T> {
    pub a: Vec<T>,
    pub rhs: T,
}

/// Builds the minimal-intervention filter QP.
///
/// With slack the variables are `(u, s_1..s_k)`, the cost is
/// `‖u − u_perf‖² + ζ Σ s_j²` and the constraints are `a_j·u + rhs_j + s_j ≥ 0`
/// and `s_j ≥ 0`. Without slack only `a_j·u + rhs_j ≥ 0` remains.
pub fn assemble_safety_qp<T: Real>(u_perf: &[T], rows: &[SafetyRow<T>], zeta: T, use_slack: bool) -> Result<QpProblem<T>, QpError> {
    let m = u_perf.len();
    let k = rows.len();
    if let Some(r) = rows.iter().find(|r| r.a.len() != m) {
        return Err(QpError::Dimension(format!("constraint row has {} entries, expected {m}", r.a.len())));
    }
    let two = T::lit(2.0);
    let nv = if use_slack { m + k } else { m };
    let mut h = Mat::zeros(nv, nv);
    let mut f = vec![T::zero(); nv];
    for i in 0..m {
        h[(i, i)] = two;
        f[i] = -two * u_perf[i];
    }
    let nc = if use_slack { 2 * k } else { k };
    let mut g = Mat::zeros(nc, nv);
    let mut b = vec![T::zero(); nc];
    for (j, row) in rows.iter().enumerate() {
        for i in 0..m {
            g[(j, i)] = -row.a[i];
        }
        b[j] = row.rhs;
        if use_slack {
            h[(m + j, m + j)] = two * zeta;
            g[(j, m + j)] = -T::one();
            g[(k + j, m + j)] = -T::one();
        }
    }
    QpProblem::new(h, f, g, b)
}

/// Outcome of one safety-filter solve, including the fallback bookkeeping.
#[derive(Debug, Clone)]
pub struct SafetyQpOutcome<T> {
    pub problem: QpProblem<T>,
    pub solution: QpSolution<T>,
    pub n_controls: usize,
    pub n_rows: usize,
    /// Whether the solved problem carries slack variables.
    pub slack: bool,
    /// The slack-free problem was infeasible and the slack fallback was used.
    pub fallback_used: bool,
}

impl<T: Real> SafetyQpOutcome<T> {
    pub fn control(&self) -> &[T] {
        &self.solution.u[..self.n_controls]
    }

    /// Slack values, zeros when the problem has none.
    pub fn slacks(&self) -> Vec<T> {
        if self.slack {
            self.solution.u[self.n_controls..].to_vec()
        } else {
            vec![T::zero(); self.n_rows]
        }
    }

    /// `[u; s]` with `s` zero-filled when the problem has no slack.
    pub fn output(&self) -> Vec<T> {
        let mut out = self.control().to_vec();
        out.extend(self.slacks());
        out
    }
}

/// Solves the filter QP. When `use_slack` is false and the problem is
/// infeasible, re-solves with slack at `fallback_zeta` if one is given.
pub fn solve_safety_qp<T: Real>(u_perf: &[T], rows: &[SafetyRow<T>], zeta: T, use_slack: bool, fallback_zeta: Option<T>) -> Result<SafetyQpOutcome<T>, QpError> {
    let problem = assemble_safety_qp(u_perf, rows, zeta, use_slack)?;
    let mut solution = solve(&problem);
    if solution.is_optimal() && solution.lambda.iter().all(|&l| l == T::zero()) {
        // No constraint entered the working set: the minimizer is the
        // reference itself (with zero slack), without solver round-off.
        solution.u[..u_perf.len()].copy_from_slice(u_perf);
    }
    let mut outcome = SafetyQpOutcome {
        problem,
        solution,
        n_controls: u_perf.len(),
        n_rows: rows.len(),
        slack: use_slack,
        fallback_used: false,
    };
    if !outcome.solution.is_optimal() && !use_slack {
        if let Some(fz) = fallback_zeta {
            let problem = assemble_safety_qp(u_perf, rows, fz, true)?;
            let solution = solve(&problem);
            outcome = SafetyQpOutcome {
                problem,
                solution,
                slack: true,
                fallback_used: true,
                ..outcome
            };
        }
    }
    Ok(outcome)
}

/// The filter QP as a tape operation.
///
/// Inputs are `[u_perf, a_1, rhs_1, …, a_k, rhs_k]` (vectors of length m and
/// scalars); the output is `[u; s]` of length `m + k`. The solve happens in
/// [`solve_safety_qp`]; this op carries its outcome and differentiates it.
pub struct SafetyQpLayer<T> {
    outcome: SafetyQpOutcome<T>,
}

impl<T: Real> SafetyQpLayer<T> {
    pub fn new(outcome: SafetyQpOutcome<T>) -> Self {
        Self { outcome }
    }
}

impl<T: Real> CustomOp<T> for SafetyQpLayer<T> {
    fn name(&self) -> &str {
        "safety_qp"
    }

    fn forward(&mut self, inputs: &[&Mat<T>]) -> Result<Mat<T>, AutodiffError> {
        let o = &self.outcome;
        if inputs.len() != 1 + 2 * o.n_rows || inputs[0].len() != o.n_controls {
            return Err(AutodiffError::Custom {
                name: "safety_qp".into(),
                reason: format!("expected u_perf plus {} (row, rhs) pairs", o.n_rows),
            });
        }
        if !o.solution.is_optimal() {
            return Err(AutodiffError::Custom {
                name: "safety_qp".into(),
                reason: format!("QP status {:?}", o.solution.status),
            });
        }
        Ok(Mat::column(o.output()))
    }

    fn backward(&self, inputs: &[&Mat<T>], _output: &Mat<T>, upstream: &Mat<T>) -> Result<Vec<Mat<T>>, AutodiffError> {
        let o = &self.outcome;
        let (m, k) = (o.n_controls, o.n_rows);
        let nv = o.problem.n_vars();
        // Upstream covers [u; s]; slack entries only exist in the slack problem.
        let gbar: Vec<T> = upstream.as_slice()[..nv].to_vec();
        let grads = backward(&o.problem, &o.solution, &gbar).map_err(|e| AutodiffError::Custom {
            name: "safety_qp".into(),
            reason: e.to_string(),
        })?;
        let two = T::lit(2.0);
        let mut out = Vec::with_capacity(inputs.len());
        out.push(Mat::column(grads.df[..m].iter().map(|&d| -two * d).collect()));
        for j in 0..k {
            out.push(Mat::column((0..m).map(|i| -grads.dg[(j, i)]).collect()));
            out.push(Mat::scalar(grads.db[j]));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_qp(target: f64, lower: Option<f64>) -> QpProblem<f64> {
        // (u - target)² = u² - 2 target u + const
        let (g, b) = match lower {
            Some(l) => (Mat::from_rows(&[vec![-1.0]]), vec![-l]),
            None => (Mat::zeros(0, 1), vec![]),
        };
        QpProblem::new(Mat::scalar(2.0), vec![-2.0 * target], g, b).unwrap()
    }

    #[test]
    fn unconstrained_scalar() {
        let sol = solve(&scalar_qp(2.0, None));
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.u[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_lower_bound_hand_kkt() {
        let p = scalar_qp(2.0, Some(3.0));
        let sol = solve(&p);
        assert!((sol.u[0] - 3.0).abs() < 1e-12);
        assert!((sol.lambda[0] - 2.0).abs() < 1e-12);
        assert_eq!(sol.active_set, vec![0]);
        assert!(sol.kkt_residual(&p) < 1e-12);
    }

    #[test]
    fn halfspace_projection() {
        // min ‖u‖² s.t. u1 + u2 ≥ 2
        let p = QpProblem::<f64>::new(Mat::identity(2).scale(2.0), vec![0.0, 0.0], Mat::from_rows(&[vec![-1.0, -1.0]]), vec![-2.0]).unwrap();
        let sol = solve(&p);
        assert!((sol.u[0] - 1.0).abs() < 1e-12 && (sol.u[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_reported() {
        // u ≥ 1 and u ≤ 0
        let p = QpProblem::new(Mat::scalar(2.0), vec![0.0], Mat::from_rows(&[vec![-1.0], vec![1.0]]), vec![-1.0, 0.0]).unwrap();
        assert_eq!(solve(&p).status, QpStatus::Infeasible);
        let zero_row = QpProblem::new(Mat::scalar(2.0), vec![0.0], Mat::from_rows(&[vec![0.0]]), vec![-1.0]).unwrap();
        assert_eq!(solve(&zero_row).status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_indefinite_cost() {
        let err = QpProblem::new(Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]), vec![0.0, 0.0], Mat::zeros(0, 2), vec![]);
        assert_eq!(err.unwrap_err(), QpError::NotPositiveDefinite);
    }

    #[test]
    fn backward_active_and_inactive() {
        let p = scalar_qp(2.0, Some(3.0));
        let sol = solve(&p);
        let g = backward(&p, &sol, &[1.0]).unwrap();
        // b stores -lower, so du/dlower = -db.
        assert!((-g.db[0] - 1.0).abs() < 1e-12);
        assert!(g.df[0].abs() < 1e-12);

        let p = scalar_qp(2.0, Some(1.0));
        let sol = solve(&p);
        assert!(sol.active_set.is_empty());
        let g = backward(&p, &sol, &[1.0]).unwrap();
        assert_eq!(g.db[0], 0.0);
    }

    #[test]
    fn backward_requires_optimal() {
        let p = QpProblem::new(Mat::scalar(2.0), vec![0.0], Mat::from_rows(&[vec![-1.0], vec![1.0]]), vec![-1.0, 0.0]).unwrap();
        let sol = solve(&p);
        assert!(matches!(backward(&p, &sol, &[1.0]), Err(QpError::NotOptimal(QpStatus::Infeasible))));
    }

    #[test]
    fn safety_qp_without_rows_returns_reference() {
        let out = solve_safety_qp(&[0.3, -0.7], &[], 1000.0, true, None).unwrap();
        assert_eq!(out.control(), &[0.3, -0.7]);
    }

    #[test]
    fn satisfied_row_leaves_reference_untouched() {
        let rows = [SafetyRow { a: vec![1.0, 0.0], rhs: 5.0 }];
        let out = solve_safety_qp::<f64>(&[0.3, -0.7], &rows, 1000.0, true, None).unwrap();
        assert!((out.control()[0] - 0.3).abs() < 1e-12 && (out.control()[1] + 0.7).abs() < 1e-12);
        assert!(out.slacks()[0].abs() < 1e-12);
    }

    #[test]
    fn slack_two_variable_hand_kkt() {
        // min (u+1)² + 1000 s² s.t. u + s ≥ 0, s ≥ 0 → s = 2/2002, u = -s.
        let rows = [SafetyRow { a: vec![1.0], rhs: 0.0 }];
        let out = solve_safety_qp::<f64>(&[-1.0], &rows, 1000.0, true, None).unwrap();
        let s = 2.0 / 2002.0;
        assert!((out.slacks()[0] - s).abs() < 1e-12);
        assert!((out.control()[0] + s).abs() < 1e-12);
    }

    #[test]
    fn fallback_marks_outcome() {
        let rows = [SafetyRow { a: vec![1.0], rhs: -1.0 }, SafetyRow { a: vec![-1.0], rhs: 0.0 }];
        let out = solve_safety_qp(&[0.0], &rows, 1000.0, false, Some(1e6)).unwrap();
        assert!(out.fallback_used && out.slack);
        assert!(out.solution.is_optimal());
        let none = solve_safety_qp(&[0.0], &rows, 1000.0, false, None).unwrap();
        assert_eq!(none.solution.status, QpStatus::Infeasible);
    }
}
