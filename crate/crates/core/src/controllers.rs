//! LQR performance controller and the barrier safety filters that wrap it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NodeId, Tape};
use crate::barrier::{poles_to_kalpha, v_sequence, EcbfCascade};
use crate::dynamics::{LinearCtrlAffineSystem, Policy, PolicyError, PolicyStep};
use crate::linalg::Mat;
use crate::qp::{solve_safety_qp, SafetyQpLayer, SafetyRow};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("{0} weight must be symmetric positive (semi)definite")]
    Weight(&'static str),
    #[error("Riccati solve did not converge (residual {residual:e})")]
    Riccati { residual: f64 },
    #[error("closed loop is not Hurwitz (max real part {max_real})")]
    NotHurwitz { max_real: f64 },
    #[error("poles invalid for the barrier at the initial state: {0}")]
    InvalidPoles(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Stabilizing solution of the continuous-time algebraic Riccati equation
/// `AᵀP + PA − PBR⁻¹BᵀP + Q = 0`.
///
/// The matrix sign function of the Hamiltonian gives a first estimate of `P`,
/// which a few Newton (Kleinman) steps then polish to full precision.
pub fn care<T: Real>(a: &Mat<T>, b: &Mat<T>, qw: &Mat<T>, rw: &Mat<T>) -> Result<Mat<T>, ControllerError> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n || qw.shape() != (n, n) || rw.shape() != (b.cols(), b.cols()) {
        return Err(ControllerError::Dimension("care inputs".into()));
    }
    if rw.cholesky().is_none() {
        return Err(ControllerError::Weight("control"));
    }
    let rinv = rw.inverse().ok_or(ControllerError::Weight("control"))?;
    let g = b.matmul(&rinv).matmul(&b.transpose());

    let mut ham = Mat::zeros(2 * n, 2 * n);
    ham.set_block(0, 0, a);
    ham.set_block(0, n, &g.scale(-T::one()));
    ham.set_block(n, 0, &qw.scale(-T::one()));
    ham.set_block(n, n, &a.transpose().scale(-T::one()));

    let half = T::lit(0.5);
    let mut z = ham;
    let mut converged = false;
    for _ in 0..100 {
        let zinv = z.inverse().ok_or(ControllerError::Riccati { residual: f64::INFINITY })?;
        let next = z.add(&zinv).scale(half);
        let delta = next.sub(&z).max_abs();
        z = next;
        if delta <= T::lit(1e-12) * z.max_abs().max(T::one()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(ControllerError::Riccati { residual: f64::INFINITY });
    }
    let eye = Mat::identity(n);
    let mut lhs = Mat::zeros(2 * n, n);
    lhs.set_block(0, 0, &z.block(0, n, n, n));
    lhs.set_block(n, 0, &z.block(n, n, n, n).add(&eye));
    let mut rhs = Mat::zeros(2 * n, n);
    rhs.set_block(0, 0, &z.block(0, 0, n, n).add(&eye).scale(-T::one()));
    rhs.set_block(n, 0, &z.block(n, 0, n, n).scale(-T::one()));
    let mut p = Mat::zeros(n, n);
    for j in 0..n {
        let col: Vec<T> = (0..2 * n).map(|i| rhs[(i, j)]).collect();
        let x = lhs.lstsq(&col);
        for i in 0..n {
            p[(i, j)] = x[i];
        }
    }
    p = p.symmetrized();

    for _ in 0..4 {
        let k = rinv.matmul(&b.transpose()).matmul(&p);
        let ac = a.sub(&b.matmul(&k));
        let rhs = qw.add(&k.transpose().matmul(rw).matmul(&k));
        match lyapunov(&ac, &rhs) {
            Some(next) => p = next.symmetrized(),
            None => break,
        }
    }

    let residual = a.transpose().matmul(&p).add(&p.matmul(a)).sub(&p.matmul(&g).matmul(&p)).add(qw).max_abs();
    let scale = qw.max_abs().max(p.max_abs()).max(T::one());
    if !(residual <= T::lit(1e-9) * scale) {
        return Err(ControllerError::Riccati { residual: residual.as_f64() });
    }
    Ok(p)
}

/// Solves `AᵀX + XA + M = 0` through its Kronecker form.
fn lyapunov<T: Real>(a: &Mat<T>, m: &Mat<T>) -> Option<Mat<T>> {
    let n = a.rows();
    let mut big = Mat::zeros(n * n, n * n);
    // vec index (i, j) -> i * n + j; (AᵀX)_{ij} = Σ_k A_{ki} X_{kj}, (XA)_{ij} = Σ_k X_{ik} A_{kj}
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            for k in 0..n {
                big[(row, k * n + j)] += a[(k, i)];
                big[(row, i * n + k)] += a[(k, j)];
            }
        }
    }
    let rhs: Vec<T> = m.as_slice().iter().map(|&v| -v).collect();
    let x = big.solve(&rhs)?;
    Some(Mat::from_vec(n, n, x))
}

/// LQR gain `K = R⁻¹BᵀP`; `A − BK` is verified Hurwitz.
pub fn lqr_gain<T: Real>(sys: &LinearCtrlAffineSystem<T>, qw: &Mat<T>, rw: &Mat<T>) -> Result<Mat<T>, ControllerError> {
    let p = care(sys.a(), sys.b(), qw, rw)?;
    let rinv = rw.inverse().ok_or(ControllerError::Weight("control"))?;
    let k = rinv.matmul(&sys.b().transpose()).matmul(&p);
    let max_real = max_real_eigenvalue(&sys.a().sub(&sys.b().matmul(&k)));
    if !(max_real < 0.0) {
        return Err(ControllerError::NotHurwitz { max_real });
    }
    Ok(k)
}

pub fn max_real_eigenvalue<T: Real>(m: &Mat<T>) -> f64 {
    m.eigenvalues().iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max)
}

pub fn spectral_radius<T: Real>(m: &Mat<T>) -> f64 {
    m.eigenvalues().iter().map(|e| e.0.hypot(e.1)).fold(0.0, f64::max)
}

/// `u = −K(x − x_goal)`
#[derive(Debug, Clone)]
pub struct LqrController<T> {
    k: Mat<T>,
    x_goal: Vec<T>,
}

impl<T: Real> LqrController<T> {
    pub fn new(k: Mat<T>, x_goal: Vec<T>) -> Self {
        assert_eq!(k.cols(), x_goal.len(), "gain and goal dimensions differ");
        Self { k, x_goal }
    }

    /// Identity-weighted LQR driving `sys` to `x_goal`.
    pub fn identity_weights(sys: &LinearCtrlAffineSystem<T>, x_goal: Vec<T>) -> Result<Self, ControllerError> {
        let k = lqr_gain(sys, &Mat::identity(sys.n()), &Mat::identity(sys.m()))?;
        Ok(Self::new(k, x_goal))
    }

    pub fn gain(&self) -> &Mat<T> {
        &self.k
    }

    pub fn goal(&self) -> &[T] {
        &self.x_goal
    }

    pub fn u_perf(&self, x: &[T]) -> Vec<T> {
        let d = crate::linalg::sub(x, &self.x_goal);
        self.k.matvec(&d).into_iter().map(|v| -v).collect()
    }

    pub fn u_perf_node(&self, tape: &mut Tape<T>, nodes: LqrNodes, x: NodeId) -> Result<NodeId, PolicyError> {
        let d = tape.sub(x, nodes.goal)?;
        let kd = tape.matvec(nodes.k, d)?;
        Ok(tape.neg(kd))
    }

    pub fn nodes(&self, tape: &mut Tape<T>) -> LqrNodes {
        LqrNodes {
            k: tape.constant(self.k.clone()),
            goal: tape.constant_vec(self.x_goal.clone()),
        }
    }

    /// Spectral radius of the Euler-discretized closed loop `I + dt(A − BK)`.
    pub fn discrete_spectral_radius(&self, sys: &LinearCtrlAffineSystem<T>, dt: T) -> f64 {
        let acl = sys.a().sub(&sys.b().matmul(&self.k));
        spectral_radius(&Mat::identity(sys.n()).add(&acl.scale(dt)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LqrNodes {
    pub k: NodeId,
    pub goal: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Relative-degree-one CBF-QP with a linear class-K function.
    CbfQp,
    /// ECBF-QP with fixed poles.
    EcbfFixed,
    /// ECBF-QP with poles from the alpha-net.
    EcbfLearned,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlackMode<T> {
    On {
        zeta: T,
    },
    /// Hard constraints; an infeasible step re-solves with slack at
    /// `fallback_zeta` when set.
    Off {
        fallback_zeta: Option<T>,
    },
}

impl<T: Real> SlackMode<T> {
    pub fn training() -> Self {
        SlackMode::On {
            zeta: T::lit(crate::qp::DEFAULT_ZETA),
        }
    }

    pub fn test_time() -> Self {
        SlackMode::Off { fallback_zeta: Some(T::lit(1e6)) }
    }

    pub fn is_on(&self) -> bool {
        matches!(self, SlackMode::On { .. })
    }
}

/// Checks the two validity conditions on ECBF poles at `x0`: every pole is
/// positive and `p_i ≥ −v̇_{i−1}(x0) / v_{i−1}(x0)` with `v_{i−1}(x0) > 0`.
pub fn poles_valid_at<T: Real>(cascade: &EcbfCascade<T>, poles: &[T], x0: &[T]) -> Result<(), String> {
    if poles.len() != cascade.order() {
        return Err(format!("{} poles for relative degree {}", poles.len(), cascade.order()));
    }
    let (v, vdot) = v_sequence(cascade, &poles[..poles.len() - 1], x0);
    for (i, &p) in poles.iter().enumerate() {
        if !(p > T::zero()) {
            return Err(format!("pole {} is not positive ({p})", i + 1));
        }
        if !(v[i] > T::zero()) {
            return Err(format!("v_{i}(x0) = {} is not positive", v[i]));
        }
        let bound = -vdot[i] / v[i];
        if p < bound {
            return Err(format!("pole {} = {p} below bound {bound}", i + 1));
        }
    }
    Ok(())
}

struct BarrierTerms<T> {
    cascade: EcbfCascade<T>,
    kalpha: NodeId,
    lg_m: NodeId,
    lg_c: NodeId,
}

/// Minimal-intervention QP filter with one ECBF row per obstacle. All rows
/// live on the rollout tape, so the filtered control is differentiable in the
/// `K_α` nodes.
pub struct SafetyFilter<T> {
    barriers: Vec<BarrierTerms<T>>,
    slack: SlackMode<T>,
    mode: FilterMode,
}

impl<T: Real> SafetyFilter<T> {
    /// `kalpha[j]` is the `K_α` node (length r) for obstacle `j`.
    pub fn new(tape: &mut Tape<T>, cascades: Vec<EcbfCascade<T>>, kalpha: Vec<NodeId>, slack: SlackMode<T>, mode: FilterMode) -> Result<Self, ControllerError> {
        if cascades.len() != kalpha.len() {
            return Err(ControllerError::Dimension(format!("{} barriers but {} gain vectors", cascades.len(), kalpha.len())));
        }
        let mut barriers = Vec::with_capacity(cascades.len());
        for (cascade, k) in cascades.into_iter().zip(kalpha) {
            if tape.value(k).len() != cascade.order() {
                return Err(ControllerError::Dimension(format!("K_alpha has {} entries, relative degree {}", tape.value(k).len(), cascade.order())));
            }
            let (m, c) = cascade.lg_affine();
            let lg_m = tape.constant(m);
            let lg_c = tape.constant_vec(c);
            barriers.push(BarrierTerms { cascade, kalpha: k, lg_m, lg_c });
        }
        Ok(Self { barriers, slack, mode })
    }

    /// Fixed-pole ECBF filter; the poles must be valid at `x0`.
    pub fn fixed(tape: &mut Tape<T>, cascades: Vec<EcbfCascade<T>>, poles: &[Vec<T>], x0: &[T], slack: SlackMode<T>) -> Result<Self, ControllerError> {
        let mut kalpha = Vec::with_capacity(poles.len());
        for (c, p) in cascades.iter().zip(poles) {
            poles_valid_at(c, p, x0).map_err(ControllerError::InvalidPoles)?;
            kalpha.push(tape.constant_vec(poles_to_kalpha(p)));
        }
        Self::new(tape, cascades, kalpha, slack, FilterMode::EcbfFixed)
    }

    /// Relative-degree-one CBF-QP with `α(h) = gain · h`.
    pub fn cbf(tape: &mut Tape<T>, cascades: Vec<EcbfCascade<T>>, gain: T, slack: SlackMode<T>) -> Result<Self, ControllerError> {
        if cascades.iter().any(|c| c.order() != 1) {
            return Err(ControllerError::Dimension("CBF-QP needs relative degree one".into()));
        }
        let kalpha = cascades.iter().map(|_| tape.constant_vec(vec![gain])).collect();
        Self::new(tape, cascades, kalpha, slack, FilterMode::CbfQp)
    }

    pub fn mode(&self) -> FilterMode {
        self.mode
    }

    pub fn slack(&self) -> SlackMode<T> {
        self.slack
    }

    pub fn n_barriers(&self) -> usize {
        self.barriers.len()
    }

    pub fn barrier_values(&self, x: &[T]) -> Vec<T> {
        self.barriers.iter().map(|b| b.cascade.h(x)).collect()
    }

    /// Filters `u_perf` at state `x`. Returns the safe control node, the slack
    /// node (one entry per barrier) and whether the slack fallback fired.
    pub fn apply(&self, tape: &mut Tape<T>, x: NodeId, u_perf: NodeId, step: usize) -> Result<PolicyStep, PolicyError> {
        if self.barriers.is_empty() {
            return Ok(PolicyStep {
                u: u_perf,
                slacks: None,
                fallback: false,
            });
        }
        let m = tape.value(u_perf).len();
        let mut inputs = vec![u_perf];
        let mut rows = Vec::with_capacity(self.barriers.len());
        for b in &self.barriers {
            let r = b.cascade.order();
            let terms = tape.custom(b.cascade.quad_forms_op(), &[x])?;
            let eta = tape.slice(terms, 0, r)?;
            let lfr = tape.index(terms, r)?;
            let alpha = tape.dot(b.kalpha, eta)?;
            let rhs = tape.add(lfr, alpha)?;
            let mx = tape.matvec(b.lg_m, x)?;
            let a = tape.add(mx, b.lg_c)?;
            rows.push(SafetyRow {
                a: tape.value(a).as_slice().to_vec(),
                rhs: tape.scalar(rhs),
            });
            inputs.push(a);
            inputs.push(rhs);
        }
        let up = tape.value(u_perf).as_slice().to_vec();
        let (zeta, use_slack, fallback) = match self.slack {
            SlackMode::On { zeta } => (zeta, true, None),
            SlackMode::Off { fallback_zeta } => (T::one(), false, fallback_zeta),
        };
        let outcome = solve_safety_qp(&up, &rows, zeta, use_slack, fallback)?;
        if !outcome.solution.is_optimal() {
            return Err(PolicyError::Infeasible { step });
        }
        let fallback_used = outcome.fallback_used;
        let out = tape.custom(SafetyQpLayer::new(outcome), &inputs)?;
        let u = tape.slice(out, 0, m)?;
        let s = tape.slice(out, m, self.barriers.len())?;
        Ok(PolicyStep {
            u,
            slacks: Some(s),
            fallback: fallback_used,
        })
    }
}

/// LQR reference passed through a [`SafetyFilter`].
pub struct FilteredLqr<'a, T> {
    lqr: &'a LqrController<T>,
    nodes: LqrNodes,
    filter: SafetyFilter<T>,
}

impl<'a, T: Real> FilteredLqr<'a, T> {
    pub fn new(tape: &mut Tape<T>, lqr: &'a LqrController<T>, filter: SafetyFilter<T>) -> Self {
        let nodes = lqr.nodes(tape);
        Self { lqr, nodes, filter }
    }

    pub fn filter(&self) -> &SafetyFilter<T> {
        &self.filter
    }
}

impl<T: Real> Policy<T> for FilteredLqr<'_, T> {
    fn act(&mut self, tape: &mut Tape<T>, x: NodeId, t: usize) -> Result<PolicyStep, PolicyError> {
        let up = self.lqr.u_perf_node(tape, self.nodes, x)?;
        self.filter.apply(tape, x, up, t)
    }

    fn barrier_values(&self, x: &[T]) -> Vec<T> {
        self.filter.barrier_values(x)
    }

    fn uses_slack(&self) -> bool {
        self.filter.slack.is_on()
    }
}
