//! Ellipse barrier functions, their Lie-derivative chains under linear drift
//! and the pole algebra of exponential CBFs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, CustomOp, NodeId, Tape};
use crate::dynamics::LinearCtrlAffineSystem;
use crate::linalg::{dot, Mat};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BarrierError {
    #[error("ellipse scale entries must be positive, got {0:?}")]
    NonPositiveScale([f64; 2]),
    #[error("output selector has {got} columns but the state has {expected} entries")]
    Dimension { expected: usize, got: usize },
}

/// `φ(x) = xᵀPx + qᵀx + c` with `P` stored symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm<T> {
    p: Mat<T>,
    q: Vec<T>,
    c: T,
}

impl<T: Real> QuadraticForm<T> {
    pub fn new(p: Mat<T>, q: Vec<T>, c: T) -> Self {
        assert_eq!(p.shape(), (q.len(), q.len()), "quadratic form shape mismatch");
        Self { p: p.symmetrized(), q, c }
    }

    pub fn zero(n: usize) -> Self {
        Self::new(Mat::zeros(n, n), vec![T::zero(); n], T::zero())
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn p(&self) -> &Mat<T> {
        &self.p
    }

    pub fn q(&self) -> &[T] {
        &self.q
    }

    pub fn c(&self) -> T {
        self.c
    }

    pub fn eval(&self, x: &[T]) -> T {
        dot(x, &self.p.matvec(x)) + dot(&self.q, x) + self.c
    }

    /// `2Px + q`
    pub fn gradient(&self, x: &[T]) -> Vec<T> {
        let two = T::lit(2.0);
        self.p.matvec(x).into_iter().zip(&self.q).map(|(px, &q)| two * px + q).collect()
    }

    /// Lie derivative along `ẋ = Ax`: `(AᵀP + PA, Aᵀq, 0)`.
    pub fn lie_derivative(&self, a: &Mat<T>) -> Self {
        let at = a.transpose();
        let p = at.matmul(&self.p).add(&self.p.matmul(a));
        Self::new(p, a.tmatvec(&self.q), T::zero())
    }

    /// `self + s · other`
    pub fn add_scaled(&self, other: &Self, s: T) -> Self {
        Self {
            p: self.p.add(&other.p.scale(s)),
            q: self.q.iter().zip(&other.q).map(|(&a, &b)| a + s * b).collect(),
            c: self.c + s * other.c,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.p.max_abs() == T::zero() && self.q.iter().all(|&v| v == T::zero()) && self.c == T::zero()
    }
}

/// One ellipse obstacle: `e = [y_c, diag(Λ), θ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentInfo<T> {
    pub center: [T; 2],
    pub lambda_diag: [T; 2],
    pub theta: T,
}

impl<T: Real> EnvironmentInfo<T> {
    pub fn new(center: [T; 2], lambda_diag: [T; 2], theta: T) -> Result<Self, BarrierError> {
        let e = Self { center, lambda_diag, theta };
        e.validate()?;
        Ok(e)
    }

    /// Ellipse with semi-axes `a` (along the rotated x axis) and `b`.
    pub fn from_semi_axes(center: [T; 2], a: T, b: T, theta: T) -> Result<Self, BarrierError> {
        Self::new(center, [T::one() / (a * a), T::one() / (b * b)], theta)
    }

    pub fn circle(center: [T; 2], radius: T) -> Result<Self, BarrierError> {
        Self::from_semi_axes(center, radius, radius, T::zero())
    }

    pub fn validate(&self) -> Result<(), BarrierError> {
        if !(self.lambda_diag[0] > T::zero() && self.lambda_diag[1] > T::zero()) {
            return Err(BarrierError::NonPositiveScale([self.lambda_diag[0].as_f64(), self.lambda_diag[1].as_f64()]));
        }
        Ok(())
    }

    pub fn to_vector(&self) -> [T; 5] {
        [self.center[0], self.center[1], self.lambda_diag[0], self.lambda_diag[1], self.theta]
    }

    pub fn from_vector(v: [T; 5]) -> Result<Self, BarrierError> {
        Self::new([v[0], v[1]], [v[2], v[3]], v[4])
    }

    pub fn semi_axes(&self) -> [T; 2] {
        [T::one() / self.lambda_diag[0].sqrt(), T::one() / self.lambda_diag[1].sqrt()]
    }

    /// `Q = R(θ)ᵀ Λ R(θ)`
    pub fn shape_matrix(&self) -> Mat<T> {
        let (s, c) = self.theta.sin_cos();
        let r = Mat::from_rows(&[vec![c, -s], vec![s, c]]);
        r.transpose().matmul(&Mat::diag(&self.lambda_diag)).matmul(&r)
    }

    /// Barrier value at a position: `(y − y_c)ᵀQ(y − y_c) − 1`.
    pub fn barrier_at(&self, y: [T; 2]) -> T {
        let d = [y[0] - self.center[0], y[1] - self.center[1]];
        let q = self.shape_matrix();
        dot(&d, &q.matvec(&d)) - T::one()
    }
}

/// Lifts the ellipse barrier to state space through `y = C_out x`.
pub fn ellipse_to_state_barrier<T: Real>(e: &EnvironmentInfo<T>, c_out: &Mat<T>) -> Result<QuadraticForm<T>, BarrierError> {
    e.validate()?;
    if c_out.rows() != 2 {
        return Err(BarrierError::Dimension { expected: 2, got: c_out.rows() });
    }
    let q = e.shape_matrix();
    let p = c_out.transpose().matmul(&q).matmul(c_out);
    let qyc = q.matvec(&e.center);
    let lin: Vec<T> = c_out.tmatvec(&qyc).into_iter().map(|v| -T::lit(2.0) * v).collect();
    let c = dot(&e.center, &qyc) - T::one();
    Ok(QuadraticForm::new(p, lin, c))
}

/// `[h, L_f h, …, L_f^r h]` for one barrier, plus the input matrix needed for
/// `L_g L_f^k h`.
#[derive(Debug, Clone)]
pub struct EcbfCascade<T> {
    lie_chain: Arc<Vec<QuadraticForm<T>>>,
    b: Mat<T>,
    drift: Mat<T>,
    order: usize,
}

impl<T: Real> EcbfCascade<T> {
    pub fn new(h: QuadraticForm<T>, sys: &LinearCtrlAffineSystem<T>) -> Result<Self, BarrierError> {
        if h.dim() != sys.n() {
            return Err(BarrierError::Dimension { expected: sys.n(), got: h.dim() });
        }
        let mut chain = vec![h];
        for _ in 0..sys.order() {
            let next = chain.last().expect("non-empty").lie_derivative(sys.a());
            chain.push(next);
        }
        Ok(Self {
            lie_chain: Arc::new(chain),
            b: sys.b().clone(),
            drift: sys.a().clone(),
            order: sys.order(),
        })
    }

    pub fn for_obstacle(e: &EnvironmentInfo<T>, sys: &LinearCtrlAffineSystem<T>) -> Result<Self, BarrierError> {
        Self::new(ellipse_to_state_barrier(e, sys.c_out())?, sys)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lie_chain(&self) -> &[QuadraticForm<T>] {
        &self.lie_chain
    }

    pub fn h(&self, x: &[T]) -> T {
        self.lie_chain[0].eval(x)
    }

    /// `[h, L_f h, …, L_f^r h]` at `x` (length r + 1).
    pub fn lie_values(&self, x: &[T]) -> Vec<T> {
        self.lie_chain.iter().map(|f| f.eval(x)).collect()
    }

    /// `η_b(x) = [h, …, L_f^{r−1} h]`
    pub fn eta_b(&self, x: &[T]) -> Vec<T> {
        self.lie_chain[..self.order].iter().map(|f| f.eval(x)).collect()
    }

    pub fn lf_r(&self, x: &[T]) -> T {
        self.lie_chain[self.order].eval(x)
    }

    /// `L_g L_f^k h(x)` as a control-space row.
    pub fn lg_lf_k_row(&self, k: usize, x: &[T]) -> Vec<T> {
        self.b.tmatvec(&self.lie_chain[k].gradient(x))
    }

    /// `L_g L_f^{r−1} h(x)`
    pub fn lg_lf_row(&self, x: &[T]) -> Vec<T> {
        self.lg_lf_k_row(self.order - 1, x)
    }

    /// `(M, c)` with `L_g L_f^{r−1} h(x) = M x + c`.
    pub fn lg_affine(&self) -> (Mat<T>, Vec<T>) {
        let last = &self.lie_chain[self.order - 1];
        let bt = self.b.transpose();
        (bt.matmul(last.p()).scale(T::lit(2.0)), bt.matvec(last.q()))
    }

    pub fn quad_forms_op(&self) -> QuadForms<T> {
        QuadForms { forms: Arc::clone(&self.lie_chain) }
    }

    /// `φ_i = (L_f + p_i) φ_{i−1}`, `φ_0 = h`, as explicit quadratic forms.
    fn operator_chain(&self, poles: &[T]) -> Vec<QuadraticForm<T>> {
        let mut forms = vec![self.lie_chain[0].clone()];
        for &p in poles {
            let prev = forms.last().expect("non-empty");
            let next = prev.lie_derivative(&self.drift).add_scaled(prev, p);
            forms.push(next);
        }
        forms
    }
}

/// Coefficients of `Π (s + p_i) = s^r + k_r s^{r−1} + … + k_1`, returned as
/// `K_α = [k_1, …, k_r]`.
pub fn poles_to_kalpha<T: Real>(poles: &[T]) -> Vec<T> {
    let mut c = vec![T::one()];
    for &p in poles {
        let mut next = vec![T::zero(); c.len() + 1];
        for (j, &cj) in c.iter().enumerate() {
            next[j + 1] += cj;
            next[j] += p * cj;
        }
        c = next;
    }
    c.pop();
    c
}

/// `α(x) = Π_i (L_f + p_i) ∘ h(x) − L_f^r h(x)`, evaluated by applying the
/// operators to `h` one pole at a time.
pub fn alpha_rhs<T: Real>(cascade: &EcbfCascade<T>, poles: &[T], x: &[T]) -> T {
    assert_eq!(poles.len(), cascade.order(), "one pole per relative degree");
    let forms = cascade.operator_chain(poles);
    forms[cascade.order()].eval(x) - cascade.lf_r(x)
}

/// `v_0 … v_k` and their drift derivatives at `x0` for the pole prefix.
pub fn v_sequence<T: Real>(cascade: &EcbfCascade<T>, poles: &[T], x0: &[T]) -> (Vec<T>, Vec<T>) {
    assert!(poles.len() <= cascade.order());
    let forms = cascade.operator_chain(poles);
    let v = forms.iter().map(|f| f.eval(x0)).collect();
    let vdot = forms.iter().map(|f| f.lie_derivative(&cascade.drift).eval(x0)).collect();
    (v, vdot)
}

/// Companion matrix `F − G K_α` of the barrier chain.
pub fn closed_loop_companion<T: Real>(kalpha: &[T]) -> Mat<T> {
    let r = kalpha.len();
    let mut m = Mat::zeros(r, r);
    for i in 0..r.saturating_sub(1) {
        m[(i, i + 1)] = T::one();
    }
    for j in 0..r {
        m[(r - 1, j)] -= kalpha[j];
    }
    m
}

/// `K_α(p)` on the tape: the polynomial expansion of `Π (s + p_i)`, one pole
/// at a time.
pub fn kalpha_node<T: Real>(tape: &mut Tape<T>, poles: NodeId) -> Result<NodeId, AutodiffError> {
    let r = tape.value(poles).len();
    let one = tape.constant_scalar(T::one());
    let mut c = vec![one];
    for i in 0..r {
        let p = tape.index(poles, i)?;
        c = multiply_linear_factor(tape, &c, p)?;
    }
    c.pop();
    tape.stack(&c)
}

/// Coefficients (ascending) of `c(s) · (s + p)`.
pub(crate) fn multiply_linear_factor<T: Real>(tape: &mut Tape<T>, c: &[NodeId], p: NodeId) -> Result<Vec<NodeId>, AutodiffError> {
    let mut next = Vec::with_capacity(c.len() + 1);
    for j in 0..=c.len() {
        let shifted = j.checked_sub(1).map(|k| c[k]);
        let scaled = match c.get(j) {
            Some(&cj) => Some(tape.scale_by(p, cj)?),
            None => None,
        };
        let term = match (shifted, scaled) {
            (Some(a), Some(b)) => tape.add(a, b)?,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!(),
        };
        next.push(term);
    }
    Ok(next)
}

/// Differentiable `α` for pole nodes and a state node.
pub fn alpha_rhs_node<T: Real>(tape: &mut Tape<T>, cascade: &EcbfCascade<T>, poles: NodeId, x: NodeId) -> Result<NodeId, AutodiffError> {
    let k = kalpha_node(tape, poles)?;
    let terms = tape.custom(cascade.quad_forms_op(), &[x])?;
    let eta = tape.slice(terms, 0, cascade.order())?;
    tape.dot(k, eta)
}

/// Evaluates a stack of quadratic forms at one state node.
pub struct QuadForms<T> {
    forms: Arc<Vec<QuadraticForm<T>>>,
}

impl<T: Real> CustomOp<T> for QuadForms<T> {
    fn name(&self) -> &str {
        "quad_forms"
    }

    fn forward(&mut self, inputs: &[&Mat<T>]) -> Result<Mat<T>, AutodiffError> {
        let x = inputs[0];
        let n = self.forms[0].dim();
        if x.shape() != (n, 1) {
            return Err(AutodiffError::Shape {
                op: "quad_forms",
                lhs: x.shape(),
                rhs: (n, 1),
            });
        }
        Ok(Mat::column(self.forms.iter().map(|f| f.eval(x.as_slice())).collect()))
    }

    fn backward(&self, inputs: &[&Mat<T>], _output: &Mat<T>, upstream: &Mat<T>) -> Result<Vec<Mat<T>>, AutodiffError> {
        let x = inputs[0].as_slice();
        let mut gx = vec![T::zero(); x.len()];
        for (f, &g) in self.forms.iter().zip(upstream.as_slice()) {
            if g == T::zero() {
                continue;
            }
            crate::linalg::axpy(g, &f.gradient(x), &mut gx);
        }
        Ok(vec![Mat::column(gx)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::integrator_chain;

    fn unit_state(sys: &LinearCtrlAffineSystem<f64>, pos: [f64; 2]) -> Vec<f64> {
        sys.state_at(pos)
    }

    #[test]
    fn circle_boundary_and_outside() {
        let sys = integrator_chain::<f64>(2, 2);
        let e = EnvironmentInfo::new([0.0, 0.0], [4.0, 4.0], 0.0).unwrap();
        let h = ellipse_to_state_barrier(&e, sys.c_out()).unwrap();
        assert!(h.eval(&unit_state(&sys, [0.5, 0.0])).abs() < 1e-15);
        assert!((h.eval(&unit_state(&sys, [1.0, 0.0])) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn rotated_ellipse_boundary() {
        let sys = integrator_chain::<f64>(2, 2);
        let e = EnvironmentInfo::new([0.0, 0.0], [4.0, 1.0], std::f64::consts::FRAC_PI_2).unwrap();
        let h = ellipse_to_state_barrier(&e, sys.c_out()).unwrap();
        assert!(h.eval(&unit_state(&sys, [0.0, 0.5])).abs() < 1e-12);
        assert!(h.eval(&unit_state(&sys, [0.5, 0.0])) < 0.0);
    }

    #[test]
    fn nonpositive_scale_rejected() {
        assert!(matches!(EnvironmentInfo::new([0.0, 0.0], [0.0, 1.0], 0.0), Err(BarrierError::NonPositiveScale(_))));
    }

    fn x1_squared_minus_one() -> (LinearCtrlAffineSystem<f64>, EcbfCascade<f64>) {
        let sys = integrator_chain::<f64>(1, 2);
        let h = QuadraticForm::new(Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]), vec![0.0, 0.0], -1.0);
        let c = EcbfCascade::new(h, &sys).unwrap();
        (sys, c)
    }

    #[test]
    fn lie_derivative_of_x1_squared() {
        let (sys, c) = x1_squared_minus_one();
        let lf = &c.lie_chain()[1];
        assert_eq!(lf.p().as_slice(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(QuadraticForm::<f64>::zero(2).lie_derivative(sys.a()).is_zero());
    }

    #[test]
    fn eta_b_and_lg_row_hand_values() {
        let (_, c) = x1_squared_minus_one();
        assert_eq!(c.eta_b(&[2.0, 3.0]), vec![3.0, 12.0]);
        assert_eq!(c.lg_lf_row(&[2.0, 3.0]), vec![4.0]);
        assert_eq!(c.eta_b(&[1.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(c.lg_lf_k_row(0, &[2.0, 3.0]), vec![0.0]);
        let (m, off) = c.lg_affine();
        assert_eq!(crate::linalg::add(&m.matvec(&[2.0, 3.0]), &off), vec![4.0]);
    }

    #[test]
    fn kalpha_expansions() {
        assert_eq!(poles_to_kalpha(&[5.0]), vec![5.0]);
        assert_eq!(poles_to_kalpha(&[1.0, 2.0]), vec![2.0, 3.0]);
        assert_eq!(poles_to_kalpha(&[1.0, 1.0, 1.0, 1.0]), vec![1.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn alpha_first_order_is_linear_class_k() {
        let sys = integrator_chain::<f64>(2, 1);
        let e = EnvironmentInfo::circle([0.1, -0.2], 0.4).unwrap();
        let c = EcbfCascade::for_obstacle(&e, &sys).unwrap();
        let x = [0.7, 0.3];
        assert!((alpha_rhs(&c, &[2.5], &x) - 2.5 * c.h(&x)).abs() < 1e-14);
    }

    #[test]
    fn v_sequence_hand_values() {
        let (_, c) = x1_squared_minus_one();
        let (v, vdot) = v_sequence(&c, &[], &[2.0, 3.0]);
        assert_eq!((v, vdot[0]), (vec![3.0], 12.0));
        let (v, _) = v_sequence(&c, &[1.0], &[2.0, 3.0]);
        assert_eq!(v[1], 15.0);
    }

    #[test]
    fn alpha_node_matches_plain_value_and_fd() {
        let sys = integrator_chain::<f64>(2, 2);
        let e = EnvironmentInfo::from_semi_axes([0.0, 0.1], 0.3, 0.5, 0.4).unwrap();
        let c = EcbfCascade::for_obstacle(&e, &sys).unwrap();
        let x = vec![-0.9, 0.4, 0.2, -0.3];
        let p0 = [1.3, 2.7];
        let eval = |p: &[f64]| {
            let mut t = Tape::new();
            let pn = t.leaf(Mat::column(p.to_vec()));
            let xn = t.constant_vec(x.clone());
            let a = alpha_rhs_node(&mut t, &c, pn, xn).unwrap();
            let v = t.scalar(a);
            let g = t.backward(a).unwrap().get(pn).unwrap().clone();
            (v, g)
        };
        let (v, g) = eval(&p0);
        assert!((v - alpha_rhs(&c, &p0, &x)).abs() < 1e-12);
        for i in 0..2 {
            let step = 1e-5;
            let mut hi = p0;
            let mut lo = p0;
            hi[i] += step;
            lo[i] -= step;
            let fd = (alpha_rhs(&c, &hi, &x) - alpha_rhs(&c, &lo, &x)) / (2.0 * step);
            assert!((fd - g.as_slice()[i]).abs() <= 1e-6 * fd.abs().max(1.0), "{fd} vs {}", g.as_slice()[i]);
        }
    }
}
