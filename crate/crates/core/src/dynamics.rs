//! Integrator-chain plants, explicit Euler stepping and closed-loop rollouts.

use std::fmt::Write as _;

use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::linalg::Mat;
use crate::qp::QpError;
use crate::scalar::Real;

/// `ẋ = Ax + Bu` built from one order-`r` integrator chain per spatial axis.
///
/// States are grouped per axis: `[p_x, ṗ_x, …, p_x^(r−1), p_y, …]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCtrlAffineSystem<T> {
    a: Mat<T>,
    b: Mat<T>,
    c_out: Mat<T>,
    order: usize,
    axes: usize,
}

/// Chain of `axes` independent order-`r` integrators.
pub fn integrator_chain<T: Real>(axes: usize, r: usize) -> LinearCtrlAffineSystem<T> {
    assert!(axes >= 1 && r >= 1, "integrator chain needs at least one axis and order one");
    let n = axes * r;
    let mut a = Mat::zeros(n, n);
    let mut b = Mat::zeros(n, axes);
    let mut c_out = Mat::zeros(axes, n);
    for ax in 0..axes {
        let base = ax * r;
        for i in 0..r - 1 {
            a[(base + i, base + i + 1)] = T::one();
        }
        b[(base + r - 1, ax)] = T::one();
        c_out[(ax, base)] = T::one();
    }
    LinearCtrlAffineSystem { a, b, c_out, order: r, axes }
}

impl<T: Real> LinearCtrlAffineSystem<T> {
    pub fn a(&self) -> &Mat<T> {
        &self.a
    }

    pub fn b(&self) -> &Mat<T> {
        &self.b
    }

    pub fn c_out(&self) -> &Mat<T> {
        &self.c_out
    }

    /// Relative degree of a position barrier (the chain order).
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn axes(&self) -> usize {
        self.axes
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn m(&self) -> usize {
        self.b.cols()
    }

    /// State at rest at a planar position (requires two axes).
    pub fn state_at(&self, pos: [T; 2]) -> Vec<T> {
        assert_eq!(self.axes, 2, "planar position needs two axes");
        let mut x = vec![T::zero(); self.n()];
        x[0] = pos[0];
        x[self.order] = pos[1];
        x
    }

    pub fn position(&self, x: &[T]) -> [T; 2] {
        [x[0], x[self.order]]
    }

    /// `x + dt·(Ax + Bu)`
    pub fn step(&self, x: &[T], u: &[T], dt: T) -> Vec<T> {
        let ax = self.a.matvec(x);
        let bu = self.b.matvec(u);
        x.iter().zip(ax.iter().zip(&bu)).map(|(&xi, (&a, &b))| xi + (a + b) * dt).collect()
    }

    /// Euler step recorded on the tape. `a` and `b` are constant nodes holding
    /// the system matrices.
    pub fn step_node(&self, tape: &mut Tape<T>, mats: SystemNodes, x: NodeId, u: NodeId, dt: T) -> Result<NodeId, AutodiffError> {
        let ax = tape.matvec(mats.a, x)?;
        let bu = tape.matvec(mats.b, u)?;
        let xdot = tape.add(ax, bu)?;
        let inc = tape.scale(xdot, dt);
        tape.add(x, inc)
    }

    pub fn nodes(&self, tape: &mut Tape<T>) -> SystemNodes {
        SystemNodes {
            a: tape.constant(self.a.clone()),
            b: tape.constant(self.b.clone()),
        }
    }
}

/// Constant tape nodes for `A` and `B`, created once per rollout.
#[derive(Debug, Clone, Copy)]
pub struct SystemNodes {
    pub a: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("safety filter infeasible at step {step}")]
    Infeasible { step: usize },
    #[error("{0}")]
    Invalid(String),
}

/// One control decision recorded on the rollout tape.
#[derive(Debug, Clone)]
pub struct PolicyStep {
    pub u: NodeId,
    /// One slack per barrier row; `None` when the policy has no barriers.
    pub slacks: Option<NodeId>,
    pub fallback: bool,
}

/// A state-feedback controller that records itself on a tape.
pub trait Policy<T: Real> {
    fn act(&mut self, tape: &mut Tape<T>, x: NodeId, t: usize) -> Result<PolicyStep, PolicyError>;

    /// `h_j(x)` for each barrier the policy enforces.
    fn barrier_values(&self, _x: &[T]) -> Vec<T> {
        Vec::new()
    }

    /// Whether barrier rows carry slack variables.
    fn uses_slack(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RolloutStatus {
    Completed,
    Truncated { step: usize, reason: String },
}

/// Closed-loop trajectory. `states` has one more entry than `controls`.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub dt: T,
    pub states: Vec<Vec<T>>,
    pub controls: Vec<Vec<T>>,
    pub slacks: Vec<Vec<T>>,
    /// `h_j(x_t)` for every state.
    pub barrier: Vec<Vec<T>>,
    pub status: RolloutStatus,
    /// Steps where the slack-free filter was infeasible and fell back to slack.
    pub fallback_steps: Vec<usize>,
    /// Whether the filter ran with slack variables.
    pub slack_mode: bool,
    /// Tape nodes for states and slacks when recorded.
    pub state_nodes: Vec<NodeId>,
    pub slack_nodes: Vec<NodeId>,
}

impl<T: Real> Trajectory<T> {
    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn is_complete(&self) -> bool {
        self.status == RolloutStatus::Completed
    }

    /// Smallest barrier value over all states and barriers, `+∞` without
    /// barriers.
    pub fn min_barrier(&self) -> T {
        self.barrier.iter().flat_map(|hs| hs.iter().copied()).fold(T::infinity(), T::min)
    }

    pub fn path_length(&self, sys: &LinearCtrlAffineSystem<T>) -> T {
        self.states
            .windows(2)
            .map(|w| {
                let (a, b) = (sys.position(&w[0]), sys.position(&w[1]));
                ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
            })
            .sum()
    }

    /// `dt · Σ ‖u_t‖²`
    pub fn control_effort(&self) -> T {
        self.controls.iter().map(|u| u.iter().map(|&v| v * v).sum::<T>()).sum::<T>() * self.dt
    }

    /// CSV with columns `t, x1..xn, u1..um, s1..sk, h1..hk`, one row per state.
    /// The final row leaves the control and slack columns empty.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let m = self.controls.first().map_or(0, Vec::len);
        let k = self.barrier.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 1..=n {
            write!(out, ",x{i}").unwrap();
        }
        for i in 1..=m {
            write!(out, ",u{i}").unwrap();
        }
        for i in 1..=k {
            write!(out, ",s{i}").unwrap();
        }
        for i in 1..=k {
            write!(out, ",h{i}").unwrap();
        }
        out.push('\n');
        for (t, x) in self.states.iter().enumerate() {
            write!(out, "{}", T::lit(t as f64) * self.dt).unwrap();
            for v in x {
                write!(out, ",{v}").unwrap();
            }
            match self.controls.get(t) {
                Some(u) => u.iter().for_each(|v| write!(out, ",{v}").unwrap()),
                None => (0..m).for_each(|_| out.push(',')),
            }
            match self.slacks.get(t) {
                Some(s) if s.len() == k => s.iter().for_each(|v| write!(out, ",{v}").unwrap()),
                _ => (0..k).for_each(|_| out.push(',')),
            }
            if let Some(h) = self.barrier.get(t) {
                h.iter().for_each(|v| write!(out, ",{v}").unwrap());
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `steps` closed-loop Euler steps on `tape`. With a recording tape every
/// control and slack stays differentiable; with an untracked tape the values
/// are bitwise identical.
pub fn rollout<T: Real, P: Policy<T> + ?Sized>(sys: &LinearCtrlAffineSystem<T>, policy: &mut P, tape: &mut Tape<T>, x0: &[T], steps: usize, dt: T) -> Trajectory<T> {
    rollout_windowed(sys, policy, tape, x0, steps, dt, None)
}

/// [`rollout`] that cuts the state's gradient path every `window` steps
/// (truncated backpropagation through time). Values are unaffected.
pub fn rollout_windowed<T: Real, P: Policy<T> + ?Sized>(sys: &LinearCtrlAffineSystem<T>, policy: &mut P, tape: &mut Tape<T>, x0: &[T], steps: usize, dt: T, window: Option<usize>) -> Trajectory<T> {
    assert!(dt > T::zero(), "time step must be positive");
    let mats = sys.nodes(tape);
    let mut x = tape.constant_vec(x0.to_vec());
    let mut traj = Trajectory {
        dt,
        states: vec![x0.to_vec()],
        controls: Vec::with_capacity(steps),
        slacks: Vec::with_capacity(steps),
        barrier: vec![policy.barrier_values(x0)],
        status: RolloutStatus::Completed,
        fallback_steps: Vec::new(),
        slack_mode: policy.uses_slack(),
        state_nodes: vec![x],
        slack_nodes: Vec::new(),
    };
    for t in 0..steps {
        let decision = match policy.act(tape, x, t) {
            Ok(d) => d,
            Err(e) => {
                traj.status = RolloutStatus::Truncated { step: t, reason: e.to_string() };
                break;
            }
        };
        if decision.fallback {
            traj.fallback_steps.push(t);
        }
        traj.controls.push(tape.value(decision.u).as_slice().to_vec());
        match decision.slacks {
            Some(s) => {
                traj.slacks.push(tape.value(s).as_slice().to_vec());
                traj.slack_nodes.push(s);
            }
            None => traj.slacks.push(Vec::new()),
        }
        x = match sys.step_node(tape, mats, x, decision.u, dt) {
            Ok(x) => x,
            Err(e) => {
                traj.status = RolloutStatus::Truncated { step: t, reason: e.to_string() };
                break;
            }
        };
        let xv = tape.value(x).as_slice().to_vec();
        if window.is_some_and(|w| w > 0 && (t + 1) % w == 0) {
            x = tape.constant_vec(xv.clone());
        }
        traj.barrier.push(policy.barrier_values(&xv));
        traj.states.push(xv);
        traj.state_nodes.push(x);
    }
    traj
}

/// Unrecorded rollout.
pub fn simulate<T: Real, P: Policy<T> + ?Sized>(sys: &LinearCtrlAffineSystem<T>, policy: &mut P, x0: &[T], steps: usize, dt: T) -> Trajectory<T> {
    let mut tape = Tape::untracked();
    rollout(sys, policy, &mut tape, x0, steps, dt)
}

/// Applies a fixed control sequence; mainly for tests.
pub struct OpenLoop<T> {
    pub controls: Vec<Vec<T>>,
}

impl<T: Real> Policy<T> for OpenLoop<T> {
    fn act(&mut self, tape: &mut Tape<T>, _x: NodeId, t: usize) -> Result<PolicyStep, PolicyError> {
        let u = self.controls.get(t).cloned().ok_or_else(|| PolicyError::Invalid(format!("no control for step {t}")))?;
        Ok(PolicyStep {
            u: tape.constant_vec(u),
            slacks: None,
            fallback: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_integrator_matrices() {
        let s = integrator_chain::<f64>(1, 2);
        assert_eq!(s.a().as_slice(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.b().as_slice(), &[0.0, 1.0]);
        let s2 = integrator_chain::<f64>(2, 2);
        assert_eq!((s2.n(), s2.m()), (4, 2));
        assert_eq!(s2.a()[(0, 1)], 1.0);
        assert_eq!(s2.a()[(2, 3)], 1.0);
        assert_eq!(s2.a()[(1, 2)], 0.0);
        assert_eq!(s2.b()[(3, 1)], 1.0);
    }

    #[test]
    fn quadruple_chain_is_nilpotent() {
        let s = integrator_chain::<f64>(2, 4);
        assert_eq!((s.n(), s.m()), (8, 2));
        assert!(s.a().pow(3).max_abs() > 0.0);
        assert_eq!(s.a().pow(4).max_abs(), 0.0);
    }

    #[test]
    fn one_euler_step() {
        let s = integrator_chain::<f64>(1, 2);
        let x = s.step(&[0.0, 1.0], &[2.0], 0.1);
        assert!((x[0] - 0.1).abs() < 1e-15 && (x[1] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn constant_velocity_two_steps() {
        let s = integrator_chain::<f64>(1, 2);
        let mut p = OpenLoop { controls: vec![vec![0.0]; 2] };
        let tr = simulate(&s, &mut p, &[0.0, 1.0], 2, 0.1);
        assert!((tr.states[1][0] - 0.1).abs() < 1e-15);
        assert!((tr.states[2][0] - 0.2).abs() < 1e-15);
        assert_eq!(tr.states.len(), tr.controls.len() + 1);
    }

    #[test]
    fn step_gradient_wrt_control() {
        let s = integrator_chain::<f64>(1, 2);
        let mut t = Tape::new();
        let mats = s.nodes(&mut t);
        let x = t.constant_vec(vec![0.3, -0.2]);
        let u = t.leaf(Mat::column(vec![0.7]));
        let x1 = s.step_node(&mut t, mats, x, u, 0.1).unwrap();
        let v = t.index(x1, 1).unwrap();
        let g = t.backward(v).unwrap();
        let fd = (s.step(&[0.3, -0.2], &[0.7 + 1e-6], 0.1)[1] - s.step(&[0.3, -0.2], &[0.7 - 1e-6], 0.1)[1]) / 2e-6;
        assert!((g.get(u).unwrap().item() - fd).abs() < 1e-9);
        assert!((fd - 0.1).abs() < 1e-9);
    }

    #[test]
    fn open_loop_runs_out_of_controls() {
        let s = integrator_chain::<f64>(1, 1);
        let mut p = OpenLoop { controls: vec![vec![1.0]] };
        let tr = simulate(&s, &mut p, &[0.0], 3, 0.1);
        assert!(matches!(tr.status, RolloutStatus::Truncated { step: 1, .. }));
        assert_eq!(tr.states.len(), 2);
    }

    #[test]
    fn csv_shape() {
        let s = integrator_chain::<f64>(1, 2);
        let mut p = OpenLoop { controls: vec![vec![1.0]; 3] };
        let tr = simulate(&s, &mut p, &[0.0, 0.0], 3, 0.5);
        let csv = tr.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x1,x2,u1");
        assert_eq!(lines.len(), 1 + 4);
        assert!(lines[4].ends_with(','));
    }
}
