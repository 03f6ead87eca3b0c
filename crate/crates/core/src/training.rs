//! Episodic training of the pole network by backpropagation through
//! closed-loop rollouts, plus the shared evaluation harness.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alpha_net::{AlphaNet, AlphaNetError, ParamNodes, PoleOutput};
use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::barrier::{BarrierError, EcbfCascade, EnvironmentInfo};
use crate::controllers::{ControllerError, FilterMode, FilteredLqr, LqrController, SafetyFilter, SlackMode};
use crate::dynamics::{integrator_chain, rollout_windowed, LinearCtrlAffineSystem, Trajectory};
use crate::scalar::Real;

const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("sampling gave up after {MAX_REJECTIONS} rejections: {0}")]
    Sampling(&'static str),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Net(#[from] AlphaNetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("rollout {rollout} stopped at step {step}: {reason}")]
    Rollout { rollout: usize, step: usize, reason: String },
    #[error("non-finite {what} at iteration {iter}")]
    NonFinite { what: &'static str, iter: usize, snapshot: Box<Snapshot> },
}

impl TrainError {
    /// Whether the failure is numerical rather than a configuration problem.
    pub fn is_numerical(&self) -> bool {
        !matches!(self, TrainError::Config(_) | TrainError::Sampling(_))
    }
}

/// State captured when training aborts on a non-finite value.
#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub iter: usize,
    pub losses: Vec<f64>,
    pub grad_norm: f64,
    pub scenarios: Vec<ScenarioRecord>,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    DoubleIntegrator,
    QuadrupleIntegrator,
    MultiObstacle,
}

impl ScenarioKind {
    pub fn order(self) -> usize {
        match self {
            ScenarioKind::QuadrupleIntegrator => 4,
            _ => 2,
        }
    }

    pub fn system<T: Real>(self) -> LinearCtrlAffineSystem<T> {
        integrator_chain(2, self.order())
    }

    pub fn default_env(self) -> EnvDistribution {
        match self {
            ScenarioKind::MultiObstacle => EnvDistribution::two_obstacles(),
            _ => EnvDistribution::default(),
        }
    }
}

/// Gaussian obstacle distribution with rejection of obstacles covering the
/// goal. One entry of `centers` per obstacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvDistribution {
    pub centers: Vec<[f64; 2]>,
    pub center_std: f64,
    pub axis_mean: f64,
    pub axis_std: f64,
    pub axis_min: f64,
    pub axis_max: f64,
    pub theta_std: f64,
}

impl Default for EnvDistribution {
    fn default() -> Self {
        Self {
            centers: vec![[0.0, 0.0]],
            center_std: 0.1,
            axis_mean: 0.35,
            axis_std: 0.05,
            axis_min: 0.15,
            axis_max: 0.6,
            theta_std: std::f64::consts::PI / 6.0,
        }
    }
}

impl EnvDistribution {
    pub fn two_obstacles() -> Self {
        Self {
            centers: vec![[-0.45, 0.15], [0.35, -0.15]],
            center_std: 0.05,
            axis_mean: 0.25,
            axis_std: 0.03,
            ..Self::default()
        }
    }

    pub fn n_obstacles(&self) -> usize {
        self.centers.len()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = !self.centers.is_empty() && self.center_std >= 0.0 && self.axis_std >= 0.0 && self.theta_std >= 0.0 && self.axis_min > 0.0 && self.axis_min <= self.axis_max;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config("environment distribution parameters".into()))
        }
    }

    fn draw_one<T: Real>(&self, center: [f64; 2], rng: &mut ChaCha8Rng) -> EnvironmentInfo<T> {
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut g = || std_normal.sample(rng);
        let c = [center[0] + self.center_std * g(), center[1] + self.center_std * g()];
        let a = (self.axis_mean + self.axis_std * g()).clamp(self.axis_min, self.axis_max);
        let b = (self.axis_mean + self.axis_std * g()).clamp(self.axis_min, self.axis_max);
        let theta = self.theta_std * g();
        EnvironmentInfo::from_semi_axes([T::lit(c[0]), T::lit(c[1])], T::lit(a), T::lit(b), T::lit(theta)).expect("clipped semi-axes are positive")
    }

    /// One environment (all obstacles); each obstacle is redrawn until it
    /// leaves the goal outside.
    pub fn sample<T: Real>(&self, rng: &mut ChaCha8Rng, goal: [f64; 2]) -> Result<Vec<EnvironmentInfo<T>>, TrainError> {
        let goal = [T::lit(goal[0]), T::lit(goal[1])];
        self.centers
            .iter()
            .map(|&c| {
                for _ in 0..MAX_REJECTIONS {
                    let e = self.draw_one::<T>(c, rng);
                    if e.barrier_at(goal) > T::zero() {
                        return Ok(e);
                    }
                }
                Err(TrainError::Sampling("obstacle covers the goal"))
            })
            .collect()
    }
}

/// Uniform start box; every derivative starts at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StartDistribution {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub min_barrier: f64,
}

impl Default for StartDistribution {
    fn default() -> Self {
        Self {
            x_range: [-1.7, -1.3],
            y_range: [-0.3, 0.3],
            min_barrier: 0.05,
        }
    }
}

impl StartDistribution {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.x_range[0] <= self.x_range[1] && self.y_range[0] <= self.y_range[1] && self.min_barrier > 0.0 {
            Ok(())
        } else {
            Err(TrainError::Config("start distribution ranges".into()))
        }
    }

    pub fn sample<T: Real>(&self, rng: &mut ChaCha8Rng, sys: &LinearCtrlAffineSystem<T>, envs: &[EnvironmentInfo<T>]) -> Result<Vec<T>, TrainError> {
        let floor = T::lit(self.min_barrier);
        for _ in 0..MAX_REJECTIONS {
            let px = uniform(rng, self.x_range);
            let py = uniform(rng, self.y_range);
            let pos = [T::lit(px), T::lit(py)];
            if envs.iter().all(|e| e.barrier_at(pos) >= floor) {
                return Ok(sys.state_at(pos));
            }
        }
        Err(TrainError::Sampling("no start state clears the obstacles"))
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// One environment plus initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T> {
    pub envs: Vec<EnvironmentInfo<T>>,
    pub x0: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub envs: Vec<[f64; 5]>,
    pub x0: Vec<f64>,
}

impl<T: Real> Scenario<T> {
    pub fn record(&self) -> ScenarioRecord {
        ScenarioRecord {
            envs: self.envs.iter().map(|e| e.to_vector().map(|v| v.as_f64())).collect(),
            x0: self.x0.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn cascades(&self, sys: &LinearCtrlAffineSystem<T>) -> Result<Vec<EcbfCascade<T>>, BarrierError> {
        self.envs.iter().map(|e| EcbfCascade::for_obstacle(e, sys)).collect()
    }
}

/// Draws `count` scenarios from a seeded stream.
pub fn sample_scenarios<T: Real>(
    sys: &LinearCtrlAffineSystem<T>,
    env: &EnvDistribution,
    start: &StartDistribution,
    goal: [f64; 2],
    fixed_env: Option<&[EnvironmentInfo<T>]>,
    count: usize,
    seed: u64,
) -> Result<Vec<Scenario<T>>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let envs = match fixed_env {
                Some(f) => f.to_vec(),
                None => env.sample(&mut rng, goal)?,
            };
            let x0 = start.sample(&mut rng, sys, &envs)?;
            Ok(Scenario { envs, x0 })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scenario: ScenarioKind,
    pub iterations: usize,
    pub batch: usize,
    pub horizon: f64,
    pub dt: f64,
    pub lambda_delta: f64,
    pub zeta: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub goal: [f64; 2],
    pub position_only_loss: bool,
    /// Largest allowed `p_i · dt`; poles above `max_pole_dt / dt` are pulled
    /// down to it (never below their validity bound). Unset disables the cap.
    pub max_pole_dt: Option<f64>,
    /// Truncated BPTT window in steps; full horizon when unset.
    pub bptt_window: Option<usize>,
    /// Upper bound on `iterations · batch · steps`.
    pub compute_budget: u64,
    /// Worker threads for the batch; 0 uses the global pool.
    pub threads: usize,
    /// Train on this single obstacle `[y_c, diag Λ, θ]` instead of sampling.
    pub fixed_env: Option<[f64; 5]>,
    pub env: EnvDistribution,
    pub start: StartDistribution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::DoubleIntegrator,
            iterations: 100,
            batch: 30,
            horizon: 8.0,
            dt: 0.02,
            lambda_delta: 10.0,
            zeta: 1000.0,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: crate::alpha_net::DEFAULT_EPSILON,
            seed: 0,
            goal: [1.0, 0.0],
            position_only_loss: false,
            max_pole_dt: Some(0.5),
            bptt_window: None,
            compute_budget: 200_000_000,
            threads: 0,
            fixed_env: None,
            env: EnvDistribution::default(),
            start: StartDistribution::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_scenario(kind: ScenarioKind) -> Self {
        Self {
            scenario: kind,
            env: kind.default_env(),
            ..Self::default()
        }
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [("horizon", self.horizon), ("dt", self.dt), ("zeta", self.zeta), ("epsilon", self.epsilon)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda_delta >= 0.0 && self.learning_rate >= 0.0) {
            return Err(TrainError::Config("lambda_delta and learning_rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch == 0 || self.steps() == 0 {
            return Err(TrainError::Config("batch and horizon/dt must be at least one".into()));
        }
        let work = self.iterations as u64 * self.batch as u64 * self.steps() as u64;
        if work > self.compute_budget {
            return Err(TrainError::Config(format!("{work} rollout steps exceed the compute budget {}", self.compute_budget)));
        }
        if self.max_pole_dt.is_some_and(|k| !(k > 0.0)) {
            return Err(TrainError::Config("max_pole_dt must be positive".into()));
        }
        if let Some(e) = self.fixed_env {
            EnvironmentInfo::<f64>::from_vector(e)?;
        }
        self.env.validate()?;
        self.start.validate()
    }

    pub fn goal_state<T: Real>(&self, sys: &LinearCtrlAffineSystem<T>) -> Vec<T> {
        sys.state_at([T::lit(self.goal[0]), T::lit(self.goal[1])])
    }

    fn fixed_envs<T: Real>(&self) -> Result<Option<Vec<EnvironmentInfo<T>>>, TrainError> {
        match self.fixed_env {
            Some(v) => Ok(Some(vec![EnvironmentInfo::from_vector(v.map(T::lit))?])),
            None => Ok(None),
        }
    }

    /// Training batch for iteration `iter`.
    pub fn batch_scenarios<T: Real>(&self, sys: &LinearCtrlAffineSystem<T>, iter: usize) -> Result<Vec<Scenario<T>>, TrainError> {
        let fixed = self.fixed_envs::<T>()?;
        let seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(iter as u64 + 1);
        sample_scenarios(sys, &self.env, &self.start, self.goal, fixed.as_deref(), self.batch, seed)
    }
}

/// `Σ_t ‖x_t − x_goal‖² + λ_δ Σ_t ‖s_t‖²` on the tape.
pub fn loss_node<T: Real>(tape: &mut Tape<T>, traj: &Trajectory<T>, goal: &[T], lambda_delta: T, position_only: Option<&LinearCtrlAffineSystem<T>>) -> Result<NodeId, AutodiffError> {
    let g = tape.constant_vec(goal.to_vec());
    let mask = position_only.map(|sys| tape.constant(sys.c_out().clone()));
    let mut terms = Vec::with_capacity(traj.state_nodes.len() + traj.slack_nodes.len());
    for &x in &traj.state_nodes {
        let d = tape.sub(x, g)?;
        let d = match mask {
            Some(c) => tape.matvec(c, d)?,
            None => d,
        };
        terms.push(tape.l2norm_sq(d));
    }
    for &s in &traj.slack_nodes {
        let sq = tape.l2norm_sq(s);
        terms.push(tape.scale(sq, lambda_delta));
    }
    let all = tape.stack(&terms)?;
    Ok(tape.sum(all))
}

/// Plain-value version of [`loss_node`].
pub fn loss_value<T: Real>(traj: &Trajectory<T>, goal: &[T], lambda_delta: T, position_only: Option<&LinearCtrlAffineSystem<T>>) -> T {
    let mut total = T::zero();
    for x in &traj.states {
        let d = crate::linalg::sub(x, goal);
        total += match position_only {
            Some(sys) => crate::linalg::norm_sq(&sys.c_out().matvec(&d)),
            None => crate::linalg::norm_sq(&d),
        };
    }
    for s in &traj.slacks {
        total += lambda_delta * crate::linalg::norm_sq(s);
    }
    total
}

/// Learned-pole filter for one rollout: one network pass per obstacle with the
/// rollout's initial state.
pub fn learned_filter<T: Real>(
    tape: &mut Tape<T>,
    net: &AlphaNet<T>,
    nodes: &ParamNodes,
    cascades: Vec<EcbfCascade<T>>,
    scenario: &Scenario<T>,
    cap: Option<T>,
    slack: SlackMode<T>,
) -> Result<(SafetyFilter<T>, Vec<PoleOutput<T>>), TrainError> {
    let mut outs = Vec::with_capacity(cascades.len());
    for (e, c) in scenario.envs.iter().zip(&cascades) {
        outs.push(net.forward(tape, nodes, e, &scenario.x0, c, cap)?);
    }
    let kalpha = outs.iter().map(|o| o.kalpha).collect();
    let filter = SafetyFilter::new(tape, cascades, kalpha, slack, FilterMode::EcbfLearned)?;
    Ok((filter, outs))
}

/// Result of one recorded training rollout.
#[derive(Debug, Clone)]
pub struct RolloutGrad<T> {
    pub loss: T,
    pub grad: Vec<T>,
    pub mean_slack: T,
    pub min_barrier: T,
}

/// Everything fixed across one training run.
pub struct TrainContext<T: Real> {
    pub cfg: TrainConfig,
    pub sys: LinearCtrlAffineSystem<T>,
    pub lqr: LqrController<T>,
    pub goal: Vec<T>,
}

impl<T: Real> TrainContext<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let sys = cfg.scenario.system::<T>();
        let goal = cfg.goal_state(&sys);
        let lqr = LqrController::identity_weights(&sys, goal.clone())?;
        let rho = lqr.discrete_spectral_radius(&sys, T::lit(cfg.dt));
        if !(rho < 1.0) {
            return Err(TrainError::Config(format!("Euler closed loop unstable at dt = {} (spectral radius {rho})", cfg.dt)));
        }
        Ok(Self { cfg, sys, lqr, goal })
    }

    /// Upper pole limit `max_pole_dt / dt`.
    pub fn pole_cap(&self) -> Option<T> {
        self.cfg.max_pole_dt.map(|k| T::lit(k / self.cfg.dt))
    }

    fn position_mask(&self) -> Option<&LinearCtrlAffineSystem<T>> {
        self.cfg.position_only_loss.then_some(&self.sys)
    }

    /// Slack-on rollout recorded on a fresh tape, its loss and the flattened
    /// parameter gradient.
    pub fn rollout_grad(&self, net: &AlphaNet<T>, scenario: &Scenario<T>, index: usize) -> Result<RolloutGrad<T>, TrainError> {
        let mut tape = Tape::new();
        let nodes = net.params.register(&mut tape);
        let cascades = scenario.cascades(&self.sys)?;
        let slack = SlackMode::On { zeta: T::lit(self.cfg.zeta) };
        let (filter, _) = learned_filter(&mut tape, net, &nodes, cascades, scenario, self.pole_cap(), slack)?;
        let mut policy = FilteredLqr::new(&mut tape, &self.lqr, filter);
        let traj = rollout_windowed(&self.sys, &mut policy, &mut tape, &scenario.x0, self.cfg.steps(), T::lit(self.cfg.dt), self.cfg.bptt_window);
        if let crate::dynamics::RolloutStatus::Truncated { step, reason } = &traj.status {
            return Err(TrainError::Rollout {
                rollout: index,
                step: *step,
                reason: reason.clone(),
            });
        }
        let loss = loss_node(&mut tape, &traj, &self.goal, T::lit(self.cfg.lambda_delta), self.position_mask())?;
        let loss_v = tape.scalar(loss);
        let grads = tape.backward(loss)?;
        let slack_total: T = traj.slacks.iter().flatten().copied().sum();
        let slack_count = traj.slacks.iter().map(Vec::len).sum::<usize>().max(1);
        Ok(RolloutGrad {
            loss: loss_v,
            grad: net.params.flat_gradient(&nodes, &grads),
            mean_slack: slack_total / T::lit(slack_count as f64),
            min_barrier: traj.min_barrier(),
        })
    }

    /// Per-rollout results for a batch, in scenario order.
    pub fn batch_grads(&self, net: &AlphaNet<T>, scenarios: &[Scenario<T>]) -> Result<Vec<RolloutGrad<T>>, TrainError> {
        let run = || scenarios.par_iter().enumerate().map(|(i, s)| self.rollout_grad(net, s, i)).collect::<Result<Vec<_>, _>>();
        match self.cfg.threads {
            0 => run(),
            k => rayon::ThreadPoolBuilder::new().num_threads(k).build().map_err(|e| TrainError::Config(e.to_string()))?.install(run),
        }
    }

    /// Mean batch loss and mean gradient (reduced in scenario order).
    pub fn batch_loss_grad(&self, net: &AlphaNet<T>, scenarios: &[Scenario<T>]) -> Result<(T, Vec<T>), TrainError> {
        let results = self.batch_grads(net, scenarios)?;
        let (loss, grad) = mean_results(&results, net.params.n_params());
        Ok((loss, grad))
    }
}

fn mean_results<T: Real>(results: &[RolloutGrad<T>], n_params: usize) -> (T, Vec<T>) {
    let n = T::lit(results.len() as f64);
    let mut grad = vec![T::zero(); n_params];
    let mut loss = T::zero();
    for r in results {
        loss += r.loss;
        crate::linalg::axpy(T::one(), &r.grad, &mut grad);
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Adam or plain gradient descent over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    beta1: T,
    beta2: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: T, beta1: T, beta2: T, n: usize) -> Self {
        Self {
            kind,
            lr,
            beta1,
            beta2,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig, n: usize) -> Self {
        Self::new(cfg.optimizer, T::lit(cfg.learning_rate), T::lit(cfg.beta1), T::lit(cfg.beta2), n)
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), grad.len());
        if self.lr == T::zero() {
            return;
        }
        match self.kind {
            OptimizerKind::Sgd => crate::linalg::axpy(-self.lr, grad, params),
            OptimizerKind::Adam => {
                self.t += 1;
                let one = T::one();
                let c1 = one - self.beta1.powi(self.t);
                let c2 = one - self.beta2.powi(self.t);
                let eps = T::lit(1e-8);
                for i in 0..params.len() {
                    self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * grad[i];
                    self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * grad[i] * grad[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

/// One JSON-lines record per training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iter: usize,
    pub mean_loss: f64,
    pub mean_slack: f64,
    pub min_h: f64,
    pub wall_ms: f64,
}

impl IterMetrics {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &Self) -> bool {
        self.iter == other.iter && self.mean_loss.to_bits() == other.mean_loss.to_bits() && self.mean_slack.to_bits() == other.mean_slack.to_bits() && self.min_h.to_bits() == other.min_h.to_bits()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub net: AlphaNet<T>,
    pub metrics: Vec<IterMetrics>,
}

/// Runs the configured number of iterations starting from `net`.
/// `on_iter` sees each record as it is produced.
pub fn train<T: Real>(cfg: &TrainConfig, mut net: AlphaNet<T>, mut on_iter: impl FnMut(&IterMetrics)) -> Result<TrainOutcome<T>, TrainError> {
    let ctx = TrainContext::<T>::new(cfg.clone())?;
    net.epsilon = T::lit(cfg.epsilon);
    let mut opt = Optimizer::from_config(cfg, net.params.n_params());
    let mut metrics = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let start = Instant::now();
        let scenarios = cfg.batch_scenarios(&ctx.sys, iter)?;
        let results = ctx.batch_grads(&net, &scenarios)?;
        let (loss, grad) = mean_results(&results, net.params.n_params());
        let grad_norm = crate::linalg::norm_sq(&grad).sqrt();
        let bad = if !loss.is_finite() {
            Some("loss")
        } else if !grad_norm.is_finite() {
            Some("gradient")
        } else {
            None
        };
        if let Some(what) = bad {
            return Err(TrainError::NonFinite {
                what,
                iter,
                snapshot: Box::new(Snapshot {
                    iter,
                    losses: results.iter().map(|r| r.loss.as_f64()).collect(),
                    grad_norm: grad_norm.as_f64(),
                    scenarios: scenarios.iter().map(Scenario::record).collect(),
                    checkpoint: net.to_json()?,
                }),
            });
        }
        let mut flat = net.params.flatten();
        opt.step(&mut flat, &grad);
        net.params = net.params.unflatten(&flat);

        let n = T::lit(results.len() as f64);
        let rec = IterMetrics {
            iter,
            mean_loss: loss.as_f64(),
            mean_slack: (results.iter().map(|r| r.mean_slack).sum::<T>() / n).as_f64(),
            min_h: results.iter().map(|r| r.min_barrier.as_f64()).fold(f64::INFINITY, f64::min),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        log::info!("iter {iter}: loss {:.4} slack {:.2e} min h {:.4}", rec.mean_loss, rec.mean_slack, rec.min_h);
        on_iter(&rec);
        metrics.push(rec);
    }
    Ok(TrainOutcome { net, metrics })
}

/// How poles are chosen for an evaluation rollout.
pub enum PoleSource<'a, T: Real> {
    Learned(&'a AlphaNet<T>),
    /// Learned poles times `factor`, re-clamped to the validity bounds.
    Scaled(&'a AlphaNet<T>, T),
    /// `p_i = b_i + Uniform(0, spread)`, drawn per scenario and obstacle from
    /// `seed`.
    RandomValid {
        seed: u64,
        spread: T,
        epsilon: T,
    },
    /// The same poles for every obstacle; must be valid at each start.
    Fixed(Vec<T>),
}

impl<T: Real> PoleSource<'_, T> {
    pub fn label(&self) -> String {
        match self {
            PoleSource::Learned(_) => "learned".into(),
            PoleSource::Scaled(_, f) => format!("scaled_{f}"),
            PoleSource::RandomValid { .. } => "random_valid".into(),
            PoleSource::Fixed(p) => format!("fixed_{p:?}"),
        }
    }
}

/// Per-scenario evaluation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub loss: f64,
    pub min_h: f64,
    pub path_length: f64,
    pub control_effort: f64,
    pub fallback_steps: usize,
    pub complete: bool,
    pub slack_mode: bool,
    /// Times a scaled pole had to be lifted back to its bound.
    pub clamped: usize,
    pub poles: Vec<Vec<f64>>,
}

/// Mean and standard deviation of sub-task means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub subtasks: usize,
}

pub fn summarize(values: &[f64], subtask_size: usize) -> Summary {
    let size = subtask_size.max(1);
    let means: Vec<f64> = values.chunks(size).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let k = means.len().max(1) as f64;
    let mean = means.iter().sum::<f64>() / k;
    let var = if means.len() > 1 {
        means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    Summary {
        mean,
        std: var.sqrt(),
        subtasks: means.len(),
    }
}

/// Closed-loop evaluation with slack-free filtering. Returns the trajectory
/// alongside its metrics.
pub fn evaluate_one<T: Real>(ctx: &TrainContext<T>, source: &PoleSource<'_, T>, scenario: &Scenario<T>, index: usize) -> Result<(EvalRecord, Trajectory<T>), TrainError> {
    let mut tape = Tape::untracked();
    let cascades = scenario.cascades(&ctx.sys)?;
    let slack = SlackMode::test_time();
    let mut clamped = 0;
    let filter = match source {
        PoleSource::Learned(net) => {
            let nodes = net.params.register(&mut tape);
            learned_filter(&mut tape, net, &nodes, cascades, scenario, ctx.pole_cap(), slack)?.0
        }
        PoleSource::Scaled(net, factor) => {
            let mut kal = Vec::with_capacity(cascades.len());
            for (e, c) in scenario.envs.iter().zip(&cascades) {
                let (learned, _) = net.poles(e, &scenario.x0, c, ctx.pole_cap())?;
                let (poles, _) = crate::alpha_net::sequential_poles(c, &scenario.x0, net.epsilon, ctx.pole_cap(), |i, b| {
                    let p = learned[i] * *factor;
                    if p < b {
                        clamped += 1;
                    }
                    p
                });
                kal.push(poles);
            }
            if clamped > 0 {
                log::debug!("scenario {index}: {clamped} scaled poles lifted to their bounds");
            }
            SafetyFilter::fixed(&mut tape, cascades, &kal, &scenario.x0, slack)?
        }
        PoleSource::RandomValid { seed, spread, epsilon } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
            let mut kal = Vec::with_capacity(cascades.len());
            for c in &cascades {
                let (poles, _) = crate::alpha_net::sequential_poles(c, &scenario.x0, *epsilon, ctx.pole_cap(), |_, b| b + T::lit(rng.random_range(0.0..spread.as_f64())));
                kal.push(poles);
            }
            SafetyFilter::fixed(&mut tape, cascades, &kal, &scenario.x0, slack)?
        }
        PoleSource::Fixed(p) => {
            let kal = vec![p.clone(); cascades.len()];
            SafetyFilter::fixed(&mut tape, cascades, &kal, &scenario.x0, slack)?
        }
    };
    let mut policy = FilteredLqr::new(&mut tape, &ctx.lqr, filter);
    let traj = rollout_windowed(&ctx.sys, &mut policy, &mut tape, &scenario.x0, ctx.cfg.steps(), T::lit(ctx.cfg.dt), None);
    let poles = pole_values(source, scenario, &ctx.sys, ctx.pole_cap())?;
    let rec = EvalRecord {
        loss: loss_value(&traj, &ctx.goal, T::lit(ctx.cfg.lambda_delta), ctx.position_mask()).as_f64(),
        min_h: traj.min_barrier().as_f64(),
        path_length: traj.path_length(&ctx.sys).as_f64(),
        control_effort: traj.control_effort().as_f64(),
        fallback_steps: traj.fallback_steps.len(),
        complete: traj.is_complete(),
        slack_mode: traj.slack_mode,
        clamped,
        poles,
    };
    Ok((rec, traj))
}

fn pole_values<T: Real>(source: &PoleSource<'_, T>, scenario: &Scenario<T>, sys: &LinearCtrlAffineSystem<T>, cap: Option<T>) -> Result<Vec<Vec<f64>>, TrainError> {
    let to64 = |v: Vec<T>| v.into_iter().map(|x| x.as_f64()).collect::<Vec<_>>();
    match source {
        PoleSource::Learned(net) => scenario
            .envs
            .iter()
            .map(|e| Ok(to64(net.poles(e, &scenario.x0, &EcbfCascade::for_obstacle(e, sys)?, cap)?.0)))
            .collect(),
        PoleSource::Fixed(p) => Ok(vec![to64(p.clone()); scenario.envs.len()]),
        _ => Ok(Vec::new()),
    }
}

/// Evaluates every scenario (in parallel, results in scenario order).
pub fn evaluate<T: Real>(ctx: &TrainContext<T>, source: &PoleSource<'_, T>, scenarios: &[Scenario<T>]) -> Result<Vec<EvalRecord>, TrainError> {
    scenarios.par_iter().enumerate().map(|(i, s)| evaluate_one(ctx, source, s, i).map(|r| r.0)).collect()
}
