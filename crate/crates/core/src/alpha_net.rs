//! Environment-conditioned pole network.
//!
//! `p(e, x0; θ)` is a two-hidden-layer ReLU MLP whose raw outputs are lifted
//! above the validity bounds `b_i(x0)`, so every pole vector it emits gives a
//! valid exponential CBF at `x0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, NodeId, Tape};
use crate::barrier::{kalpha_node, EcbfCascade, EnvironmentInfo};
use crate::linalg::Mat;
use crate::scalar::Real;

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const HIDDEN_WIDTH: usize = 100;
/// Floor on `v_{i−1}(x0)` inside the bound ratio.
pub const DENOMINATOR_FLOOR: f64 = 1e-3;

const CHECKPOINT_FORMAT: &str = "diffcbf-alpha-net";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AlphaNetError {
    #[error("initial state is outside the safe set (h(x0) = {h})")]
    OutsideSafeSet { h: f64 },
    #[error("network expects {expected} inputs, got {got}")]
    InputSize { expected: usize, got: usize },
    #[error("network has {net} outputs but the barrier has relative degree {order}")]
    OutputSize { net: usize, order: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `out × in`
    pub weight: Mat<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub layers: Vec<Layer<T>>,
}

/// Leaf nodes holding one copy of the parameters on a tape.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl<T: Real> MlpParams<T> {
    /// Every weight and bias drawn from `Uniform(0, 0.1)`.
    pub fn init(sizes: &[usize], seed: u64) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || loop {
            let v: f64 = rng.random_range(0.0..0.1);
            if v > 0.0 {
                break T::lit(v);
            }
        };
        let layers = sizes
            .windows(2)
            .map(|w| {
                let weight = Mat::from_fn(w[1], w[0], |_, _| draw());
                let bias = (0..w[1]).map(|_| draw()).collect();
                Layer { weight, bias }
            })
            .collect();
        Self { layers }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].weight.cols()];
        s.extend(self.layers.iter().map(|l| l.weight.rows()));
        s
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            v.extend_from_slice(l.weight.as_slice());
            v.extend_from_slice(&l.bias);
        }
        v
    }

    /// Inverse of [`flatten`](Self::flatten) for the same architecture.
    pub fn unflatten(&self, flat: &[T]) -> Self {
        assert_eq!(flat.len(), self.n_params(), "parameter count");
        let mut off = 0;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let nw = l.weight.len();
                let weight = Mat::from_vec(l.weight.rows(), l.weight.cols(), flat[off..off + nw].to_vec());
                off += nw;
                let bias = flat[off..off + l.bias.len()].to_vec();
                off += l.bias.len();
                Layer { weight, bias }
            })
            .collect();
        Self { layers }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> ParamNodes {
        ParamNodes {
            layers: self.layers.iter().map(|l| (tape.leaf(l.weight.clone()), tape.leaf(Mat::column(l.bias.clone())))).collect(),
        }
    }

    /// Gradient of a tape loss w.r.t. the registered parameters, flattened in
    /// [`flatten`](Self::flatten) order.
    pub fn flat_gradient(&self, nodes: &ParamNodes, grads: &Gradients<T>) -> Vec<T> {
        let mut v = Vec::with_capacity(self.n_params());
        for (l, &(w, b)) in self.layers.iter().zip(&nodes.layers) {
            v.extend_from_slice(grads.get_or_zeros(w, l.weight.shape()).as_slice());
            v.extend_from_slice(grads.get_or_zeros(b, (l.bias.len(), 1)).as_slice());
        }
        v
    }

    pub fn min_entry(&self) -> T {
        self.flatten().into_iter().fold(T::infinity(), T::min)
    }
}

/// `b_i = ReLU(−v̇/max(v, floor) − ε) + ε`.
pub fn pole_bound<T: Real>(v: T, vdot: T, epsilon: T) -> T {
    let denom = v.max(T::lit(DENOMINATOR_FLOOR));
    (-vdot / denom - epsilon).max(T::zero()) + epsilon
}

/// Builds poles one at a time. `choose(i, b_i)` proposes pole `i` given its
/// bound; the proposal is clamped into `[b_i, max(cap, b_i)]` and fed into the
/// next bound. Returns `(poles, bounds)`.
pub fn sequential_poles<T: Real>(cascade: &EcbfCascade<T>, x0: &[T], epsilon: T, cap: Option<T>, mut choose: impl FnMut(usize, T) -> T) -> (Vec<T>, Vec<T>) {
    let eta = cascade.lie_values(x0);
    let r = cascade.order();
    // coefficients of Π_{k<i}(s + p_k), ascending, leading one included
    let mut c = vec![T::one()];
    let mut poles = Vec::with_capacity(r);
    let mut bounds = Vec::with_capacity(r);
    for i in 0..r {
        let v: T = c.iter().zip(&eta).map(|(&a, &b)| a * b).sum();
        let vdot: T = c.iter().zip(&eta[1..]).map(|(&a, &b)| a * b).sum();
        let b = pole_bound(v, vdot, epsilon);
        let mut p = choose(i, b).max(b);
        if let Some(cap) = cap {
            p = p.min(cap.max(b));
        }
        let mut next = vec![T::zero(); c.len() + 1];
        for (j, &cj) in c.iter().enumerate() {
            next[j + 1] += cj;
            next[j] += p * cj;
        }
        c = next;
        poles.push(p);
        bounds.push(b);
    }
    (poles, bounds)
}

/// Poles and `K_α` for one barrier, recorded on a tape.
#[derive(Debug, Clone)]
pub struct PoleOutput<T> {
    pub poles: NodeId,
    pub kalpha: NodeId,
    pub bounds: Vec<T>,
    /// Raw network outputs before clamping.
    pub raw: Vec<T>,
    /// Some `v_{i−1}(x0)` fell below the denominator floor.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaNet<T> {
    pub params: MlpParams<T>,
    pub epsilon: T,
    pub seed: u64,
}

impl<T: Real> AlphaNet<T> {
    /// `5 + n → 100 → 100 → r`
    pub fn new(state_dim: usize, order: usize, seed: u64) -> Self {
        Self::with_sizes(&[5 + state_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, order], seed)
    }

    pub fn with_sizes(sizes: &[usize], seed: u64) -> Self {
        Self {
            params: MlpParams::init(sizes, seed),
            epsilon: T::lit(DEFAULT_EPSILON),
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.params.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.params.layers.last().expect("non-empty").weight.rows()
    }

    fn check(&self, e: &EnvironmentInfo<T>, x0: &[T], cascade: &EcbfCascade<T>) -> Result<Vec<T>, AlphaNetError> {
        let mut input = e.to_vector().to_vec();
        input.extend_from_slice(x0);
        if input.len() != self.input_dim() {
            return Err(AlphaNetError::InputSize {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        if self.output_dim() != cascade.order() {
            return Err(AlphaNetError::OutputSize {
                net: self.output_dim(),
                order: cascade.order(),
            });
        }
        let h = cascade.h(x0);
        if !(h > T::zero()) {
            return Err(AlphaNetError::OutsideSafeSet { h: h.as_f64() });
        }
        Ok(input)
    }

    /// Poles for obstacle `e` seen from `x0`, differentiable in `nodes`.
    ///
    /// Each pole is `raw_i` clamped into `[b_i, max(cap, b_i)]`, computed as
    /// `b_i` plus a non-negative term so rounding never undercuts the bound.
    pub fn forward(&self, tape: &mut Tape<T>, nodes: &ParamNodes, e: &EnvironmentInfo<T>, x0: &[T], cascade: &EcbfCascade<T>, cap: Option<T>) -> Result<PoleOutput<T>, AlphaNetError> {
        let input = self.check(e, x0, cascade)?;
        let mut a = tape.constant_vec(input);
        let last = nodes.layers.len() - 1;
        for (k, &(w, b)) in nodes.layers.iter().enumerate() {
            let z = tape.matvec(w, a)?;
            let z = tape.add(z, b)?;
            a = if k < last { tape.relu(z) } else { z };
        }
        let raw = a;
        let raw_values = tape.value(raw).as_slice().to_vec();

        let r = cascade.order();
        let eta = cascade.lie_values(x0);
        let eps = self.epsilon;
        let floor = T::lit(DENOMINATOR_FLOOR);
        let one = tape.constant_scalar(T::one());
        let mut c = vec![one];
        let mut poles = Vec::with_capacity(r);
        let mut bounds = Vec::with_capacity(r);
        let mut degenerate = false;
        for i in 0..r {
            let cv = tape.stack(&c)?;
            let eta_v = tape.constant_vec(eta[..=i].to_vec());
            let eta_d = tape.constant_vec(eta[1..=i + 1].to_vec());
            let v = tape.dot(cv, eta_v)?;
            let vdot = tape.dot(cv, eta_d)?;
            if tape.scalar(v) < floor {
                degenerate = true;
            }
            let denom = tape.clamp_min(v, floor);
            let ratio = tape.div(vdot, denom)?;
            let neg = tape.neg(ratio);
            let arg = tape.offset(neg, -eps);
            let bound = tape.relu(arg);
            let bound = tape.offset(bound, eps);
            bounds.push(tape.scalar(bound));

            let raw_i = tape.index(raw, i)?;
            let gap = tape.sub(raw_i, bound)?;
            let mut gap = tape.relu(gap);
            if let Some(cap) = cap {
                // min(gap, room) with room = max(cap, b) − b, kept non-negative
                let cap = tape.constant_scalar(cap);
                let room = tape.sub(cap, bound)?;
                let room = tape.relu(room);
                let excess = tape.sub(room, gap)?;
                let excess = tape.relu(excess);
                gap = tape.sub(room, excess)?;
            }
            let p = tape.add(bound, gap)?;
            poles.push(p);
            c = crate::barrier::multiply_linear_factor(tape, &c, p)?;
        }
        if degenerate {
            log::warn!("degenerate pole bound: v(x0) below {DENOMINATOR_FLOOR}");
        }
        let poles = tape.stack(&poles)?;
        let kalpha = kalpha_node(tape, poles)?;
        Ok(PoleOutput {
            poles,
            kalpha,
            bounds,
            raw: raw_values,
            degenerate,
        })
    }

    /// Plain-value poles and bounds.
    pub fn poles(&self, e: &EnvironmentInfo<T>, x0: &[T], cascade: &EcbfCascade<T>, cap: Option<T>) -> Result<(Vec<T>, Vec<T>), AlphaNetError> {
        let mut tape = Tape::untracked();
        let nodes = self.params.register(&mut tape);
        let out = self.forward(&mut tape, &nodes, e, x0, cascade, cap)?;
        Ok((tape.value(out.poles).as_slice().to_vec(), out.bounds))
    }

    pub fn to_json(&self) -> Result<String, AlphaNetError> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layer_sizes: self.params.sizes(),
            seed: self.seed,
            epsilon: self.epsilon.as_f64(),
            layers: self
                .params
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    weight: (0..l.weight.rows()).map(|i| l.weight.row(i).iter().map(|v| v.as_f64()).collect()).collect(),
                    bias: l.bias.iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_json(s: &str) -> Result<Self, AlphaNetError> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(AlphaNetError::Checkpoint(format!("unsupported format {} v{}", ck.format, ck.version)));
        }
        if ck.layer_sizes.len() != ck.layers.len() + 1 {
            return Err(AlphaNetError::Checkpoint("layer count does not match layer_sizes".into()));
        }
        let mut layers = Vec::with_capacity(ck.layers.len());
        for (k, l) in ck.layers.iter().enumerate() {
            let (inp, out) = (ck.layer_sizes[k], ck.layer_sizes[k + 1]);
            if l.weight.len() != out || l.weight.iter().any(|r| r.len() != inp) || l.bias.len() != out {
                return Err(AlphaNetError::Checkpoint(format!("layer {k} shape does not match {inp}->{out}")));
            }
            let rows: Vec<Vec<T>> = l.weight.iter().map(|r| r.iter().map(|&v| T::lit(v)).collect()).collect();
            layers.push(Layer {
                weight: Mat::from_rows(&rows),
                bias: l.bias.iter().map(|&v| T::lit(v)).collect(),
            });
        }
        if !(ck.epsilon > 0.0) {
            return Err(AlphaNetError::Checkpoint("epsilon must be positive".into()));
        }
        Ok(Self {
            params: MlpParams { layers },
            epsilon: T::lit(ck.epsilon),
            seed: ck.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    seed: u64,
    epsilon: f64,
    layers: Vec<CheckpointLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointLayer {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}
