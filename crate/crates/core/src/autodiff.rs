//! Define-by-run reverse-mode automatic differentiation over small dense
//! tensors.
//!
//! A [`Tape`] is an arena of nodes. Every operation appends a node holding its
//! value and a record of how it was computed; node ids are therefore already
//! in topological order and [`Tape::backward`] simply walks the arena from the
//! loss down to index zero, visiting each node once.
//!
//! Tensors are [`Mat`]s: scalars are 1x1, vectors are n x 1 columns.
//!
//! ```
//! use diffcbf::autodiff::Tape;
//! use diffcbf::linalg::Mat;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Mat::scalar(3.0));
//! let y = tape.square(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```
//!
//! Operations that need functionality outside the built-in set (the QP layer,
//! batched quadratic-form evaluation) implement [`CustomOp`] and are recorded
//! with [`Tape::custom`]; they then take part in the backward pass like any
//! built-in.

use thiserror::Error;

use crate::linalg::Mat;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("tape already consumed by a previous backward pass; record a new one")]
    AlreadyConsumed,
    #[error("tape was recorded without gradient tracking")]
    Untracked,
    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),
    #[error("custom op `{name}` failed: {reason}")]
    Custom { name: String, reason: String },
}

type Result<T, E = AutodiffError> = std::result::Result<T, E>;

/// A user-defined differentiable operation.
///
/// `backward` must return one vector-Jacobian product per input, each with the
/// shape of that input. Inputs that are not differentiable may get zeros.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &str;

    fn forward(&mut self, inputs: &[&Mat<T>]) -> Result<Mat<T>>;

    fn backward(&self, inputs: &[&Mat<T>], output: &Mat<T>, upstream: &Mat<T>) -> Result<Vec<Mat<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    ScaleBy(NodeId, NodeId),
    Offset(NodeId),
    Square(NodeId),
    Relu(NodeId),
    ClampMin(NodeId, T),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    L2NormSq(NodeId),
    Index(NodeId, usize),
    Slice(NodeId, usize),
    Stack(Vec<NodeId>),
    Concat(Vec<NodeId>),
    Custom(Vec<NodeId>, Box<dyn CustomOp<T>>),
}

struct Node<T: Real> {
    value: Mat<T>,
    op: Op<T>,
    /// Whether any leaf is upstream of this node.
    tracked: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    record: bool,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            consumed: false,
        }
    }

    /// A tape that computes values only. Every value is bitwise identical to
    /// what a recording tape would produce; `backward` fails.
    pub fn untracked() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
            consumed: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.item()
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, tracked: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        let op = if self.record { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            tracked: tracked && self.record,
        });
        id
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Mat<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat<T>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn constant_vec(&mut self, v: Vec<T>) -> NodeId {
        self.constant(Mat::column(v))
    }

    pub fn constant_scalar(&mut self, v: T) -> NodeId {
        self.constant(Mat::scalar(v))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::Shape { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<NodeId> {
        self.same_shape(op, a, b)?;
        let v = self.value(a).zip_map(self.value(b), f);
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, rec, t))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).scale(c);
        let t = self.tracked(a);
        self.push(v, Op::Scale(a, c), t)
    }

    /// Scalar node times tensor node.
    pub fn scale_by(&mut self, s: NodeId, a: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return Err(AutodiffError::Shape {
                op: "scale_by",
                lhs: self.shape(s),
                rhs: (1, 1),
            });
        }
        let sv = self.scalar(s);
        let v = self.value(a).scale(sv);
        let t = self.tracked(s) || self.tracked(a);
        Ok(self.push(v, Op::ScaleBy(s, a), t))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let t = self.tracked(a);
        self.push(v, Op::Offset(a), t)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -T::one())
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let t = self.tracked(a);
        self.push(v, Op::Square(a), t)
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let t = self.tracked(a);
        self.push(v, Op::Relu(a), t)
    }

    /// `max(a, floor)` elementwise; gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: NodeId, floor: T) -> NodeId {
        let v = self.value(a).map(|x| if x > floor { x } else { floor });
        let t = self.tracked(a);
        self.push(v, Op::ClampMin(a, floor), t)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).as_slice().iter().copied().sum();
        let t = self.tracked(a);
        self.push(Mat::scalar(s), Op::Sum(a), t)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("dot", a, b)?;
        let s = crate::linalg::dot(self.value(a).as_slice(), self.value(b).as_slice());
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Mat::scalar(s), Op::Dot(a, b), t))
    }

    pub fn matvec(&mut self, m: NodeId, x: NodeId) -> Result<NodeId> {
        let (sm, sx) = (self.shape(m), self.shape(x));
        if sx.1 != 1 || sm.1 != sx.0 {
            return Err(AutodiffError::Shape { op: "matvec", lhs: sm, rhs: sx });
        }
        let v = self.value(m).matvec(self.value(x).as_slice());
        let t = self.tracked(m) || self.tracked(x);
        Ok(self.push(Mat::column(v), Op::MatVec(m, x), t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(AutodiffError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let v = self.value(a).matmul(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::MatMul(a, b), t))
    }

    pub fn l2norm_sq(&mut self, a: NodeId) -> NodeId {
        let s = crate::linalg::norm_sq(self.value(a).as_slice());
        let t = self.tracked(a);
        self.push(Mat::scalar(s), Op::L2NormSq(a), t)
    }

    /// Element `i` (row-major) as a scalar node.
    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let n = self.value(a).len();
        if i >= n {
            return Err(AutodiffError::Shape {
                op: "index",
                lhs: self.shape(a),
                rhs: (i, 1),
            });
        }
        let v = self.value(a).as_slice()[i];
        let t = self.tracked(a);
        Ok(self.push(Mat::scalar(v), Op::Index(a, i), t))
    }

    /// Contiguous sub-vector `[start, start + len)`.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let n = self.value(a).len();
        if start + len > n {
            return Err(AutodiffError::Shape {
                op: "slice",
                lhs: self.shape(a),
                rhs: (start + len, 1),
            });
        }
        let v = self.value(a).as_slice()[start..start + len].to_vec();
        let t = self.tracked(a);
        Ok(self.push(Mat::column(v), Op::Slice(a, start), t))
    }

    /// Stacks scalar nodes into a column vector.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut v = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.shape(p) != (1, 1) {
                return Err(AutodiffError::Shape {
                    op: "stack",
                    lhs: self.shape(p),
                    rhs: (1, 1),
                });
            }
            v.push(self.scalar(p));
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Mat::column(v), Op::Stack(parts.to_vec()), t))
    }

    /// Concatenates column vectors.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut v = Vec::new();
        for &p in parts {
            if self.shape(p).1 != 1 {
                return Err(AutodiffError::Shape {
                    op: "concat",
                    lhs: self.shape(p),
                    rhs: (self.shape(p).0, 1),
                });
            }
            v.extend_from_slice(self.value(p).as_slice());
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Mat::column(v), Op::Concat(parts.to_vec()), t))
    }

    /// Records a custom operation. Its forward runs immediately.
    pub fn custom<O: CustomOp<T> + 'static>(&mut self, mut op: O, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            if i.0 >= self.nodes.len() {
                return Err(AutodiffError::UnknownNode(i.0));
            }
        }
        let out = {
            let vals: Vec<&Mat<T>> = inputs.iter().map(|&i| self.value(i)).collect();
            op.forward(&vals)?
        };
        let t = inputs.iter().any(|&i| self.tracked(i));
        Ok(self.push(out, Op::Custom(inputs.to_vec(), Box::new(op)), t))
    }

    /// Runs the reverse pass from a scalar `loss`. Accumulators start at zero;
    /// the tape may be differentiated only once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.record {
            return Err(AutodiffError::Untracked);
        }
        if self.consumed {
            return Err(AutodiffError::AlreadyConsumed);
        }
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(loss.0));
        }
        if self.shape(loss) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss)));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(T::one()));
        let mut contrib: Vec<(NodeId, Mat<T>)> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].as_ref() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            contrib.clear();
            self.local_vjp(i, g, &mut contrib)?;
            for (id, m) in contrib.drain(..) {
                if !self.nodes[id.0].tracked {
                    continue;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&m),
                    slot @ None => *slot = Some(m),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_vjp(&self, i: usize, g: &Mat<T>, out: &mut Vec<(NodeId, Mat<T>)>) -> Result<()> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scale(-T::one())));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.zip_map(val(*b), |x, y| x * y)));
                out.push((*b, g.zip_map(val(*a), |x, y| x * y)));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                out.push((*a, g.zip_map(bv, |x, y| x / y)));
                if self.tracked(*b) {
                    let ga = g.zip_map(&node.value, |x, q| x * q);
                    out.push((*b, ga.zip_map(bv, |x, y| -x / y)));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.scale(*c))),
            Op::ScaleBy(s, a) => {
                if self.tracked(*s) {
                    let gs = crate::linalg::dot(g.as_slice(), val(*a).as_slice());
                    out.push((*s, Mat::scalar(gs)));
                }
                out.push((*a, g.scale(val(*s).item())));
            }
            Op::Offset(a) => out.push((*a, g.clone())),
            Op::Square(a) => {
                let two = T::lit(2.0);
                out.push((*a, g.zip_map(val(*a), |x, y| two * x * y)));
            }
            Op::Relu(a) => out.push((*a, g.zip_map(val(*a), |x, y| if y > T::zero() { x } else { T::zero() }))),
            Op::ClampMin(a, floor) => {
                let f = *floor;
                out.push((*a, g.zip_map(val(*a), |x, y| if y > f { x } else { T::zero() })));
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                out.push((*a, Mat::from_vec(r, c, vec![g.item(); r * c])));
            }
            Op::Dot(a, b) => {
                let gi = g.item();
                out.push((*a, val(*b).scale(gi)));
                out.push((*b, val(*a).scale(gi)));
            }
            Op::MatVec(m, x) => {
                let (mv, xv) = (val(*m), val(*x));
                if self.tracked(*m) {
                    let gm = Mat::from_fn(mv.rows(), mv.cols(), |r, c| g.as_slice()[r] * xv.as_slice()[c]);
                    out.push((*m, gm));
                }
                if self.tracked(*x) {
                    out.push((*x, Mat::column(mv.tmatvec(g.as_slice()))));
                }
            }
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    out.push((*a, g.matmul(&val(*b).transpose())));
                }
                if self.tracked(*b) {
                    out.push((*b, val(*a).transpose().matmul(g)));
                }
            }
            Op::L2NormSq(a) => out.push((*a, val(*a).scale(T::lit(2.0) * g.item()))),
            Op::Index(a, k) => {
                let (r, c) = val(*a).shape();
                let mut m = Mat::zeros(r, c);
                m.as_mut_slice()[*k] = g.item();
                out.push((*a, m));
            }
            Op::Slice(a, start) => {
                let (r, c) = val(*a).shape();
                let mut m = Mat::zeros(r, c);
                m.as_mut_slice()[*start..*start + g.len()].copy_from_slice(g.as_slice());
                out.push((*a, m));
            }
            Op::Stack(parts) => {
                for (k, p) in parts.iter().enumerate() {
                    out.push((*p, Mat::scalar(g.as_slice()[k])));
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    out.push((*p, Mat::column(g.as_slice()[off..off + n].to_vec())));
                    off += n;
                }
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Mat<T>> = inputs.iter().map(|&id| val(id)).collect();
                let vjps = op.backward(&vals, &node.value, g)?;
                if vjps.len() != inputs.len() {
                    return Err(AutodiffError::Custom {
                        name: op.name().to_string(),
                        reason: format!("{} input gradients for {} inputs", vjps.len(), inputs.len()),
                    });
                }
                for ((id, gi), v) in inputs.iter().zip(vjps).zip(&vals) {
                    if gi.shape() != v.shape() {
                        return Err(AutodiffError::Shape {
                            op: "custom backward",
                            lhs: gi.shape(),
                            rhs: v.shape(),
                        });
                    }
                    out.push((*id, gi));
                }
            }
        }
        Ok(())
    }
}

/// Result of a backward pass: one accumulator per reached tracked node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Mat<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, or zeros of the given shape.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Mat<T> {
        self.get(id).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}
