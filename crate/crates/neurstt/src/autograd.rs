//! Reverse-mode differentiation over dense scalars, matrices and 3-D
//! tensors, restricted to the primitive set the separation loss needs,
//! plus the Adam parameter update.
//!
//! A [`Graph`] is an append-only arena. Values are computed eagerly when
//! an op is inserted, so insertion order is a topological order and
//! [`Graph::backward`] is a single reverse pass. One graph is built per
//! solver iteration and dropped afterwards.
//!
//! Gradient conventions that are not the textbook default:
//!
//! * `soft_threshold` propagates gradient wherever `|x| > v` and blocks
//!   it inside the dead zone, so the target loss trains the background
//!   representation through the thresholding step.
//! * `nuclear_norm_slices` uses the subgradient `U Vᵀ` per frontal
//!   slice, dropping singular directions below the rank tolerance.
//! * `abs_sum` uses `sign(0) = 0`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor3::{self, CompactSvd, Matrix, Tensor3, RANK_TOLERANCE};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Payload carried by a node: scalar, matrix or 3-D tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Value<T> {
    Scalar(T),
    Matrix(Matrix<T>),
    Tensor(Tensor3<T>),
}

impl<T: Scalar> Value<T> {
    pub fn as_slice(&self) -> &[T] {
        match self {
            Value::Scalar(s) => std::slice::from_ref(s),
            Value::Matrix(m) => m.data(),
            Value::Tensor(t) => t.data(),
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        match self {
            Value::Scalar(s) => std::slice::from_mut(s),
            Value::Matrix(m) => m.data_mut(),
            Value::Tensor(t) => t.data_mut(),
        }
    }

    pub fn len(&self) -> usize {
        self.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Value::Scalar(_) => Value::Scalar(T::zero()),
            Value::Matrix(m) => Value::Matrix(Matrix::zeros(m.rows(), m.cols())),
            Value::Tensor(t) => Value::Tensor(Tensor3::zeros(t.dims())),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Scalar(_), Value::Scalar(_)) => true,
            (Value::Matrix(a), Value::Matrix(b)) => a.shape() == b.shape(),
            (Value::Tensor(a), Value::Tensor(b)) => a.dims() == b.dims(),
            _ => false,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let mut out = self.clone();
        for v in out.as_mut_slice() {
            *v = f(*v);
        }
        out
    }

    fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::shape("elementwise op on mismatched shapes".to_string()));
        }
        let mut out = self.clone();
        for (o, &b) in out.as_mut_slice().iter_mut().zip(other.as_slice()) {
            *o = f(*o, b);
        }
        Ok(out)
    }

    fn accumulate(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.as_mut_slice().iter_mut().zip(other.as_slice()) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.as_slice().iter().all(|v| v.is_finite())
    }

    pub fn scalar(&self) -> Option<T> {
        match self {
            Value::Scalar(s) => Some(*s),
            _ => None,
        }
    }

    pub fn matrix(&self) -> Option<&Matrix<T>> {
        match self {
            Value::Matrix(m) => Some(m),
            _ => None,
        }
    }

    pub fn tensor(&self) -> Option<&Tensor3<T>> {
        match self {
            Value::Tensor(t) => Some(t),
            _ => None,
        }
    }
}

/// Elementwise nonlinearities available as graph primitives. `Step` is
/// the heaviside gate (derivative of relu); it carries no gradient of
/// its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Sin,
    Cos,
    Tanh,
    Step,
}

impl UnaryKind {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryKind::Sin => x.sin(),
            UnaryKind::Cos => x.cos(),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Step => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    ModeProduct {
        tensor: NodeId,
        matrix: NodeId,
        mode: usize,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    Unary(NodeId, UnaryKind),
    Mul(NodeId, NodeId),
    SoftThreshold(NodeId, T),
    AbsSum(NodeId),
    SquaredFrobenius(NodeId),
    NuclearNormSlices {
        input: NodeId,
        svds: Vec<CompactSvd<T>>,
    },
    Sum(NodeId),
}

struct Node<T> {
    op: Op<T>,
    value: Value<T>,
    requires_grad: bool,
}

/// Append-only computation graph with eager forward evaluation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Value<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.node(id).requires_grad
    }

    /// Inserts a leaf. Gradients are reported for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Value<T>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Value<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, v: T) -> NodeId {
        self.constant(Value::Scalar(v))
    }

    /// Forward value of `id`; values are memoized at insertion.
    pub fn value(&self, id: NodeId) -> &Value<T> {
        &self.node(id).value
    }

    /// Returns the memoized forward value, checking it is finite.
    pub fn evaluate(&self, root: NodeId) -> Result<&Value<T>> {
        let v = self.value(root);
        if !v.all_finite() {
            return Err(Error::non_finite(format!("node {} value is not finite", root.0)));
        }
        Ok(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (am, bm) = match (&self.node(a).value, &self.node(b).value) {
            (Value::Matrix(am), Value::Matrix(bm)) => (am, bm),
            _ => return Err(Error::usage("matmul expects two matrix nodes")),
        };
        let out = am.matmul(bm)?;
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::MatMul(a, b), Value::Matrix(out), rg))
    }

    pub fn mode_product(&mut self, tensor: NodeId, matrix: NodeId, mode: usize) -> Result<NodeId> {
        let (x, m) = match (&self.node(tensor).value, &self.node(matrix).value) {
            (Value::Tensor(x), Value::Matrix(m)) => (x, m),
            _ => return Err(Error::usage("mode_product expects (tensor, matrix)")),
        };
        let out = tensor3::mode_product(x, m, mode)?;
        let rg = self.needs_grad(tensor) || self.needs_grad(matrix);
        Ok(self.push(
            Op::ModeProduct { tensor, matrix, mode },
            Value::Tensor(out),
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.node(a).value.zip(&self.node(b).value, |x, y| x + y)?;
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let out = self.node(a).value.map(|x| x * c);
        let rg = self.needs_grad(a);
        self.push(Op::Scale(a, c), out, rg)
    }

    pub fn unary(&mut self, a: NodeId, kind: UnaryKind) -> NodeId {
        let out = self.node(a).value.map(|x| kind.apply(x));
        // The heaviside gate is piecewise constant: no gradient flows.
        let rg = self.needs_grad(a) && kind != UnaryKind::Step;
        self.push(Op::Unary(a, kind), out, rg)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryKind::Sin)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryKind::Cos)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.node(a).value.zip(&self.node(b).value, |x, y| x * y)?;
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn soft_threshold(&mut self, a: NodeId, level: T) -> Result<NodeId> {
        if level < T::zero() {
            return Err(Error::usage("soft-threshold level must be nonnegative"));
        }
        let out = self
            .node(a)
            .value
            .map(|x| x.signum() * (x.abs() - level).max(T::zero()));
        let rg = self.needs_grad(a);
        Ok(self.push(Op::SoftThreshold(a, level), out, rg))
    }

    pub fn abs_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self
            .node(a)
            .value
            .as_slice()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v.abs());
        self.check_scalar_finite(s, "abs_sum")?;
        let rg = self.needs_grad(a);
        Ok(self.push(Op::AbsSum(a), Value::Scalar(s), rg))
    }

    pub fn squared_frobenius(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self
            .node(a)
            .value
            .as_slice()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v);
        self.check_scalar_finite(s, "squared_frobenius")?;
        let rg = self.needs_grad(a);
        Ok(self.push(Op::SquaredFrobenius(a), Value::Scalar(s), rg))
    }

    /// Sum of per-frontal-slice nuclear norms of a tensor node. The thin
    /// SVDs are cached for the backward pass.
    pub fn nuclear_norm_slices(&mut self, a: NodeId) -> Result<NodeId> {
        let x = match &self.node(a).value {
            Value::Tensor(x) => x,
            _ => return Err(Error::usage("nuclear_norm_slices expects a tensor node")),
        };
        let n3 = x.dims().2;
        let mut total = T::zero();
        let mut svds = Vec::with_capacity(n3);
        for k in 0..n3 {
            let decomp = tensor3::svd_compact(&x.frame(k))?;
            total = decomp.s.iter().fold(total, |acc, &s| acc + s);
            svds.push(decomp);
        }
        self.check_scalar_finite(total, "nuclear_norm_slices")?;
        let rg = self.needs_grad(a);
        Ok(self.push(
            Op::NuclearNormSlices { input: a, svds },
            Value::Scalar(total),
            rg,
        ))
    }

    /// Sum of all entries, reducing to a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self
            .node(a)
            .value
            .as_slice()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.check_scalar_finite(s, "sum")?;
        let rg = self.needs_grad(a);
        Ok(self.push(Op::Sum(a), Value::Scalar(s), rg))
    }

    fn check_scalar_finite(&self, s: T, what: &str) -> Result<()> {
        if !s.is_finite() {
            return Err(Error::non_finite(format!("{what} produced a non-finite value")));
        }
        Ok(())
    }

    /// Reverse pass from a scalar root. Returns gradients for all leaves
    /// with `requires_grad`.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap<T>> {
        match self.node(root).value {
            Value::Scalar(_) => {}
            _ => return Err(Error::usage("backward requires a scalar root")),
        }
        let mut grads: Vec<Option<Value<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Value::Scalar(T::one()));

        for id in (0..=root.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(grad);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let g = grad.matrix().expect("matmul grad is a matrix");
                    if self.needs_grad(*a) {
                        let bt = self.node(*b).value.matrix().unwrap().transpose();
                        let da = g.matmul(&bt)?;
                        self.accumulate_into(&mut grads, *a, Value::Matrix(da));
                    }
                    if self.needs_grad(*b) {
                        let at = self.node(*a).value.matrix().unwrap().transpose();
                        let db = at.matmul(g)?;
                        self.accumulate_into(&mut grads, *b, Value::Matrix(db));
                    }
                }
                Op::ModeProduct { tensor, matrix, mode } => {
                    let g = grad.tensor().expect("mode_product grad is a tensor");
                    if self.needs_grad(*tensor) {
                        let mt = self.node(*matrix).value.matrix().unwrap().transpose();
                        let dx = tensor3::mode_product(g, &mt, *mode)?;
                        self.accumulate_into(&mut grads, *tensor, Value::Tensor(dx));
                    }
                    if self.needs_grad(*matrix) {
                        let xu = tensor3::unfold(self.node(*tensor).value.tensor().unwrap(), *mode)?;
                        let gu = tensor3::unfold(g, *mode)?;
                        let dm = gu.matmul(&xu.transpose())?;
                        self.accumulate_into(&mut grads, *matrix, Value::Matrix(dm));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad(*a) {
                        self.accumulate_into(&mut grads, *a, grad.clone());
                    }
                    if self.needs_grad(*b) {
                        self.accumulate_into(&mut grads, *b, grad.clone());
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs_grad(*a) {
                        self.accumulate_into(&mut grads, *a, grad.map(|x| x * *c));
                    }
                }
                Op::Unary(a, kind) => {
                    if self.needs_grad(*a) {
                        let input = &self.node(*a).value;
                        let da = match kind {
                            UnaryKind::Sin => grad.zip(input, |g, x| g * x.cos())?,
                            UnaryKind::Cos => grad.zip(input, |g, x| -g * x.sin())?,
                            UnaryKind::Tanh => grad.zip(input, |g, x| {
                                let t = x.tanh();
                                g * (T::one() - t * t)
                            })?,
                            UnaryKind::Step => continue,
                        };
                        self.accumulate_into(&mut grads, *a, da);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs_grad(*a) {
                        let da = grad.zip(&self.node(*b).value, |g, y| g * y)?;
                        self.accumulate_into(&mut grads, *a, da);
                    }
                    if self.needs_grad(*b) {
                        let db = grad.zip(&self.node(*a).value, |g, x| g * x)?;
                        self.accumulate_into(&mut grads, *b, db);
                    }
                }
                Op::SoftThreshold(a, level) => {
                    if self.needs_grad(*a) {
                        let da = grad.zip(&self.node(*a).value, |g, x| {
                            if x.abs() > *level {
                                g
                            } else {
                                T::zero()
                            }
                        })?;
                        self.accumulate_into(&mut grads, *a, da);
                    }
                }
                Op::AbsSum(a) => {
                    let g = grad.scalar().expect("abs_sum grad is scalar");
                    if self.needs_grad(*a) {
                        let da = self.node(*a).value.map(|x| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        });
                        self.accumulate_into(&mut grads, *a, da);
                    }
                }
                Op::SquaredFrobenius(a) => {
                    let g = grad.scalar().expect("squared_frobenius grad is scalar");
                    if self.needs_grad(*a) {
                        let two_g = g + g;
                        let da = self.node(*a).value.map(|x| two_g * x);
                        self.accumulate_into(&mut grads, *a, da);
                    }
                }
                Op::NuclearNormSlices { input, svds } => {
                    let g = grad.scalar().expect("nuclear_norm_slices grad is scalar");
                    if self.needs_grad(*input) {
                        let x = self.node(*input).value.tensor().unwrap();
                        let (n1, n2, n3) = x.dims();
                        let mut dx = Tensor3::zeros((n1, n2, n3));
                        for (k, decomp) in svds.iter().enumerate().take(n3) {
                            let s_max = decomp.s.first().copied().unwrap_or_else(T::zero);
                            let tol = s_max * T::from_f64_lossy(RANK_TOLERANCE);
                            for (c, &s) in decomp.s.iter().enumerate() {
                                if s <= tol {
                                    continue;
                                }
                                for i in 0..n1 {
                                    let ui = decomp.u.at(i, c);
                                    for j in 0..n2 {
                                        *dx.at_mut(i, j, k) += g * ui * decomp.v.at(j, c);
                                    }
                                }
                            }
                        }
                        self.accumulate_into(&mut grads, *input, Value::Tensor(dx));
                    }
                }
                Op::Sum(a) => {
                    let g = grad.scalar().expect("sum grad is scalar");
                    if self.needs_grad(*a) {
                        let da = self.node(*a).value.map(|_| g);
                        self.accumulate_into(&mut grads, *a, da);
                    }
                }
            }
        }

        let mut map = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[idx].take().unwrap_or_else(|| node.value.zeros_like());
                if !g.all_finite() {
                    return Err(Error::non_finite(format!("gradient of leaf {idx} is not finite")));
                }
                map.insert(idx, g);
            }
        }
        Ok(GradientMap { map })
    }

    fn accumulate_into(&self, grads: &mut [Option<Value<T>>], id: NodeId, contribution: Value<T>) {
        match &mut grads[id.0] {
            Some(existing) => existing.accumulate(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// Gradients for every `requires_grad` leaf of one backward pass.
#[derive(Debug)]
pub struct GradientMap<T> {
    map: HashMap<usize, Value<T>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, id: NodeId) -> Option<&Value<T>> {
        self.map.get(&id.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A named learnable value.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Value<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Value<T>) -> Self {
        Parameter {
            name: name.into(),
            value,
        }
    }
}

/// Adam hyperparameters. Weight decay is the coupled L2 form: `w * θ` is
/// added to the gradient before the moment updates.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub weight_decay: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn new(lr: T, weight_decay: T) -> Self {
        AdamConfig {
            lr,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            epsilon: T::from_f64_lossy(1e-8),
            weight_decay,
        }
    }
}

/// Per-parameter first/second moments and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig<T>,
    t: u64,
    m: Vec<Value<T>>,
    v: Vec<Value<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Parameter<T>], config: AdamConfig<T>) -> Self {
        AdamState {
            config,
            t: 0,
            m: params.iter().map(|p| p.value.zeros_like()).collect(),
            v: params.iter().map(|p| p.value.zeros_like()).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update with bias correction. `grads` is aligned with
    /// `params`.
    pub fn step(&mut self, params: &mut [Parameter<T>], grads: &[&Value<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::usage("adam step: parameter/gradient count mismatch"));
        }
        self.t += 1;
        let cfg = self.config;
        let bias1 = T::one() - cfg.beta1.powi(self.t as i32);
        let bias2 = T::one() - cfg.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if !grad.all_finite() {
                return Err(Error::non_finite(format!(
                    "gradient for parameter '{}' is not finite",
                    param.name
                )));
            }
            if !param.value.same_shape(grad) {
                return Err(Error::shape(format!(
                    "gradient shape mismatch for parameter '{}'",
                    param.name
                )));
            }
            let theta = param.value.as_mut_slice();
            let g = grad.as_slice();
            let ms = m.as_mut_slice();
            let vs = v.as_mut_slice();
            for idx in 0..theta.len() {
                let gi = g[idx] + cfg.weight_decay * theta[idx];
                ms[idx] = cfg.beta1 * ms[idx] + (T::one() - cfg.beta1) * gi;
                vs[idx] = cfg.beta2 * vs[idx] + (T::one() - cfg.beta2) * gi * gi;
                let m_hat = ms[idx] / bias1;
                let v_hat = vs[idx] / bias2;
                theta[idx] = theta[idx] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}
