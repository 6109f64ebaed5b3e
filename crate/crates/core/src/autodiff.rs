//! Forward- and reverse-mode differentiation over a closed operation set.
//!
//! A [`Tape`] evaluates primals eagerly as operations are recorded. Tangents
//! are produced afterwards by [`Tape::jvp`], a single forward sweep that takes
//! seed tangents for any recorded node: seeding a leaf is an input tangent,
//! seeding an intermediate node injects a perturbation at that activation.
//! [`Tape::backward`] is the matching vector-Jacobian sweep.
//!
//! Every operation carries a hand-written tangent rule and adjoint rule.

use crate::error::{Error, Result};
use crate::losses;
use crate::tensor::{grouped_dims, grouped_matmul, Scalar, Tensor};

/// Variance floor used by every normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How tangents and adjoints pass through a normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormGrad {
    /// Exact derivative of `(x - mean) / sqrt(var + eps)`.
    #[default]
    Exact,
    /// Only the `1 / sqrt(var + eps)` scaling; centering and variance terms dropped.
    NoGrad,
}

impl std::str::FromStr for NormGrad {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(NormGrad::Exact),
            "no-grad" => Ok(NormGrad::NoGrad),
            _ => Err(Error::Config(format!("unknown normalization gradient {s:?} (exact | no-grad)"))),
        }
    }
}

/// A primal value paired with a tangent of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual<T: Scalar = f64> {
    pub primal: Tensor<T>,
    pub tangent: Tensor<T>,
}

impl<T: Scalar> Dual<T> {
    pub fn new(primal: Tensor<T>, tangent: Tensor<T>) -> Result<Self> {
        primal.expect_same_shape(&tangent)?;
        Ok(Dual { primal, tangent })
    }

    pub fn constant(primal: Tensor<T>) -> Self {
        let tangent = Tensor::zeros(primal.shape().to_vec());
        Dual { primal, tangent }
    }
}

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupLinear { x: Var, w: Var, b: Option<Var> },
    Normalize { x: Var, mode: NormGrad, inv: Vec<T> },
    Relu { x: Var },
    Tanh { x: Var },
    Square { x: Var },
    Reshape { x: Var },
    SwapAxes { x: Var, a: usize, b: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    MulConst { x: Var, c: Tensor<T> },
    MeanAxis { x: Var, axis: usize },
    BroadcastAxis { x: Var, axis: usize, count: usize },
    Sum { x: Var },
    StopGradient,
    SoftmaxXent { logits: Var, labels: Tensor<T>, probs: Tensor<T> },
    FusedLocalXent { x: Var, w: Var, b: Var, labels: Tensor<T>, probs: Tensor<T> },
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation with eager primals.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Per-node tangents from a [`Tape::jvp`] sweep; `None` means identically zero.
#[derive(Clone, Debug)]
pub struct Tangents<T: Scalar> {
    inner: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Tangents<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.inner[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.inner[v.0].take()
    }
}

/// Per-node adjoints from [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Grads<T: Scalar> {
    inner: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.inner[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.inner[v.0].take()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input or parameter. Gradients flow into it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// `x · w + b` contracting the last axis of `x` with `w: [c, d]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let y = linear_forward(xv, wv, b.map(|b| self.value(b)))?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(y, Op::Linear { x, w, b }, ng))
    }

    /// Grouped affine map on `[..., G, D]` with `w: [G, D, E]`, `b: [G, E]`.
    pub fn group_linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = grouped_matmul(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(y, Op::GroupLinear { x, w, b }, ng))
    }

    /// Normalizes over the last axis with eps = 1e-5.
    pub fn normalize(&mut self, x: Var, mode: NormGrad) -> Var {
        let (y, inv) = normalize_forward(self.value(x), T::from_f64_lossy(NORM_EPS));
        let ng = self.ng(x);
        self.push(y, Op::Normalize { x, mode, inv }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(y, Op::Relu { x }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(y, Op::Tanh { x }, ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * v);
        let ng = self.ng(x);
        self.push(y, Op::Square { x }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::Reshape { x }, ng))
    }

    pub fn swap_axes(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let y = self.value(x).swap_axes(a, b)?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::SwapAxes { x, a, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(y, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(y, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(y, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).scale(c);
        let ng = self.ng(x);
        self.push(y, Op::Scale { x, c }, ng)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let y = self.value(x).mul(&c)?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::MulConst { x, c }, ng))
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = mean_axis_keep(self.value(x), axis)?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::MeanAxis { x, axis }, ng))
    }

    /// Repeats an extent-1 `axis` `count` times.
    pub fn broadcast_axis(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        let y = broadcast_axis(self.value(x), axis, count)?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::BroadcastAxis { x, axis, count }, ng))
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(y, Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Identity on primals; blocks tangents and adjoints.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let y = self.value(x).clone();
        self.push(y, Op::StopGradient, false)
    }

    /// Cross-entropy `-Σ_k labels_k · log_softmax(logits)_k` over the last axis.
    ///
    /// `labels` has the shape of `logits`; the output drops the last axis.
    pub fn softmax_xent(&mut self, logits: Var, labels: Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != labels.shape() {
            return Err(Error::Shape(format!(
                "logits {:?} vs labels {:?}",
                lv.shape(),
                labels.shape()
            )));
        }
        let (loss, probs) = softmax_xent_forward(lv, &labels);
        let ng = self.ng(logits);
        Ok(self.push(loss, Op::SoftmaxXent { logits, labels, probs }, ng))
    }

    /// Replicated local cross-entropy computed once and copied to `[N, P, G]`.
    ///
    /// `x: [N, P, G, D]`, `w: [G·D, K]`, `b: [K]`, `labels: [N, K]`.
    pub fn fused_local_xent(&mut self, x: Var, w: Var, b: Var, labels: Tensor<T>) -> Result<Var> {
        let fwd = losses::fused_local_xent_forward(self.value(x), self.value(w), self.value(b), &labels)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(fwd.loss, Op::FusedLocalXent { x, w, b, labels, probs: fwd.probs }, ng))
    }

    /// Forward tangent sweep.
    ///
    /// Each seed is added to the tangent its node would otherwise carry, so
    /// seeding a non-leaf node injects a perturbation at that activation.
    pub fn jvp(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Tangents<T>> {
        let mut seed_of: Vec<Option<&Tensor<T>>> = vec![None; self.nodes.len()];
        for (v, s) in seeds {
            if s.shape() != self.shape(*v) {
                return Err(Error::Shape(format!(
                    "tangent seed {:?} for node of shape {:?}",
                    s.shape(),
                    self.shape(*v)
                )));
            }
            if seed_of[v.0].is_some() {
                return Err(Error::Config(format!("node {} seeded twice", v.0)));
            }
            seed_of[v.0] = Some(s);
        }
        let mut tan: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let t = self.tangent_rule(node, &tan)?;
            let t = match (t, seed_of[i]) {
                (t, None) => t,
                (None, Some(s)) => Some(s.clone()),
                (Some(mut t), Some(s)) => {
                    t.axpy(T::one(), s)?;
                    Some(t)
                }
            };
            tan.push(t);
        }
        Ok(Tangents { inner: tan })
    }

    fn tangent_rule(&self, node: &Node<T>, tan: &[Option<Tensor<T>>]) -> Result<Option<Tensor<T>>> {
        let t = |v: Var| tan[v.0].as_ref();
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf | Op::StopGradient => None,
            Op::Linear { x, w, b } => {
                let mut acc: Option<Tensor<T>> = None;
                if let Some(tx) = t(*x) {
                    acc = Some(linear_forward(tx, val(*w), None)?);
                }
                if let Some(tw) = t(*w) {
                    acc = add_opt(acc, linear_forward(val(*x), tw, None)?)?;
                }
                if let Some(tb) = b.and_then(t) {
                    let mut base = acc.unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                    add_rowwise(&mut base, tb);
                    acc = Some(base);
                }
                acc
            }
            Op::GroupLinear { x, w, b } => {
                let mut acc: Option<Tensor<T>> = None;
                if let Some(tx) = t(*x) {
                    acc = Some(grouped_matmul(tx, val(*w), None)?);
                }
                if let Some(tw) = t(*w) {
                    acc = add_opt(acc, grouped_matmul(val(*x), tw, None)?)?;
                }
                if let Some(tb) = b.and_then(t) {
                    let mut base = acc.unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                    add_rowwise(&mut base, tb);
                    acc = Some(base);
                }
                acc
            }
            Op::Normalize { x, mode, inv } => t(*x).map(|tx| normalize_tangent(&node.value, inv, tx, *mode)),
            Op::Relu { x } => t(*x).map(|tx| relu_mask_apply(val(*x), tx)),
            Op::Tanh { x } => t(*x).map(|tx| {
                let mut o = tx.clone();
                for (o, &y) in o.data_mut().iter_mut().zip(node.value.data()) {
                    *o = *o * (T::one() - y * y);
                }
                o
            }),
            Op::Square { x } => match t(*x) {
                Some(tx) => Some(tx.zip_map(val(*x), |d, v| (v + v) * d)?),
                None => None,
            },
            Op::Reshape { x } => match t(*x) {
                Some(tx) => Some(tx.reshape(node.value.shape().to_vec())?),
                None => None,
            },
            Op::SwapAxes { x, a, b } => match t(*x) {
                Some(tx) => Some(tx.swap_axes(*a, *b)?),
                None => None,
            },
            Op::Add { a, b } => match (t(*a), t(*b)) {
                (None, None) => None,
                (Some(ta), None) => Some(ta.clone()),
                (None, Some(tb)) => Some(tb.clone()),
                (Some(ta), Some(tb)) => Some(ta.add(tb)?),
            },
            Op::Sub { a, b } => match (t(*a), t(*b)) {
                (None, None) => None,
                (Some(ta), None) => Some(ta.clone()),
                (None, Some(tb)) => Some(tb.scale(-T::one())),
                (Some(ta), Some(tb)) => Some(ta.sub(tb)?),
            },
            Op::Mul { a, b } => {
                let mut acc = None;
                if let Some(ta) = t(*a) {
                    acc = Some(ta.mul(val(*b))?);
                }
                if let Some(tb) = t(*b) {
                    acc = add_opt(acc, val(*a).mul(tb)?)?;
                }
                acc
            }
            Op::Scale { x, c } => t(*x).map(|tx| tx.scale(*c)),
            Op::MulConst { x, c } => match t(*x) {
                Some(tx) => Some(tx.mul(c)?),
                None => None,
            },
            Op::MeanAxis { x, axis } => match t(*x) {
                Some(tx) => Some(mean_axis_keep(tx, *axis)?),
                None => None,
            },
            Op::BroadcastAxis { x, axis, count } => match t(*x) {
                Some(tx) => Some(broadcast_axis(tx, *axis, *count)?),
                None => None,
            },
            Op::Sum { x } => t(*x).map(|tx| Tensor::scalar(tx.sum())),
            Op::SoftmaxXent { logits, labels, probs } => {
                t(*logits).map(|tl| softmax_xent_tangent(probs, labels, tl))
            }
            Op::FusedLocalXent { x, w, b, labels, probs } => {
                if t(*x).is_none() && t(*w).is_none() && t(*b).is_none() {
                    None
                } else {
                    Some(losses::fused_local_xent_jvp(
                        val(*x),
                        val(*w),
                        labels,
                        probs,
                        t(*x),
                        t(*w),
                        t(*b),
                    )?)
                }
            }
        })
    }

    /// Reverse sweep from `root` with cotangent `seed` (same shape as the root).
    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        if seed.shape() != self.shape(root) {
            return Err(Error::Shape(format!(
                "cotangent {:?} for root of shape {:?}",
                seed.shape(),
                self.shape(root)
            )));
        }
        let mut g: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        g[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let gy = match g[i].take() {
                Some(gy) => gy,
                None => continue,
            };
            if matches!(node.op, Op::Leaf) {
                g[i] = Some(gy);
                continue;
            }
            for (v, gv) in self.adjoint_rule(node, &gy)? {
                if !self.ng(v) {
                    continue;
                }
                g[v.0] = add_opt(g[v.0].take(), gv)?;
            }
            // Interior adjoints are dropped once propagated.
        }
        Ok(Grads { inner: g })
    }

    fn adjoint_rule(&self, node: &Node<T>, gy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Linear { x, w, b } => {
                let (rows, d) = gy.rows_cols();
                let wv = val(*w);
                let c = wv.shape()[0];
                if self.ng(*x) {
                    let g2 = gy.reshape([rows, d])?;
                    let gx = g2.matmul_nt(wv)?.into_reshape(val(*x).shape().to_vec())?;
                    out.push((*x, gx));
                }
                if self.ng(*w) {
                    let x2 = val(*x).reshape([rows, c])?;
                    let g2 = gy.reshape([rows, d])?;
                    out.push((*w, x2.matmul_tn(&g2)?));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        out.push((*b, gy.sum_rows()));
                    }
                }
            }
            Op::GroupLinear { x, w, b } => {
                if self.ng(*x) {
                    out.push((*x, grouped_input_grad(gy, val(*w))?));
                }
                if self.ng(*w) {
                    out.push((*w, grouped_weight_grad(val(*x), gy)?));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let (_, groups, e) = grouped_dims(gy)?;
                        out.push((*b, gy.sum_rows_grouped(groups, e)));
                    }
                }
            }
            Op::Normalize { x, mode, inv } => out.push((*x, normalize_tangent(&node.value, inv, gy, *mode))),
            Op::Relu { x } => out.push((*x, relu_mask_apply(val(*x), gy))),
            Op::Tanh { x } => {
                let gx = gy.zip_map(&node.value, |g, y| g * (T::one() - y * y))?;
                out.push((*x, gx));
            }
            Op::Square { x } => out.push((*x, gy.zip_map(val(*x), |g, v| (v + v) * g)?)),
            Op::Reshape { x } => out.push((*x, gy.reshape(val(*x).shape().to_vec())?)),
            Op::SwapAxes { x, a, b } => out.push((*x, gy.swap_axes(*a, *b)?)),
            Op::Add { a, b } => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.clone()));
            }
            Op::Sub { a, b } => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.scale(-T::one())));
            }
            Op::Mul { a, b } => {
                out.push((*a, gy.mul(val(*b))?));
                out.push((*b, gy.mul(val(*a))?));
            }
            Op::Scale { x, c } => out.push((*x, gy.scale(*c))),
            Op::MulConst { x, c } => out.push((*x, gy.mul(c)?)),
            Op::MeanAxis { x, axis } => {
                let n = val(*x).shape()[*axis];
                let gx = broadcast_axis(gy, *axis, n)?.scale(T::one() / T::from_usize(n).unwrap());
                out.push((*x, gx));
            }
            Op::BroadcastAxis { x, axis, count } => {
                let gx = mean_axis_keep(gy, *axis)?.scale(T::from_usize(*count).unwrap());
                out.push((*x, gx));
            }
            Op::Sum { x } => out.push((*x, Tensor::full(val(*x).shape().to_vec(), gy.item()))),
            Op::SoftmaxXent { logits, labels, probs } => {
                out.push((*logits, softmax_xent_adjoint(probs, labels, gy)));
            }
            Op::FusedLocalXent { x, w, b, labels, probs } => {
                let adj = losses::fused_local_xent_vjp(val(*x), val(*w), labels, probs, gy)?;
                out.push((*x, adj.dx));
                out.push((*w, adj.dw));
                out.push((*b, adj.db));
            }
        }
        Ok(out)
    }
}

fn add_opt<T: Scalar>(acc: Option<Tensor<T>>, t: Tensor<T>) -> Result<Option<Tensor<T>>> {
    Ok(Some(match acc {
        None => t,
        Some(mut a) => {
            a.axpy(T::one(), &t)?;
            a
        }
    }))
}

/// Adds `b` (shape = trailing axes of `y`) to every leading index of `y`.
fn add_rowwise<T: Scalar>(y: &mut Tensor<T>, b: &Tensor<T>) {
    let c = b.len();
    for row in y.data_mut().chunks_mut(c) {
        for (o, &v) in row.iter_mut().zip(b.data()) {
            *o = *o + v;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Sums `[..., G, E]` over leading axes into `[G, E]`.
    pub fn sum_rows_grouped(&self, groups: usize, e: usize) -> Tensor<T> {
        let mut out = Tensor::zeros([groups, e]);
        for row in self.data().chunks(groups * e) {
            for (o, &v) in out.data_mut().iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        out
    }
}

pub(crate) fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (c, d) = match w.shape() {
        [c, d] => (*c, *d),
        s => return Err(Error::Shape(format!("linear weight must be a matrix, got {:?}", s))),
    };
    if x.last_dim() != c || x.ndim() == 0 {
        return Err(Error::Shape(format!("linear input {:?} vs weight {:?}", x.shape(), w.shape())));
    }
    if let Some(b) = b {
        if b.shape() != [d] {
            return Err(Error::Shape(format!("linear bias {:?}, expected [{d}]", b.shape())));
        }
    }
    let rows = x.len() / c;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d;
    let mut y = Tensor::zeros(shape);
    if let Some(b) = b {
        add_rowwise(&mut y, b);
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    crate::tensor::gemm_into(false, false, rows, c, d, x.data(), w.data(), T::one(), beta, y.data_mut());
    Ok(y)
}

/// `gx[r, g, :] = gy[r, g, :] · w[g]ᵀ`.
pub(crate) fn grouped_input_grad<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, groups, e) = grouped_dims(gy)?;
    let d = w.shape()[1];
    let mut shape = gy.shape().to_vec();
    *shape.last_mut().unwrap() = d;
    let mut gx = Tensor::zeros(shape);
    for g in 0..groups {
        T::gemm(
            rows,
            e,
            d,
            T::one(),
            &gy.data()[g * e..],
            (groups * e) as isize,
            1,
            &w.data()[g * d * e..],
            1,
            e as isize,
            T::zero(),
            &mut gx.data_mut()[g * d..],
            (groups * d) as isize,
            1,
        );
    }
    Ok(gx)
}

/// `gw[g] = Σ_r x[r, g, :]ᵀ gy[r, g, :]`.
pub(crate) fn grouped_weight_grad<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, groups, d) = grouped_dims(x)?;
    let (rows2, groups2, e) = grouped_dims(gy)?;
    if rows != rows2 || groups != groups2 {
        return Err(Error::Shape(format!("grouped grad {:?} vs {:?}", x.shape(), gy.shape())));
    }
    let mut gw = Tensor::zeros([groups, d, e]);
    for g in 0..groups {
        T::gemm(
            d,
            rows,
            e,
            T::one(),
            &x.data()[g * d..],
            1,
            (groups * d) as isize,
            &gy.data()[g * e..],
            (groups * e) as isize,
            1,
            T::zero(),
            &mut gw.data_mut()[g * d * e..],
            e as isize,
            1,
        );
    }
    Ok(gw)
}

/// Row-wise `(x - mean) / sqrt(var + eps)` over the last axis; also returns the
/// per-row inverse scale.
pub fn normalize_forward<T: Scalar>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let d = x.last_dim().max(1);
    let dn = T::from_usize(d).unwrap();
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(x.len() / d);
    for row in y.data_mut().chunks_mut(d) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        inv.push(r);
    }
    (y, inv)
}

/// Tangent (or, by self-adjointness, cotangent) of the row normalization.
///
/// Exact: `r · (dx - mean(dx) - y · mean(y · dx))`. NoGrad: `r · dx`.
pub fn normalize_tangent<T: Scalar>(y: &Tensor<T>, inv: &[T], dx: &Tensor<T>, mode: NormGrad) -> Tensor<T> {
    let d = y.last_dim().max(1);
    let dn = T::from_usize(d).unwrap();
    let mut out = dx.clone();
    for ((orow, yrow), &r) in out.data_mut().chunks_mut(d).zip(y.data().chunks(d)).zip(inv) {
        match mode {
            NormGrad::NoGrad => {
                for o in orow.iter_mut() {
                    *o = *o * r;
                }
            }
            NormGrad::Exact => {
                let m = orow.iter().copied().sum::<T>() / dn;
                let my = orow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / dn;
                for (o, &yy) in orow.iter_mut().zip(yrow) {
                    *o = r * (*o - m - yy * my);
                }
            }
        }
    }
    out
}

fn relu_mask_apply<T: Scalar>(pre: &Tensor<T>, t: &Tensor<T>) -> Tensor<T> {
    let mut o = t.clone();
    for (o, &p) in o.data_mut().iter_mut().zip(pre.data()) {
        if p <= T::zero() {
            *o = T::zero();
        }
    }
    o
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {:?}", shape)));
    }
    Ok((shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product()))
}

pub(crate) fn mean_axis_keep<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    let mut out = vec![T::zero(); outer * inner];
    let scale = T::one() / T::from_usize(n.max(1)).unwrap();
    for o in 0..outer {
        for k in 0..n {
            let src = &x.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    for v in out.iter_mut() {
        *v = *v * scale;
    }
    Tensor::new(shape, out)
}

pub(crate) fn broadcast_axis<T: Scalar>(x: &Tensor<T>, axis: usize, count: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    if n != 1 {
        return Err(Error::Shape(format!("broadcast axis {axis} of {:?} must have extent 1", x.shape())));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = count;
    let mut out = Vec::with_capacity(outer * count * inner);
    for o in 0..outer {
        let src = &x.data()[o * inner..(o + 1) * inner];
        for _ in 0..count {
            out.extend_from_slice(src);
        }
    }
    Tensor::new(shape, out)
}

/// Log-sum-exp stabilized cross-entropy; returns (loss, softmax).
pub fn softmax_xent_forward<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let k = logits.last_dim().max(1);
    let rows = logits.len() / k;
    let mut loss = Vec::with_capacity(rows);
    let mut probs = logits.clone();
    for (prow, trow) in probs.data_mut().chunks_mut(k).zip(labels.data().chunks(k)) {
        let m = prow.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + prow.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        let mut l = T::zero();
        for (p, &t) in prow.iter_mut().zip(trow) {
            let logp = *p - lse;
            l = l - t * logp;
            *p = logp.exp();
        }
        loss.push(l);
    }
    let shape = logits.shape()[..logits.ndim().saturating_sub(1)].to_vec();
    (Tensor::new(shape, loss).expect("row count matches"), probs)
}

fn softmax_xent_tangent<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>, dl: &Tensor<T>) -> Tensor<T> {
    let k = probs.last_dim().max(1);
    let out: Vec<T> = probs
        .data()
        .chunks(k)
        .zip(labels.data().chunks(k))
        .zip(dl.data().chunks(k))
        .map(|((p, t), d)| {
            let mass: T = t.iter().copied().sum();
            p.iter().zip(t).zip(d).map(|((&p, &t), &d)| (p * mass - t) * d).sum()
        })
        .collect();
    Tensor::new(probs.shape()[..probs.ndim() - 1].to_vec(), out).expect("row count matches")
}

fn softmax_xent_adjoint<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let k = probs.last_dim().max(1);
    let mut out = probs.clone();
    for ((orow, trow), &gv) in out.data_mut().chunks_mut(k).zip(labels.data().chunks(k)).zip(g.data()) {
        let mass: T = trow.iter().copied().sum();
        for (o, &t) in orow.iter_mut().zip(trow) {
            *o = gv * (*o * mass - t);
        }
    }
    out
}

/// `(f(x), J_f(x) · v)` with one recorded pass and one tangent sweep.
pub fn jvp<T, F>(f: F, x: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
{
    x.expect_same_shape(v)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let y = f(&mut tape, xv)?;
    let tans = tape.jvp(&[(xv, v.clone())])?;
    let ty = tans.get(y).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(y).to_vec()));
    Ok((tape.value(y).clone(), ty))
}

/// `uᵀ · J_f(x)`.
pub fn vjp<T, F>(f: F, x: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let mut grads = tape.backward(y, u.clone())?;
    Ok(grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

/// ReLU whose tangent is kept only where `mask_source > 0`.
///
/// With `mask_source` the pre-activation of the same site this is the exact
/// ReLU derivative; it also zeroes perturbations on inactive units.
pub fn jvp_relu_sparse<T: Scalar>(z: &Dual<T>, mask_source: &Tensor<T>) -> Result<Dual<T>> {
    z.primal.expect_same_shape(mask_source)?;
    Ok(Dual {
        primal: z.primal.map(|v| v.max(T::zero())),
        tangent: relu_mask_apply(mask_source, &z.tangent),
    })
}

/// Normalization along `axis` with its tangent.
pub fn jvp_normalize<T: Scalar>(x: &Dual<T>, axis: usize, eps: f64, mode: NormGrad) -> Result<Dual<T>> {
    let nd = x.primal.ndim();
    if axis >= nd {
        return Err(Error::Shape(format!("axis {axis} out of range for {:?}", x.primal.shape())));
    }
    let last = nd - 1;
    let (p, t) = if axis == last {
        (x.primal.clone(), x.tangent.clone())
    } else {
        (x.primal.swap_axes(axis, last)?, x.tangent.swap_axes(axis, last)?)
    };
    let (y, inv) = normalize_forward(&p, T::from_f64_lossy(eps));
    let ty = normalize_tangent(&y, &inv, &t, mode);
    if axis == last {
        Ok(Dual { primal: y, tangent: ty })
    } else {
        Ok(Dual { primal: y.swap_axes(axis, last)?, tangent: ty.swap_axes(axis, last)? })
    }
}
