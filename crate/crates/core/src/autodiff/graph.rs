//! Reverse-mode tape: a growable node list per graph, tensors as handles
//! into it, and a backward pass whose vector-Jacobian products are built out
//! of graph ops themselves — which is what lets `backward` with
//! `create_graph = true` produce gradients that are themselves
//! differentiable.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::autodiff::value::{self, Value};
use crate::error::{Error, Result};

// ── Ops ──────────────────────────────────────────────────────────────────

/// Public primitives accepted by [`Graph::apply`]. Parameterized variants
/// carry their attributes by value.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Exp,
    Log,
    Tanh,
    Gelu,
    Square,
    Sqrt,
    SoftmaxLast,
    MaxLast,
    L2NormLast,
    Sum,
    Mean,
    IndexSelect { axis: usize, indices: Vec<usize> },
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
}

/// Internal op tags recorded on nodes. Beyond the public primitives this
/// includes adjoint plumbing (SumTo/BroadcastTo, ScatterAdd, Permute,
/// SumLastKeepdim) that backward rules need as first-class ops.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Exp,
    Log,
    Tanh,
    Gelu,
    Square,
    Sqrt,
    SoftmaxLast,
    MaxLast { argmax: Arc<Vec<usize>> },
    L2NormLast,
    SumAll,
    MeanAll,
    SumLastKeepdim,
    IndexSelect { axis: usize, indices: Arc<Vec<usize>> },
    ScatterAdd { axis: usize, indices: Arc<Vec<usize>> },
    Concat { axis: usize },
    Reshape,
    BroadcastTo,
    SumTo,
    Permute { perm: Arc<Vec<usize>> },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Arc<Value>,
    requires_grad: bool,
}

struct GraphInner {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// A computation graph. Cloning the handle shares the same underlying tape.
/// Graphs hold `Rc` internals, so they are deliberately not `Send`/`Sync`;
/// parallel workers each build their own graph over shared `Value` data:
///
/// ```compile_fail
/// fn assert_send<T: Send>() {}
/// assert_send::<gradkd::autodiff::Graph>();
/// ```
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// A tensor handle: the computed value plus an optional attachment to the
/// graph node that produced it. Detached tensors are plain data.
#[derive(Clone)]
pub struct Tensor {
    value: Arc<Value>,
    node: Option<(Graph, usize)>,
}

impl Tensor {
    /// Wraps a raw value with no graph attachment.
    pub fn from_value(v: Value) -> Self {
        Tensor { value: Arc::new(v), node: None }
    }

    pub fn value(&self) -> &Value {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn item(&self) -> Result<f64> {
        self.value.item()
    }

    /// Copies the underlying value out.
    pub fn to_value(&self) -> Value {
        (*self.value).clone()
    }

    /// Same data, no graph attachment: a constant from the graph's view.
    pub fn detach(&self) -> Tensor {
        Tensor { value: self.value.clone(), node: None }
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// True when gradients will flow into this tensor on backward.
    pub fn requires_grad(&self) -> bool {
        match &self.node {
            Some((g, id)) => g.inner.borrow().nodes[*id].requires_grad,
            None => false,
        }
    }

    fn node_on(&self, g: &Graph) -> Result<Option<usize>> {
        match &self.node {
            None => Ok(None),
            Some((og, id)) => {
                if Rc::ptr_eq(&og.inner, &g.inner) {
                    Ok(Some(*id))
                } else {
                    Err(Error::Graph("tensor belongs to a different graph".into()))
                }
            }
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("attached", &self.is_attached())
            .finish()
    }
}

/// Gradients produced by [`Graph::backward`], queryable per tensor.
pub struct GradMap {
    graph: Graph,
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    /// Gradient of the backward output with respect to `t`. Tensors the
    /// output does not depend on get zeros of the right shape; tensors from
    /// another graph (or never attached) are an error.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let id = t
            .node_on(&self.graph)?
            .ok_or_else(|| Error::Graph("gradient queried for a detached tensor".into()))?;
        match self.grads.get(id) {
            Some(Some(g)) => Ok(g.clone()),
            _ => Ok(Tensor::from_value(Value::zeros(t.shape()))),
        }
    }

    /// Like [`GradMap::wrt`] but copies the value out.
    pub fn value_wrt(&self, t: &Tensor) -> Result<Value> {
        Ok(self.wrt(t)?.to_value())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A fresh graph with gradient recording enabled.
    pub fn new() -> Self {
        Graph { inner: Rc::new(RefCell::new(GraphInner { nodes: Vec::new(), grad_enabled: true })) }
    }

    /// A fresh graph with gradient recording disabled: every op returns a
    /// detached tensor and the tape never grows. Use for evaluation passes.
    pub fn eval() -> Self {
        Graph { inner: Rc::new(RefCell::new(GraphInner { nodes: Vec::new(), grad_enabled: false })) }
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    /// Runs `f` with gradient recording off, restoring the previous mode.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = std::mem::replace(&mut self.inner.borrow_mut().grad_enabled, false);
        let out = f();
        self.inner.borrow_mut().grad_enabled = prev;
        out
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Creates a leaf tensor. Leaves with `requires_grad` are the tensors
    /// gradients are usually queried for (parameters, probe inputs).
    pub fn leaf(&self, v: Value, requires_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let rg = requires_grad && inner.grad_enabled;
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: Arc::new(v),
            requires_grad: rg,
        });
        drop(inner);
        Tensor { value: self.inner.borrow().nodes[id].value.clone(), node: Some((self.clone(), id)) }
    }

    /// A detached constant scalar; handy for literals in expressions.
    pub fn scalar(&self, v: f64) -> Tensor {
        Tensor::from_value(Value::scalar(v))
    }

    /// A detached constant tensor.
    pub fn constant(&self, v: Value) -> Tensor {
        Tensor::from_value(v)
    }

    // ── Node plumbing ────────────────────────────────────────────────────

    /// Validates graph homogeneity, then either returns a detached result
    /// (grad off, or no differentiable input) or records a node.
    fn finish(&self, op: Op, inputs: &[&Tensor], v: Value) -> Result<Tensor> {
        let mut needs_node = false;
        for t in inputs {
            if let Some(id) = t.node_on(self)? {
                needs_node |= self.inner.borrow().nodes[id].requires_grad;
            }
        }
        if !self.inner.borrow().grad_enabled || !needs_node {
            return Ok(Tensor::from_value(v));
        }
        let mut ids = Vec::with_capacity(inputs.len());
        for t in inputs {
            // Detached operands are interned as constant leaves so backward
            // rules can reference them by node id.
            let id = match t.node_on(self)? {
                Some(id) => id,
                None => {
                    let mut inner = self.inner.borrow_mut();
                    let id = inner.nodes.len();
                    inner.nodes.push(Node {
                        op: Op::Leaf,
                        inputs: vec![],
                        value: t.value.clone(),
                        requires_grad: false,
                    });
                    id
                }
            };
            ids.push(id);
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let value = Arc::new(v);
        inner.nodes.push(Node { op, inputs: ids, value: value.clone(), requires_grad: true });
        Ok(Tensor { value, node: Some((self.clone(), id)) })
    }

    fn tensor_for(&self, id: usize) -> Tensor {
        Tensor { value: self.inner.borrow().nodes[id].value.clone(), node: Some((self.clone(), id)) }
    }

    // ── Elementwise and matrix ops ───────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let v = value::broadcast_binary("add", a.value(), b.value(), |x, y| x + y)?;
        self.finish(Op::Add, &[a, b], v)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let v = value::broadcast_binary("sub", a.value(), b.value(), |x, y| x - y)?;
        self.finish(Op::Sub, &[a, b], v)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let v = value::broadcast_binary("mul", a.value(), b.value(), |x, y| x * y)?;
        self.finish(Op::Mul, &[a, b], v)
    }

    /// Elementwise divide; IEEE semantics at zero denominators.
    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let v = value::broadcast_binary("div", a.value(), b.value(), |x, y| x / y)?;
        self.finish(Op::Div, &[a, b], v)
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let v = value::matmul(a.value(), b.value())?;
        self.finish(Op::MatMul, &[a, b], v)
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let v = value::map_unary(a.value(), f64::exp);
        self.finish(Op::Exp, &[a], v)
    }

    /// Natural log; rejects non-positive inputs.
    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = a.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain { op: "log", detail: format!("input {bad} is not positive") });
        }
        let v = value::map_unary(a.value(), f64::ln);
        self.finish(Op::Log, &[a], v)
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        let v = value::map_unary(a.value(), f64::tanh);
        self.finish(Op::Tanh, &[a], v)
    }

    /// Gaussian error linear unit, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self, a: &Tensor) -> Result<Tensor> {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let v = value::map_unary(a.value(), |x| {
            0.5 * x * (1.0 + (c * (x + GELU_CUBIC * x * x * x)).tanh())
        });
        self.finish(Op::Gelu, &[a], v)
    }

    pub fn square(&self, a: &Tensor) -> Result<Tensor> {
        let v = value::map_unary(a.value(), |x| x * x);
        self.finish(Op::Square, &[a], v)
    }

    /// Elementwise square root; rejects negative inputs.
    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = a.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain { op: "sqrt", detail: format!("input {bad} is negative") });
        }
        let v = value::map_unary(a.value(), f64::sqrt);
        self.finish(Op::Sqrt, &[a], v)
    }

    // ── Row-wise ops and reductions ──────────────────────────────────────

    /// Stable softmax over the last axis.
    pub fn softmax_last(&self, a: &Tensor) -> Result<Tensor> {
        let v = value::softmax_last(a.value())?;
        self.finish(Op::SoftmaxLast, &[a], v)
    }

    /// Max over the last axis (axis dropped). Ties take the first index;
    /// the subgradient routes through that element.
    pub fn max_last(&self, a: &Tensor) -> Result<Tensor> {
        let (v, argmax) = value::max_last(a.value())?;
        self.finish(Op::MaxLast { argmax: Arc::new(argmax) }, &[a], v)
    }

    /// Euclidean norm over the last axis, kept as size 1, with an epsilon
    /// inside the root so the gradient exists at zero vectors.
    pub fn l2norm_last(&self, a: &Tensor) -> Result<Tensor> {
        self.l2norm_last_eps(a, L2_EPS)
    }

    pub(crate) fn l2norm_last_eps(&self, a: &Tensor, eps: f64) -> Result<Tensor> {
        let v = value::l2norm_last(a.value(), eps)?;
        self.finish(Op::L2NormLast, &[a], v)
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let v = value::sum_all(a.value());
        self.finish(Op::SumAll, &[a], v)
    }

    /// Mean of all elements, producing a scalar.
    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        let v = value::mean_all(a.value())?;
        self.finish(Op::MeanAll, &[a], v)
    }

    /// Sum over the last axis, keeping it as size 1.
    pub(crate) fn sum_last_keepdim(&self, a: &Tensor) -> Result<Tensor> {
        let v = value::sum_last_keepdim(a.value())?;
        self.finish(Op::SumLastKeepdim, &[a], v)
    }

    // ── Structure ops ────────────────────────────────────────────────────

    pub fn index_select(&self, a: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
        let v = value::index_select(a.value(), axis, indices)?;
        self.finish(Op::IndexSelect { axis, indices: Arc::new(indices.to_vec()) }, &[a], v)
    }

    pub(crate) fn scatter_add(
        &self,
        a: &Tensor,
        axis: usize,
        indices: &[usize],
        dim: usize,
    ) -> Result<Tensor> {
        let v = value::scatter_add(a.value(), axis, indices, dim)?;
        self.finish(Op::ScatterAdd { axis, indices: Arc::new(indices.to_vec()) }, &[a], v)
    }

    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let values: Vec<&Value> = parts.iter().map(|t| t.value()).collect();
        let v = value::concat(&values, axis)?;
        self.finish(Op::Concat { axis }, parts, v)
    }

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let v = value::reshape(a.value(), shape)?;
        self.finish(Op::Reshape, &[a], v)
    }

    pub(crate) fn broadcast_to(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let v = value::broadcast_to(a.value(), shape)?;
        self.finish(Op::BroadcastTo, &[a], v)
    }

    pub(crate) fn sum_to(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if a.shape() == shape {
            return Ok(a.clone());
        }
        let v = value::sum_to(a.value(), shape)?;
        self.finish(Op::SumTo, &[a], v)
    }

    pub(crate) fn permute(&self, a: &Tensor, perm: &[usize]) -> Result<Tensor> {
        let v = value::permute(a.value(), perm)?;
        self.finish(Op::Permute { perm: Arc::new(perm.to_vec()) }, &[a], v)
    }

    pub(crate) fn transpose_last2(&self, a: &Tensor) -> Result<Tensor> {
        let nd = a.value().ndim();
        if nd < 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose_last2",
                detail: format!("needs ndim >= 2, shape is {:?}", a.shape()),
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    /// Applies a public primitive by tag. This is the uniform entry point
    /// the op-level tests drive; the named methods above are the same thing
    /// with better ergonomics.
    pub fn apply(&self, prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{prim:?} expects {n} input(s), got {}",
                    inputs.len()
                )))
            }
        };
        match prim {
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::Div => arity(2).and_then(|_| self.div(inputs[0], inputs[1])),
            Primitive::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            Primitive::Log => arity(1).and_then(|_| self.log(inputs[0])),
            Primitive::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            Primitive::Gelu => arity(1).and_then(|_| self.gelu(inputs[0])),
            Primitive::Square => arity(1).and_then(|_| self.square(inputs[0])),
            Primitive::Sqrt => arity(1).and_then(|_| self.sqrt(inputs[0])),
            Primitive::SoftmaxLast => arity(1).and_then(|_| self.softmax_last(inputs[0])),
            Primitive::MaxLast => arity(1).and_then(|_| self.max_last(inputs[0])),
            Primitive::L2NormLast => arity(1).and_then(|_| self.l2norm_last(inputs[0])),
            Primitive::Sum => arity(1).and_then(|_| self.sum(inputs[0])),
            Primitive::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            Primitive::IndexSelect { axis, indices } => {
                arity(1).and_then(|_| self.index_select(inputs[0], *axis, indices))
            }
            Primitive::Concat { axis } => self.concat(inputs, *axis),
            Primitive::Reshape { shape } => arity(1).and_then(|_| self.reshape(inputs[0], shape)),
        }
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse-mode gradients of a one-element `output` with respect to
    /// everything on the tape. With `create_graph` the returned gradients
    /// are themselves attached and differentiable (the vector-Jacobian
    /// products are recorded as ordinary ops), which is how gradient-of-
    /// gradient objectives are trained.
    pub fn backward(&self, output: &Tensor, create_graph: bool) -> Result<GradMap> {
        self.backward_impl(output, None, create_graph)
    }

    /// Like [`Graph::backward`] but only propagates adjoints along paths
    /// that can reach one of `targets`; the map is only meaningful for
    /// those tensors. Cuts the cost of inner gradient passes that need,
    /// say, just the embedding gradient.
    pub fn backward_wrt(
        &self,
        output: &Tensor,
        targets: &[&Tensor],
        create_graph: bool,
    ) -> Result<GradMap> {
        let mut ids = Vec::with_capacity(targets.len());
        for t in targets {
            let id = t
                .node_on(self)?
                .ok_or_else(|| Error::Graph("backward target is detached".into()))?;
            ids.push(id);
        }
        self.backward_impl(output, Some(&ids), create_graph)
    }

    fn backward_impl(
        &self,
        output: &Tensor,
        targets: Option<&[usize]>,
        create_graph: bool,
    ) -> Result<GradMap> {
        let out_id = output
            .node_on(self)?
            .ok_or_else(|| Error::Graph("backward from a detached tensor".into()))?;
        if output.value().numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a one-element output, shape is {:?}",
                output.shape()
            )));
        }

        // Which nodes lie on a path into a target? With no target filter,
        // every node is relevant.
        let relevant: Option<Vec<bool>> = targets.map(|ids| {
            let inner = self.inner.borrow();
            let mut flag = vec![false; out_id + 1];
            for &id in ids {
                if id <= out_id {
                    flag[id] = true;
                }
            }
            for i in 0..=out_id {
                if !flag[i] {
                    flag[i] = inner.nodes[i].inputs.iter().any(|&j| flag[j]);
                }
            }
            flag
        });

        let prev = std::mem::replace(&mut self.inner.borrow_mut().grad_enabled, create_graph);
        let result = self.propagate(out_id, relevant.as_deref());
        self.inner.borrow_mut().grad_enabled = prev;
        let grads = result?;
        Ok(GradMap { graph: self.clone(), grads })
    }

    fn propagate(&self, out_id: usize, relevant: Option<&[bool]>) -> Result<Vec<Option<Tensor>>> {
        let mut adj: Vec<Option<Tensor>> = vec![None; out_id + 1];
        adj[out_id] = Some(Tensor::from_value(Value::ones(
            self.inner.borrow().nodes[out_id].value.shape(),
        )));
        for i in (0..=out_id).rev() {
            let Some(g) = adj[i].clone() else { continue };
            let (op, inputs, rg) = {
                let inner = self.inner.borrow();
                let n = &inner.nodes[i];
                (n.op.clone(), n.inputs.clone(), n.requires_grad)
            };
            if !rg || matches!(op, Op::Leaf) {
                continue;
            }
            let in_t: Vec<Tensor> = inputs.iter().map(|&id| self.tensor_for(id)).collect();
            let out_t = self.tensor_for(i);
            let contribs = self.vjp(&op, &in_t, &out_t, &g)?;
            assert_eq!(contribs.len(), inputs.len(), "vjp arity mismatch");
            for (slot, c) in contribs.into_iter().enumerate() {
                let Some(c) = c else { continue };
                let id = inputs[slot];
                let wanted = {
                    let inner = self.inner.borrow();
                    inner.nodes[id].requires_grad
                        && relevant.map_or(true, |f| f[id])
                };
                if !wanted {
                    continue;
                }
                debug_assert_eq!(c.shape(), in_t[slot].shape(), "adjoint shape drift");
                adj[id] = Some(match adj[id].take() {
                    None => c,
                    Some(prev) => self.add(&prev, &c)?,
                });
            }
        }
        Ok(adj)
    }

    /// Per-op vector-Jacobian products, written in graph ops so they stay
    /// differentiable when recording is on. Returns one optional adjoint
    /// contribution per input slot.
    fn vjp(&self, op: &Op, inp: &[Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let gto = |t: &Tensor, target: &Tensor| -> Result<Tensor> {
            self.sum_to(t, target.shape())
        };
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(gto(g, &inp[0])?), Some(gto(g, &inp[1])?)],
            Op::Sub => {
                let neg = self.mul(g, &self.scalar(-1.0))?;
                vec![Some(gto(g, &inp[0])?), Some(gto(&neg, &inp[1])?)]
            }
            Op::Mul => {
                let ga = self.mul(g, &inp[1])?;
                let gb = self.mul(g, &inp[0])?;
                vec![Some(gto(&ga, &inp[0])?), Some(gto(&gb, &inp[1])?)]
            }
            Op::Div => {
                // out = a/b: d/da = 1/b, d/db = -out/b.
                let ga = self.div(g, &inp[1])?;
                let gb = self.mul(&self.mul(g, &self.div(out, &inp[1])?)?, &self.scalar(-1.0))?;
                vec![Some(gto(&ga, &inp[0])?), Some(gto(&gb, &inp[1])?)]
            }
            Op::MatMul => {
                let ga = self.matmul(g, &self.transpose_last2(&inp[1])?)?;
                let gb = self.matmul(&self.transpose_last2(&inp[0])?, g)?;
                vec![Some(gto(&ga, &inp[0])?), Some(gto(&gb, &inp[1])?)]
            }
            Op::Exp => vec![Some(self.mul(g, out)?)],
            Op::Log => vec![Some(self.div(g, &inp[0])?)],
            Op::Tanh => {
                let one_minus = self.sub(&self.scalar(1.0), &self.square(out)?)?;
                vec![Some(self.mul(g, &one_minus)?)]
            }
            Op::Gelu => {
                // Derivative rebuilt from the input so second order flows:
                // 0.5(1+t) + 0.5 x (1-t^2) c (1+3k x^2), t = tanh(c(x+k x^3)).
                let x = &inp[0];
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let x2 = self.square(x)?;
                let x3 = self.mul(&x2, x)?;
                let u = self.mul(
                    &self.scalar(c),
                    &self.add(x, &self.mul(&self.scalar(GELU_CUBIC), &x3)?)?,
                )?;
                let t = self.tanh(&u)?;
                let lin = self.mul(&self.scalar(0.5), &self.add(&self.scalar(1.0), &t)?)?;
                let sech2 = self.sub(&self.scalar(1.0), &self.square(&t)?)?;
                let poly = self.add(
                    &self.scalar(1.0),
                    &self.mul(&self.scalar(3.0 * GELU_CUBIC), &x2)?,
                )?;
                let slope = self.mul(
                    &self.mul(&self.scalar(0.5 * c), x)?,
                    &self.mul(&sech2, &poly)?,
                )?;
                vec![Some(self.mul(g, &self.add(&lin, &slope)?)?)]
            }
            Op::Square => {
                vec![Some(self.mul(g, &self.mul(&self.scalar(2.0), &inp[0])?)?)]
            }
            Op::Sqrt => {
                vec![Some(self.div(g, &self.mul(&self.scalar(2.0), out)?)?)]
            }
            Op::SoftmaxLast => {
                // dx = y * (g - sum(y*g, last)) using the computed output y.
                let yg = self.mul(out, g)?;
                let s = self.sum_last_keepdim(&yg)?;
                vec![Some(self.mul(out, &self.sub(g, &s)?)?)]
            }
            Op::MaxLast { argmax } => {
                // Route the adjoint into each row's (first) argmax slot.
                let in_shape = inp[0].shape();
                let d = *in_shape.last().unwrap();
                let mut mask = Value::zeros(in_shape);
                for (r, &j) in argmax.iter().enumerate() {
                    mask.data_mut()[r * d + j] = 1.0;
                }
                let mut keep = in_shape.to_vec();
                *keep.last_mut().unwrap() = 1;
                let gk = self.reshape(g, &keep)?;
                vec![Some(self.mul(&gk, &Tensor::from_value(mask))?)]
            }
            Op::L2NormLast => {
                // d||x||/dx = x / ||x|| (the eps inside the root keeps this
                // finite at zero), scaled by the kept-axis adjoint.
                let ratio = self.div(&inp[0], out)?;
                vec![Some(self.mul(g, &ratio)?)]
            }
            Op::SumAll => vec![Some(self.broadcast_to(g, inp[0].shape())?)],
            Op::MeanAll => {
                let n = inp[0].value().numel() as f64;
                let scaled = self.div(g, &self.scalar(n))?;
                vec![Some(self.broadcast_to(&scaled, inp[0].shape())?)]
            }
            Op::SumLastKeepdim => vec![Some(self.broadcast_to(g, inp[0].shape())?)],
            Op::IndexSelect { axis, indices } => {
                let dim = inp[0].shape()[*axis];
                vec![Some(self.scatter_add(g, *axis, indices, dim)?)]
            }
            Op::ScatterAdd { axis, indices } => {
                vec![Some(self.index_select(g, *axis, indices)?)]
            }
            Op::Concat { axis } => {
                let mut at = 0usize;
                let mut outs = Vec::with_capacity(inp.len());
                for t in inp {
                    let d = t.shape()[*axis];
                    let idx: Vec<usize> = (at..at + d).collect();
                    outs.push(Some(self.index_select(g, *axis, &idx)?));
                    at += d;
                }
                outs
            }
            Op::Reshape => vec![Some(self.reshape(g, inp[0].shape())?)],
            Op::BroadcastTo => vec![Some(self.sum_to(g, inp[0].shape())?)],
            Op::SumTo => vec![Some(self.broadcast_to(g, inp[0].shape())?)],
            Op::Permute { perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![Some(self.permute(g, &inv)?)]
            }
        })
    }
}

/// Cubic coefficient of the tanh-approximated gelu.
const GELU_CUBIC: f64 = 0.044715;

/// Epsilon added under the square root in `l2norm_last` so the gradient is
/// defined at exactly-zero rows.
pub const L2_EPS: f64 = 1e-12;
