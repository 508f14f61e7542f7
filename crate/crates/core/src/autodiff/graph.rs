use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Clamp range applied to every log-variance before exponentiation.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Param,
    Constant,
    Op,
}

#[derive(Debug)]
enum Op {
    None,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Abs(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    L2Norm(usize),
    CrossEntropyRows(usize, Vec<usize>),
    Slice(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    kind: Kind,
    needs_grad: bool,
}

/// Recording tape. Nodes are appended in evaluation order, so every node's
/// inputs precede it.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(Error::ForeignNode);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, kind: Kind, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op, kind, needs_grad });
        Var { graph: self.id, index }
    }

    fn push_op(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(value, op, Kind::Op, needs_grad))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "param" });
        }
        Ok(self.push(value, Op::None, Kind::Param, true))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::None, Kind::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "var from another graph");
        &self.nodes[v.index].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        self.push_op("matmul", out, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.gemm(&self.nodes[ib].value, false, true)?;
        self.push_op("matmul_t", out, Op::MatMulT(ia, ib), &[ia, ib])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia]
            .value
            .zip_map(&self.nodes[ib].value, f)
            .map_err(|_| {
                Error::shape(
                    name,
                    format!("{:?} vs {:?}", self.nodes[ia].value.shape(), self.nodes[ib].value.shape()),
                )
            })?;
        self.push_op(name, out, op(ia, ib), &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f);
        self.push_op(name, out, op, &[ia])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("neg", a, |x| -x, Op::Neg(ia))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("scale", a, |x| c * x, Op::Scale(ia, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(ia))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("exp", a, f64::exp, Op::Exp(ia))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("log", a, f64::ln, Op::Log(ia))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(ia))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("tanh", a, f64::tanh, Op::Tanh(ia))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(ia))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("abs", a, f64::abs, Op::Abs(ia))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(ia, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        self.push_op("sum", out, Op::Sum(ia), &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push_op("mean", out, Op::Mean(ia), &[ia])
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.data().iter().map(|v| v * v).sum::<f64>().sqrt());
        self.push_op("l2_norm", out, Op::L2Norm(ia), &[ia])
    }

    /// Per-row softmax cross-entropy of `logits` (B x C) against integer
    /// labels; returns a B x 1 column of losses.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ia = self.idx(logits)?;
        let t = &self.nodes[ia].value;
        if t.shape().len() != 2 || t.rows() != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} labels", t.shape(), labels.len()),
            ));
        }
        let c = t.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::shape("cross_entropy", format!("label {bad} out of range for {c} classes")));
        }
        let losses = (0..t.rows()).map(|r| log_sum_exp(t.row(r)) - t.get(r, labels[r])).collect();
        let out = Tensor::matrix(labels.len(), 1, losses)?;
        self.push_op("cross_entropy", out, Op::CrossEntropyRows(ia, labels.to_vec()), &[ia])
    }

    /// Mean softmax cross-entropy over rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let rows = self.cross_entropy_rows(logits, labels)?;
        self.mean(rows)
    }

    /// Contiguous slice of the flattened input, reshaped to `shape`.
    pub fn slice(&mut self, a: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let n: usize = shape.iter().product();
        let src = self.nodes[ia].value.data();
        if start + n > src.len() {
            return Err(Error::shape("slice", format!("{start}+{n} exceeds {}", src.len())));
        }
        let out = Tensor::new(shape.to_vec(), src[start..start + n].to_vec())?;
        self.push_op("slice", out, Op::Slice(ia, start), &[ia])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Repeat a 1 x C row over `rows` rows.
    pub fn broadcast_row(&mut self, row: Var, rows: usize) -> Result<Var> {
        let ones = self.constant(Tensor::full(&[rows, 1], 1.0));
        self.matmul(ones, row)
    }

    /// Repeat an R x 1 column over `cols` columns.
    pub fn broadcast_col(&mut self, col: Var, cols: usize) -> Result<Var> {
        let ones = self.constant(Tensor::full(&[1, cols], 1.0));
        self.matmul(col, ones)
    }

    /// Fill a `rows x cols` matrix with the value of a 1 x 1 node.
    pub fn broadcast_scalar(&mut self, s: Var, rows: usize, cols: usize) -> Result<Var> {
        let s = if self.value(s).shape().len() == 2 { s } else { self.slice(s, 0, &[1, 1])? };
        let r = self.broadcast_row(s, rows)?;
        self.broadcast_col(r, cols)
    }

    /// Row sums of an R x C matrix as an R x 1 column.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        let ones = self.constant(Tensor::full(&[cols, 1], 1.0));
        self.matmul(a, ones)
    }

    /// `x @ W^T + b` for a weight `W` (out x in) and a bias row `b` (1 x out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        let xw = self.matmul_t(x, w)?;
        let bb = self.broadcast_row(b, rows)?;
        self.add(xw, bb)
    }

    /// Reparameterized Gaussian draw `mu + exp(clamp(log_var)/2) * eps` with
    /// caller-supplied standard-normal noise.
    pub fn reparam(&mut self, mu: Var, log_var: Var, eps: &Tensor) -> Result<Var> {
        if self.value(mu).shape() != self.value(log_var).shape() || self.value(mu).shape() != eps.shape() {
            return Err(Error::shape(
                "reparam",
                format!("mu {:?}, log_var {:?}, eps {:?}", self.value(mu).shape(), self.value(log_var).shape(), eps.shape()),
            ));
        }
        let lv = self.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)?;
        let half = self.scale(lv, 0.5)?;
        let sd = self.exp(half)?;
        let e = self.constant(eps.clone());
        let noise = self.mul(sd, e)?;
        self.add(mu, noise)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        let lt = &self.nodes[il].value;
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[il] = Some(Tensor::full(lt.shape(), 1.0));

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if node.kind != Kind::Op || !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let out = &node.value;
            let send = |j: usize, t: Tensor, adj: &mut Vec<Option<Tensor>>| {
                if !self.nodes[j].needs_grad {
                    return;
                }
                match &mut adj[j] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            let val = |j: usize| &self.nodes[j].value;
            match node.op {
                Op::None => {}
                Op::MatMul(a, b) => {
                    if self.nodes[a].needs_grad {
                        send(a, g.gemm(val(b), false, true)?, &mut adj);
                    }
                    if self.nodes[b].needs_grad {
                        send(b, val(a).gemm(&g, true, false)?, &mut adj);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.nodes[a].needs_grad {
                        send(a, g.matmul(val(b))?, &mut adj);
                    }
                    if self.nodes[b].needs_grad {
                        send(b, g.gemm(val(a), true, false)?, &mut adj);
                    }
                }
                Op::Add(a, b) => {
                    send(a, g.clone(), &mut adj);
                    send(b, g, &mut adj);
                }
                Op::Sub(a, b) => {
                    send(a, g.clone(), &mut adj);
                    send(b, g.map(|v| -v), &mut adj);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a].needs_grad {
                        send(a, g.zip_map(val(b), |d, y| d * y)?, &mut adj);
                    }
                    if self.nodes[b].needs_grad {
                        send(b, g.zip_map(val(a), |d, x| d * x)?, &mut adj);
                    }
                }
                Op::Neg(a) => send(a, g.map(|v| -v), &mut adj),
                Op::Scale(a, c) => send(a, g.map(|v| c * v), &mut adj),
                Op::AddScalar(a) => send(a, g, &mut adj),
                Op::Exp(a) => send(a, g.zip_map(out, |d, y| d * y)?, &mut adj),
                Op::Log(a) => send(a, g.zip_map(val(a), |d, x| d / x)?, &mut adj),
                Op::Sigmoid(a) => send(a, g.zip_map(out, |d, s| d * s * (1.0 - s))?, &mut adj),
                Op::Tanh(a) => send(a, g.zip_map(out, |d, t| d * (1.0 - t * t))?, &mut adj),
                Op::Relu(a) => send(a, g.zip_map(val(a), |d, x| if x > 0.0 { d } else { 0.0 })?, &mut adj),
                Op::Abs(a) => send(a, g.zip_map(val(a), |d, x| d * sign(x))?, &mut adj),
                Op::Clamp(a, lo, hi) => send(
                    a,
                    g.zip_map(val(a), |d, x| if (lo..=hi).contains(&x) { d } else { 0.0 })?,
                    &mut adj,
                ),
                Op::Sum(a) => send(a, Tensor::full(val(a).shape(), g.item()), &mut adj),
                Op::Mean(a) => {
                    let n = val(a).len() as f64;
                    send(a, Tensor::full(val(a).shape(), g.item() / n), &mut adj)
                }
                Op::L2Norm(a) => {
                    let norm = out.item();
                    let d = g.item();
                    let t = if norm > 0.0 { val(a).map(|x| d * x / norm) } else { Tensor::zeros(val(a).shape()) };
                    send(a, t, &mut adj)
                }
                Op::CrossEntropyRows(a, ref labels) => {
                    let logits = val(a);
                    let c = logits.cols();
                    let mut d = vec![0.0; logits.len()];
                    for (r, &y) in labels.iter().enumerate() {
                        let row = logits.row(r);
                        let lse = log_sum_exp(row);
                        let gr = g.data()[r];
                        for k in 0..c {
                            let p = (row[k] - lse).exp();
                            d[r * c + k] = gr * (p - if k == y { 1.0 } else { 0.0 });
                        }
                    }
                    send(a, Tensor::new(logits.shape().to_vec(), d)?, &mut adj)
                }
                Op::Slice(a, start) => {
                    let mut t = Tensor::zeros(val(a).shape());
                    t.data_mut()[start..start + g.len()].copy_from_slice(g.data());
                    send(a, t, &mut adj)
                }
            }
        }

        Ok(Gradients { graph: self.id, kinds: self.nodes.iter().map(|n| n.kind).collect(), shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(), adj })
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    graph: u64,
    kinds: Vec<Kind>,
    shapes: Vec<Vec<usize>>,
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a trainable leaf. Leaves the loss
    /// does not depend on get zeros; constants and interior nodes are errors.
    pub fn wrt(&self, v: Var) -> Result<Tensor> {
        if v.graph != self.graph {
            return Err(Error::ForeignNode);
        }
        match self.kinds.get(v.index) {
            Some(Kind::Param) => Ok(self.adj[v.index].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.index]))),
            Some(_) => Err(Error::DetachedLeaf),
            None => Err(Error::DetachedLeaf),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Draws standard-normal noise from `rng` and records the reparameterized
/// sample `mu + sigma * eps` on the graph.
pub fn sample_gaussian_reparam(g: &mut Graph, mu: Var, log_var: Var, rng: &mut Stream) -> Result<Var> {
    let eps = rng::normal_tensor(rng, g.value(mu).shape());
    g.reparam(mu, log_var, &eps)
}
