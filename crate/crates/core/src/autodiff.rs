//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of [`DiffNode`]s. Every operation pushes
//! a node recording its parents, so node order is already a topological order
//! and [`Graph::backward`] is a single reverse sweep.
//!
//! One graph belongs to one training step (or one sample within it). Graphs
//! are cheap to build, so the trainer builds a fresh one per sample.

use crate::error::{Error, Result};
use crate::quaternion::HAMILTON_LAYOUT;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `N×d + 1×d`, row broadcast.
    AddRow(NodeId, NodeId),
    /// `1×d` repeated to `N×d`.
    BroadcastRows(NodeId),
    /// `scale·a + shift`
    Affine(NodeId, f64),
    /// `a · s` with `s` a `1×1` node.
    MulScalar(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Powf(NodeId, f64),
    Clamp(NodeId, f64, f64),
    SoftmaxRows(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Transpose(NodeId),
    RowSum(NodeId),
    ColMean(NodeId),
    /// Column maxima; keeps the winning row per column.
    ColMax(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    Hamilton([NodeId; 4]),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | MulScalar(a, b) => vec![*a, *b],
            BroadcastRows(a) | Affine(a, _) | Relu(a) | Tanh(a) | Sigmoid(a) | Exp(a) | Log(a)
            | Powf(a, _) | Clamp(a, _, _) | SoftmaxRows(a, _) | SliceCols(a, _) | Transpose(a)
            | RowSum(a) | ColMean(a) | ColMax(a, _) | Sum(a) | Mean(a) => vec![*a],
            LayerNorm { x, gamma, beta, .. } => {
                let mut p = vec![*x];
                p.extend(gamma.iter().chain(beta.iter()).copied());
                p
            }
            ConcatCols(v) | ConcatRows(v) => v.clone(),
            Hamilton(w) => w.to_vec(),
        }
    }
}

/// A value in the graph together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct DiffNode {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

impl DiffNode {
    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn data(&self) -> &Tensor {
        &self.value
    }

    /// Gradient accumulated by the last backward pass, if any reached this node.
    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn parents(&self) -> Vec<NodeId> {
        self.op.parents()
    }
}

/// Source of node ids for parameter tensors.
///
/// [`Graph`] binds trainable tensors as gradient-tracking leaves;
/// [`ConstBinder`] binds everything as constants.
pub trait Binder {
    fn bind_trainable(&mut self, t: &Tensor) -> NodeId;
    fn bind_constant(&mut self, t: &Tensor) -> NodeId;
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<DiffNode>,
    params: Vec<NodeId>,
    track: bool,
}

impl Graph {
    /// Graph whose trainable bindings track gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: Vec::new(),
            track: true,
        }
    }

    /// Graph for frozen-parameter evaluation: nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: Vec::new(),
            track: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &DiffNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.get(0, 0)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of `id`, zeros when the backward pass never reached it.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(n.value.rows(), n.value.cols()))
    }

    /// Trainable leaves in binding order.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    /// Smallest distance of any value to a point where the graph is not
    /// differentiable: ReLU inputs at zero, clamp bounds and tied column
    /// maxima. `∞` when the graph has none.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for n in &self.nodes {
            match &n.op {
                Op::Relu(a) => {
                    for v in self.value(*a).data() {
                        m = m.min(v.abs());
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    for v in self.value(*a).data() {
                        m = m.min((v - lo).abs()).min((v - hi).abs());
                    }
                }
                Op::ColMax(a, arg) => {
                    let x = self.value(*a);
                    for (c, &best) in arg.iter().enumerate() {
                        for r in (0..x.rows()).filter(|&r| r != best) {
                            m = m.min(x.get(best, c) - x.get(r, c));
                        }
                    }
                }
                _ => {}
            }
        }
        m
    }

    /// Gradients of all trainable leaves, in binding order.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.params.iter().map(|&p| self.grad(p)).collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(DiffNode {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Leaf that tracks gradients (unless this is an inference graph).
    /// Not registered in [`Graph::params`].
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        let id = self.push(t, Op::Leaf);
        self.nodes[id.0].requires_grad = self.track;
        id
    }

    /// Trainable leaf, registered in [`Graph::params`].
    pub fn param(&mut self, t: Tensor) -> NodeId {
        let id = self.variable(t);
        if self.track {
            self.params.push(id);
        }
        id
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds the `1×d` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (n, d) = self.shape(a);
        if self.shape(row) != (1, d) {
            return Err(Error::shape(format!(
                "add_row: row {:?} for {n}x{d}",
                self.shape(row)
            )));
        }
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..n {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn broadcast_rows(&mut self, row: NodeId, n: usize) -> Result<NodeId> {
        let (r, d) = self.shape(row);
        if r != 1 {
            return Err(Error::shape("broadcast_rows expects a single row"));
        }
        let src = self.value(row).clone();
        let v = Tensor::from_fn(n, d, |_, c| src.get(0, c));
        Ok(self.push(v, Op::BroadcastRows(row)))
    }

    /// `scale·a + shift`
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.affine(a, k, 0.0)
    }

    /// `a · s` for a `1×1` node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape("mul_scalar expects a 1x1 scalar"));
        }
        let k = self.scalar(s);
        let v = self.value(a).scaled(k);
        Ok(self.push(v, Op::MulScalar(a, s)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    /// `a^p` elementwise for a constant exponent.
    pub fn powf(&mut self, a: NodeId, p: f64) -> NodeId {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a, p))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax of `a / temperature`.
    pub fn softmax_rows(&mut self, a: NodeId, temperature: f64) -> Result<NodeId> {
        let v = softmax_rows(self.value(a), temperature)?;
        Ok(self.push(v, Op::SoftmaxRows(a, temperature)))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// optional `1×d` scale and shift.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
    ) -> Result<NodeId> {
        let (n, d) = self.shape(x);
        for p in gamma.iter().chain(beta.iter()) {
            if self.shape(*p) != (1, d) {
                return Err(Error::shape("layer_norm affine must be 1xd"));
            }
        }
        let (xhat, inv_std) = normalize_rows(self.value(x));
        let mut v = xhat.clone();
        if let Some(g) = gamma {
            let g = self.value(g).data().to_vec();
            for i in 0..n {
                for (o, s) in v.row_mut(i).iter_mut().zip(&g) {
                    *o *= s;
                }
            }
        }
        if let Some(b) = beta {
            let b = self.value(b).data().to_vec();
            for i in 0..n {
                for (o, s) in v.row_mut(i).iter_mut().zip(&b) {
                    *o += s;
                }
            }
        }
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&vals)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `[start, end)` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        if start > end || end > self.shape(a).1 {
            return Err(Error::shape(format!(
                "slice_cols [{start},{end}) of {:?}",
                self.shape(a)
            )));
        }
        let v = self.value(a).slice_cols(start, end);
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// `N×d → N×1`
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::from_fn(t.rows(), 1, |r, _| t.row(r).iter().sum());
        self.push(v, Op::RowSum(a))
    }

    /// `N×d → 1×d`
    pub fn col_mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).column_mean();
        self.push(v, Op::ColMean(a))
    }

    /// `N×d → 1×d`; ties go to the lowest row index.
    pub fn col_max(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rows() == 0 {
            return Err(Error::shape("col_max of an empty matrix"));
        }
        let mut arg = vec![0usize; t.cols()];
        for c in 0..t.cols() {
            for r in 1..t.rows() {
                if t.get(r, c) > t.get(arg[c], c) {
                    arg[c] = r;
                }
            }
        }
        let v = Tensor::row_vector(arg.iter().enumerate().map(|(c, &r)| t.get(r, c)).collect());
        Ok(self.push(v, Op::ColMax(a, arg)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::filled(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::filled(1, 1, t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Assembles the `d×d` real matrix of a quaternion weight from its four
    /// `(d/4)×(d/4)` components `[R, I, J, K]`.
    pub fn hamilton(&mut self, parts: [NodeId; 4]) -> Result<NodeId> {
        let blocks = [
            self.value(parts[0]),
            self.value(parts[1]),
            self.value(parts[2]),
            self.value(parts[3]),
        ];
        let v = crate::quaternion::assemble_hamilton(blocks)?;
        Ok(self.push(v, Op::Hamilton(parts)))
    }

    /// Runs the reverse sweep from the `1×1` node `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::shape("backward root must be a 1x1 scalar"));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &dy)?;
            self.nodes[i].grad = Some(dy);
        }
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                if !g.is_finite() {
                    return Err(Error::NonFinite("gradient blow-up".into()));
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(node.value.shape(), g.shape(), "gradient shape");
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, i: usize, dy: &Tensor) -> Result<()> {
        let op = self.nodes[i].op.clone();
        let y = &self.nodes[i].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(a) {
                    let g = dy.matmul_t(self.value(b))?;
                    self.accumulate(a, g);
                }
                if self.wants(b) {
                    let g = self.value(a).t_matmul(dy)?;
                    self.accumulate(b, g);
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = dy b, db = dyᵀ a
                if self.wants(a) {
                    let g = dy.matmul(self.value(b))?;
                    self.accumulate(a, g);
                }
                if self.wants(b) {
                    let g = dy.t_matmul(self.value(a))?;
                    self.accumulate(b, g);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, dy.clone());
                self.accumulate(b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, dy.clone());
                self.accumulate(b, dy.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let g = dy.zip_map(self.value(b), |d, x| d * x);
                    self.accumulate(a, g);
                }
                if self.wants(b) {
                    let g = dy.zip_map(self.value(a), |d, x| d * x);
                    self.accumulate(b, g);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(a, dy.clone());
                if self.wants(row) {
                    let s = Tensor::row_vector(column_sums(dy));
                    self.accumulate(row, s);
                }
            }
            Op::BroadcastRows(row) => {
                let s = Tensor::row_vector(column_sums(dy));
                self.accumulate(row, s);
            }
            Op::Affine(a, k) => self.accumulate(a, dy.scaled(k)),
            Op::MulScalar(a, s) => {
                let k = self.scalar(s);
                if self.wants(a) {
                    self.accumulate(a, dy.scaled(k));
                }
                if self.wants(s) {
                    let dot: f64 = dy
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(d, x)| d * x)
                        .sum();
                    self.accumulate(s, Tensor::filled(1, 1, dot));
                }
            }
            Op::Relu(a) => {
                let g = dy.zip_map(self.value(a), |d, x| if x > 0.0 { d } else { 0.0 });
                self.accumulate(a, g);
            }
            Op::Tanh(a) => {
                let g = dy.zip_map(y, |d, t| d * (1.0 - t * t));
                self.accumulate(a, g);
            }
            Op::Sigmoid(a) => {
                let g = dy.zip_map(y, |d, s| d * s * (1.0 - s));
                self.accumulate(a, g);
            }
            Op::Exp(a) => {
                let g = dy.zip_map(y, |d, e| d * e);
                self.accumulate(a, g);
            }
            Op::Log(a) => {
                let g = dy.zip_map(self.value(a), |d, x| d / x);
                self.accumulate(a, g);
            }
            Op::Powf(a, p) => {
                let g = if p == 0.0 {
                    Tensor::zeros(dy.rows(), dy.cols())
                } else {
                    dy.zip_map(self.value(a), |d, x| d * p * x.powf(p - 1.0))
                };
                self.accumulate(a, g);
            }
            Op::Clamp(a, lo, hi) => {
                let g = dy.zip_map(self.value(a), |d, x| if (lo..=hi).contains(&x) { d } else { 0.0 });
                self.accumulate(a, g);
            }
            Op::SoftmaxRows(a, temp) => {
                let mut g = Tensor::zeros(dy.rows(), dy.cols());
                for r in 0..dy.rows() {
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for (o, (yv, dv)) in g.row_mut(r).iter_mut().zip(yr.iter().zip(dr)) {
                        *o = yv * (dv - dot) / temp;
                    }
                }
                self.accumulate(a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = xhat.shape();
                if let Some(b) = beta {
                    if self.wants(b) {
                        self.accumulate(b, Tensor::row_vector(column_sums(dy)));
                    }
                }
                let gvec = gamma.map(|g| self.value(g).data().to_vec());
                if let Some(gm) = gamma {
                    if self.wants(gm) {
                        let prod = dy.zip_map(&xhat, |a, b| a * b);
                        self.accumulate(gm, Tensor::row_vector(column_sums(&prod)));
                    }
                }
                if self.wants(x) {
                    let mut gx = Tensor::zeros(n, d);
                    let df = d as f64;
                    for r in 0..n {
                        let dxhat: Vec<f64> = match &gvec {
                            Some(gv) => dy.row(r).iter().zip(gv).map(|(a, b)| a * b).collect(),
                            None => dy.row(r).to_vec(),
                        };
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        let xr = xhat.row(r);
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] / df * (df * dxhat[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    self.accumulate(x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(p).1;
                    if self.wants(p) {
                        self.accumulate(p, dy.slice_cols(start, start + w));
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(p).0;
                    if self.wants(p) {
                        let idx: Vec<usize> = (start..start + h).collect();
                        self.accumulate(p, dy.gather_rows(&idx));
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, d) = self.shape(a);
                let mut g = Tensor::zeros(n, d);
                for r in 0..n {
                    g.row_mut(r)[start..start + dy.cols()].copy_from_slice(dy.row(r));
                }
                self.accumulate(a, g);
            }
            Op::Transpose(a) => self.accumulate(a, dy.transpose()),
            Op::RowSum(a) => {
                let (n, d) = self.shape(a);
                let g = Tensor::from_fn(n, d, |r, _| dy.get(r, 0));
                self.accumulate(a, g);
            }
            Op::ColMean(a) => {
                let (n, d) = self.shape(a);
                let g = Tensor::from_fn(n, d, |_, c| dy.get(0, c) / n as f64);
                self.accumulate(a, g);
            }
            Op::ColMax(a, arg) => {
                let (n, d) = self.shape(a);
                let mut g = Tensor::zeros(n, d);
                for (c, r) in arg.into_iter().enumerate() {
                    g.set(r, c, dy.get(0, c));
                }
                self.accumulate(a, g);
            }
            Op::Sum(a) => {
                let (n, d) = self.shape(a);
                self.accumulate(a, Tensor::filled(n, d, dy.get(0, 0)));
            }
            Op::Mean(a) => {
                let (n, d) = self.shape(a);
                self.accumulate(a, Tensor::filled(n, d, dy.get(0, 0) / (n * d) as f64));
            }
            Op::Hamilton(parts) => {
                let q = self.shape(parts[0]).0;
                let mut grads: [Tensor; 4] = std::array::from_fn(|_| Tensor::zeros(q, q));
                for (br, row) in HAMILTON_LAYOUT.iter().enumerate() {
                    for (bc, &(comp, sign)) in row.iter().enumerate() {
                        let g = &mut grads[comp];
                        for r in 0..q {
                            for c in 0..q {
                                let v = g.get(r, c) + sign * dy.get(br * q + r, bc * q + c);
                                g.set(r, c, v);
                            }
                        }
                    }
                }
                for (p, g) in parts.into_iter().zip(grads) {
                    self.accumulate(p, g);
                }
            }
        }
        Ok(())
    }
}

impl Binder for Graph {
    fn bind_trainable(&mut self, t: &Tensor) -> NodeId {
        self.param(t.clone())
    }

    fn bind_constant(&mut self, t: &Tensor) -> NodeId {
        self.constant(t.clone())
    }
}

/// Binds every tensor as a constant, trainable or not.
pub struct ConstBinder<'a>(pub &'a mut dyn Binder);

impl Binder for ConstBinder<'_> {
    fn bind_trainable(&mut self, t: &Tensor) -> NodeId {
        self.0.bind_constant(t)
    }

    fn bind_constant(&mut self, t: &Tensor) -> NodeId {
        self.0.bind_constant(t)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

fn normalize_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, d) = x.shape();
    let mut out = Tensor::zeros(n, d);
    let mut inv = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mu) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

fn column_sums(t: &Tensor) -> Vec<f64> {
    let mut s = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in s.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    s
}

/// Row-wise softmax of `m / temperature`, stabilized by max subtraction.
pub fn softmax_rows(m: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("non-finite logits".into()));
    }
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_graph_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kink_margins() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(2, 2, vec![0.5, -0.02, 0.1, 0.3]).unwrap());
        assert_eq!(g.kink_margin(), f64::INFINITY);
        g.relu(x);
        assert!((g.kink_margin() - 0.02).abs() < 1e-15);
        g.col_max(x).unwrap();
        assert!((g.kink_margin() - 0.02).abs() < 1e-15);
        g.clamp(x, 0.49, 1.0);
        assert!((g.kink_margin() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform_and_single_key() {
        let s = softmax_rows(&Tensor::zeros(1, 3), 1.0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Tensor::filled(1, 1, 42.0), 0.3).unwrap();
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn softmax_matches_direct_exp_sum() {
        let s = softmax_rows(&Tensor::row_vector(vec![1.0, 2.0, 3.0]), 1.0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, v) in s.data().iter().enumerate() {
            let want = ((k + 1) as f64).exp() / z;
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax_rows(&Tensor::zeros(1, 2), 0.0).is_err());
        assert!(softmax_rows(&Tensor::zeros(1, 2), -1.0).is_err());
        let err = softmax_rows(&Tensor::row_vector(vec![f64::NAN, 1.0]), 1.0).unwrap_err();
        assert_eq!(err.to_string(), "non-finite logits");
    }

    #[test]
    fn root_gradient_is_one_and_constants_stay_clean() {
        let mut g = Graph::new();
        let a = g.param(Tensor::row_vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::row_vector(vec![3.0, 4.0]));
        let m = g.mul(a, c).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(s).data(), &[1.0]);
        assert_eq!(g.grad(a).data(), &[3.0, 4.0]);
        assert!(g.node(c).grad().is_none());
        assert!(!g.node(c).requires_grad());
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut g = Graph::inference();
        let a = g.param(Tensor::row_vector(vec![1.0]));
        let s = g.sum(a);
        assert!(!g.requires_grad(s));
        assert!(g.params().is_empty());
        g.backward(s).unwrap();
        assert!(g.node(a).grad().is_none());
    }

    // Every primitive, each with its own finite-difference check.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = random_tensor(&mut rng, 3, 4, 1.0);
            let b = random_tensor(&mut rng, 4, 2, 1.0);
            let c = random_tensor(&mut rng, 3, 4, 1.0);
            let row = random_tensor(&mut rng, 1, 4, 1.0);
            let pos = a.map(|v| v.abs() + 0.5);
            let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>)> = vec![
                ("matmul", vec![a.clone(), b.clone()], Box::new(|g, x| g.matmul(x[0], x[1]))),
                ("matmul_t", vec![a.clone(), c.clone()], Box::new(|g, x| g.matmul_t(x[0], x[1]))),
                ("sub_mul", vec![a.clone(), c.clone()], Box::new(|g, x| {
                    let s = g.sub(x[0], x[1])?;
                    g.mul(s, x[0])
                })),
                ("add_row", vec![a.clone(), row.clone()], Box::new(|g, x| g.add_row(x[0], x[1]))),
                ("broadcast", vec![row.clone()], Box::new(|g, x| g.broadcast_rows(x[0], 3))),
                ("tanh_sigmoid", vec![a.clone()], Box::new(|g, x| {
                    let t = g.tanh(x[0]);
                    Ok(g.sigmoid(t))
                })),
                ("exp_log_pow", vec![pos.clone()], Box::new(|g, x| {
                    let l = g.log(x[0]);
                    let e = g.exp(l);
                    Ok(g.powf(e, 2.5))
                })),
                ("softmax", vec![a.clone()], Box::new(|g, x| g.softmax_rows(x[0], 0.7))),
                ("layer_norm", vec![a.clone(), row.clone(), row.map(|v| v * 0.5)], Box::new(|g, x| {
                    g.layer_norm(x[0], Some(x[1]), Some(x[2]))
                })),
                ("layer_norm_plain", vec![a.clone()], Box::new(|g, x| g.layer_norm(x[0], None, None))),
                ("concat_slice", vec![a.clone(), c.clone()], Box::new(|g, x| {
                    let cc = g.concat_cols(&[x[0], x[1]])?;
                    let r = g.concat_rows(&[cc, cc])?;
                    g.slice_cols(r, 2, 7)
                })),
                ("transpose_rowsum_colmean", vec![a.clone()], Box::new(|g, x| {
                    let t = g.transpose(x[0]);
                    let r = g.row_sum(t);
                    let m = g.col_mean(x[0]);
                    let rm = g.mean(r);
                    let mm = g.sum(m);
                    g.mul(rm, mm)
                })),
                ("mul_scalar", vec![a.clone(), Tensor::filled(1, 1, 0.7)], Box::new(|g, x| {
                    let e = g.exp(x[1]);
                    g.mul_scalar(x[0], e)
                })),
                ("affine_relu", vec![a.clone()], Box::new(|g, x| {
                    let y = g.affine(x[0], -2.0, 0.3);
                    Ok(g.relu(y))
                })),
                ("col_max_clamp", vec![a.clone()], Box::new(|g, x| {
                    let m = g.col_max(x[0])?;
                    Ok(g.clamp(m, -0.5, 10.0))
                })),
            ];
            for (name, inputs, build) in cases {
                let report = check_graph_gradients(&inputs, |g, ids| build(g, ids)).unwrap();
                assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
            }
        }
    }
}
