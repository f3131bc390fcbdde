//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a single-use tape: build a forward pass with the op
//! methods, call [`Graph::backward`] once, then drop it. Cached forward
//! values live on the tape; gradients are only materialized for nodes on
//! a path to a trainable parameter. All math is f64.

use std::collections::HashMap;
use std::fmt;

use crate::params::{GradMap, ParamError, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    MeanAxis0(NodeId),
    SliceCols {
        x: NodeId,
        lo: usize,
        hi: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    MeanScalars(Vec<NodeId>),
    NllMean {
        logp: NodeId,
        targets: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    /// Set for parameter leaves so backward can collect by name.
    param_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AutodiffError {
    /// A graph op was fed incompatible shapes; names the op and shapes.
    ShapeMismatch { op: &'static str, details: String },
    /// `backward` called on a graph that was already consumed.
    GraphConsumed,
    NonScalarLoss { shape: Vec<usize> },
    Param(ParamError),
    NonFinite { context: String },
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AutodiffError::ShapeMismatch { op, details } => {
                write!(f, "shape mismatch in op `{op}`: {details}")
            }
            AutodiffError::GraphConsumed => write!(f, "backward called on a consumed graph"),
            AutodiffError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            AutodiffError::Param(e) => write!(f, "{e}"),
            AutodiffError::NonFinite { context } => {
                write!(f, "non-finite value produced in {context}")
            }
        }
    }
}

impl std::error::Error for AutodiffError {}

impl From<ParamError> for AutodiffError {
    fn from(e: ParamError) -> Self {
        AutodiffError::Param(e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<String, NodeId>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Cached forward value of a node.
    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            param_name: None,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Constant/data leaf; never receives a gradient.
    pub fn value(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Parameter leaf. Registers each name once per graph; trainable
    /// parameters participate in backward, frozen ones do not.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId, AutodiffError> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let entry = store.get(name)?;
        let id = self.push(Op::Leaf, entry.tensor.clone(), entry.trainable);
        self.nodes[id.0].param_name = Some(name.to_string());
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    fn shape_err(op: &'static str, details: String) -> AutodiffError {
        AutodiffError::ShapeMismatch { op, details }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Self::shape_err(
                "add",
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        let mut out = self.val(a).clone();
        out.add_scaled(self.val(b), 1.0);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Self::shape_err(
                "sub",
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        let mut out = self.val(a).clone();
        out.add_scaled(self.val(b), -1.0);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), out, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Self::shape_err(
                "mul",
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data().iter())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.val(a).shape().to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), out, needs))
    }

    /// Broadcast a vector bias over the rows of a matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (xs, bs) = (self.val(x).shape().to_vec(), self.val(bias).shape().to_vec());
        if bs.len() != 1 || self.val(x).cols() != bs[0] {
            return Err(Self::shape_err(
                "add_bias",
                format!("x {xs:?} vs bias {bs:?}"),
            ));
        }
        let (n, m) = (self.val(x).rows(), self.val(x).cols());
        let mut out = self.val(x).clone();
        {
            let b = self.val(bias).data().to_vec();
            let d = out.data_mut();
            for i in 0..n {
                for j in 0..m {
                    d[i * m + j] += b[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBias(x, bias), out, needs))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        let out = self.val(x).map(|v| v * c);
        let needs = self.needs(x);
        Ok(self.push(Op::Scale(x, c), out, needs))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Self::shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = av.matmul(bv);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), out, needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        if self.val(x).shape().len() != 2 {
            return Err(Self::shape_err(
                "transpose",
                format!("{:?}", self.val(x).shape()),
            ));
        }
        let out = self.val(x).transpose();
        let needs = self.needs(x);
        Ok(self.push(Op::Transpose(x), out, needs))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let out = self.val(x).map(gelu);
        let needs = self.needs(x);
        Ok(self.push(Op::Gelu(x), out, needs))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, AutodiffError> {
        let m = self.val(x).cols();
        if self.val(gain).shape() != [m] || self.val(bias).shape() != [m] {
            return Err(Self::shape_err(
                "layer_norm",
                format!(
                    "x {:?} gain {:?} bias {:?}",
                    self.val(x).shape(),
                    self.val(gain).shape(),
                    self.val(bias).shape()
                ),
            ));
        }
        let n = self.val(x).rows();
        let mut out = self.val(x).clone();
        {
            let g = self.val(gain).data().to_vec();
            let b = self.val(bias).data().to_vec();
            let d = out.data_mut();
            for i in 0..n {
                let row = &mut d[i * m..(i + 1) * m];
                let mean = row.iter().sum::<f64>() / m as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..m {
                    row[j] = g[j] * (row[j] - mean) * inv + b[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, out, needs))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, m) = (self.val(x).rows(), self.val(x).cols());
        let mut out = self.val(x).clone();
        {
            let d = out.data_mut();
            for i in 0..n {
                let row = &mut d[i * m..(i + 1) * m];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SoftmaxRows(x), out, needs))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, m) = (self.val(x).rows(), self.val(x).cols());
        let mut out = self.val(x).clone();
        {
            let d = out.data_mut();
            for i in 0..n {
                let row = &mut d[i * m..(i + 1) * m];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::LogSoftmaxRows(x), out, needs))
    }

    /// Mean over rows: `[n, m] -> [m]`.
    pub fn mean_axis0(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        if self.val(x).shape().len() != 2 {
            return Err(Self::shape_err(
                "mean_axis0",
                format!("{:?}", self.val(x).shape()),
            ));
        }
        let (n, m) = (self.val(x).rows(), self.val(x).cols());
        let mut data = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                data[j] += self.val(x).data()[i * m + j];
            }
        }
        for v in data.iter_mut() {
            *v /= n as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(Op::MeanAxis0(x), Tensor::new(vec![m], data), needs))
    }

    /// Column slice `x[:, lo..hi]`.
    pub fn slice_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId, AutodiffError> {
        let m = self.val(x).cols();
        if lo >= hi || hi > m {
            return Err(Self::shape_err(
                "slice_cols",
                format!("range {lo}..{hi} on {:?}", self.val(x).shape()),
            ));
        }
        let n = self.val(x).rows();
        let w = hi - lo;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&self.val(x).data()[i * m + lo..i * m + hi]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::SliceCols { x, lo, hi },
            Tensor::new(vec![n, w], data),
            needs,
        ))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if xs.is_empty() {
            return Err(Self::shape_err("concat_cols", "no inputs".into()));
        }
        let n = self.val(xs[0]).rows();
        if xs.iter().any(|&x| self.val(x).rows() != n) {
            return Err(Self::shape_err("concat_cols", "row counts differ".into()));
        }
        let total: usize = xs.iter().map(|&x| self.val(x).cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &x in xs {
                let m = self.val(x).cols();
                data.extend_from_slice(&self.val(x).data()[i * m..(i + 1) * m]);
            }
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(
            Op::ConcatCols(xs.to_vec()),
            Tensor::new(vec![n, total], data),
            needs,
        ))
    }

    /// Stack inputs along rows; a `[m]` input counts as one row.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if xs.is_empty() {
            return Err(Self::shape_err("concat_rows", "no inputs".into()));
        }
        let m = self.val(xs[0]).cols();
        if xs.iter().any(|&x| self.val(x).cols() != m) {
            return Err(Self::shape_err("concat_rows", "column counts differ".into()));
        }
        let total: usize = xs.iter().map(|&x| self.val(x).rows()).sum();
        let mut data = Vec::with_capacity(total * m);
        for &x in xs {
            data.extend_from_slice(self.val(x).data());
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(
            Op::ConcatRows(xs.to_vec()),
            Tensor::new(vec![total, m], data),
            needs,
        ))
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if xs.is_empty() {
            return Err(Self::shape_err("mean_scalars", "no inputs".into()));
        }
        if xs.iter().any(|&x| !self.val(x).is_scalar()) {
            return Err(Self::shape_err("mean_scalars", "non-scalar input".into()));
        }
        let mean = xs.iter().map(|&x| self.val(x).item()).sum::<f64>() / xs.len() as f64;
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Op::MeanScalars(xs.to_vec()), Tensor::scalar(mean), needs))
    }

    /// Mean negative log-likelihood of the target class from a matrix of
    /// per-row log-probabilities.
    pub fn nll_mean(&mut self, logp: NodeId, targets: &[usize]) -> Result<NodeId, AutodiffError> {
        let (n, c) = (self.val(logp).rows(), self.val(logp).cols());
        if targets.len() != n {
            return Err(Self::shape_err(
                "nll_mean",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Self::shape_err(
                "nll_mean",
                format!("target {bad} out of range for {c} classes"),
            ));
        }
        let mut sum = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            sum -= self.val(logp).data()[i * c + t];
        }
        let needs = self.needs(logp);
        Ok(self.push(
            Op::NllMean {
                logp,
                targets: targets.to_vec(),
            },
            Tensor::scalar(sum / n as f64),
            needs,
        ))
    }

    /// Reverse pass. Consumes the graph (a second call errors), returning
    /// one gradient tensor per trainable parameter of `store`; frozen
    /// parameters never appear. Trainable parameters that do not affect
    /// the loss receive zero gradients.
    pub fn backward(&mut self, loss: NodeId, store: &ParamStore) -> Result<GradMap, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        self.consumed = true;
        if !self.val(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.val(loss).shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            // Leaf grads are put back for collection below.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out = GradMap::new();
        for (name, entry) in store.iter() {
            if !entry.trainable {
                continue;
            }
            let grad = self
                .param_nodes
                .get(name)
                .and_then(|id| grads[id.0].take())
                .unwrap_or_else(|| Tensor::zeros(entry.tensor.shape().to_vec()));
            out.insert(name.to_string(), grad);
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let accum = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor, needed: bool| {
            if !needed {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.add_scaled(&delta, 1.0),
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(grads, *a, g.clone(), self.needs(*a));
                accum(grads, *b, g.clone(), self.needs(*b));
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.clone(), self.needs(*a));
                accum(grads, *b, g.map(|v| -v), self.needs(*b));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let mut d = g.clone();
                    for (x, y) in d.data_mut().iter_mut().zip(self.val(*b).data()) {
                        *x *= y;
                    }
                    accum(grads, *a, d, true);
                }
                if self.needs(*b) {
                    let mut d = g.clone();
                    for (x, y) in d.data_mut().iter_mut().zip(self.val(*a).data()) {
                        *x *= y;
                    }
                    accum(grads, *b, d, true);
                }
            }
            Op::AddBias(x, bias) => {
                accum(grads, *x, g.clone(), self.needs(*x));
                if self.needs(*bias) {
                    let (n, m) = (g.rows(), g.cols());
                    let mut d = vec![0.0; m];
                    for r in 0..n {
                        for c in 0..m {
                            d[c] += g.data()[r * m + c];
                        }
                    }
                    accum(grads, *bias, Tensor::new(vec![m], d), true);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                accum(grads, *x, g.map(|v| v * c), self.needs(*x));
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let bt = self.val(*b).transpose();
                    accum(grads, *a, g.matmul(&bt), true);
                }
                if self.needs(*b) {
                    let at = self.val(*a).transpose();
                    accum(grads, *b, at.matmul(g), true);
                }
            }
            Op::Transpose(x) => {
                accum(grads, *x, g.transpose(), self.needs(*x));
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let mut d = g.clone();
                    for (dv, xv) in d.data_mut().iter_mut().zip(self.val(*x).data()) {
                        *dv *= gelu_deriv(*xv);
                    }
                    accum(grads, *x, d, true);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.val(*x);
                let gv = self.val(*gain);
                let (n, m) = (xv.rows(), xv.cols());
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                let mut dgain = vec![0.0; m];
                let mut dbias = vec![0.0; m];
                for r in 0..n {
                    let row = &xv.data()[r * m..(r + 1) * m];
                    let grow = &g.data()[r * m..(r + 1) * m];
                    let mean = row.iter().sum::<f64>() / m as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    // Gradient w.r.t. normalized activations.
                    let gh: Vec<f64> = grow
                        .iter()
                        .zip(gv.data().iter())
                        .map(|(gr, ga)| gr * ga)
                        .collect();
                    let mean_gh = gh.iter().sum::<f64>() / m as f64;
                    let mean_gh_xhat =
                        gh.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    let drow = &mut dx.data_mut()[r * m..(r + 1) * m];
                    for c in 0..m {
                        drow[c] = (gh[c] - mean_gh - xhat[c] * mean_gh_xhat) * inv;
                        dgain[c] += grow[c] * xhat[c];
                        dbias[c] += grow[c];
                    }
                }
                accum(grads, *x, dx, self.needs(*x));
                accum(grads, *gain, Tensor::new(vec![m], dgain), self.needs(*gain));
                accum(grads, *bias, Tensor::new(vec![m], dbias), self.needs(*bias));
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let y = &self.nodes[i].value;
                    let (n, m) = (y.rows(), y.cols());
                    let mut d = Tensor::zeros(y.shape().to_vec());
                    for r in 0..n {
                        let yrow = &y.data()[r * m..(r + 1) * m];
                        let grow = &g.data()[r * m..(r + 1) * m];
                        let dot = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum::<f64>();
                        let drow = &mut d.data_mut()[r * m..(r + 1) * m];
                        for c in 0..m {
                            drow[c] = yrow[c] * (grow[c] - dot);
                        }
                    }
                    accum(grads, *x, d, true);
                }
            }
            Op::LogSoftmaxRows(x) => {
                if self.needs(*x) {
                    let y = &self.nodes[i].value;
                    let (n, m) = (y.rows(), y.cols());
                    let mut d = Tensor::zeros(y.shape().to_vec());
                    for r in 0..n {
                        let yrow = &y.data()[r * m..(r + 1) * m];
                        let grow = &g.data()[r * m..(r + 1) * m];
                        let gsum: f64 = grow.iter().sum();
                        let drow = &mut d.data_mut()[r * m..(r + 1) * m];
                        for c in 0..m {
                            drow[c] = grow[c] - yrow[c].exp() * gsum;
                        }
                    }
                    accum(grads, *x, d, true);
                }
            }
            Op::MeanAxis0(x) => {
                if self.needs(*x) {
                    let (n, m) = (self.val(*x).rows(), self.val(*x).cols());
                    let mut d = Tensor::zeros(vec![n, m]);
                    for r in 0..n {
                        for c in 0..m {
                            d.data_mut()[r * m + c] = g.data()[c] / n as f64;
                        }
                    }
                    accum(grads, *x, d, true);
                }
            }
            Op::SliceCols { x, lo, hi } => {
                if self.needs(*x) {
                    let (n, m) = (self.val(*x).rows(), self.val(*x).cols());
                    let w = hi - lo;
                    let mut d = Tensor::zeros(vec![n, m]);
                    for r in 0..n {
                        for c in 0..w {
                            d.data_mut()[r * m + lo + c] = g.data()[r * w + c];
                        }
                    }
                    accum(grads, *x, d, true);
                }
            }
            Op::ConcatCols(xs) => {
                let n = g.rows();
                let mut off = 0;
                for &x in xs {
                    let m = self.val(x).cols();
                    if self.needs(x) {
                        let mut d = Tensor::zeros(vec![n, m]);
                        let total = g.cols();
                        for r in 0..n {
                            for c in 0..m {
                                d.data_mut()[r * m + c] = g.data()[r * total + off + c];
                            }
                        }
                        accum(grads, x, d, true);
                    }
                    off += m;
                }
            }
            Op::ConcatRows(xs) => {
                let m = g.cols();
                let mut off = 0;
                for &x in xs {
                    let rows = self.val(x).rows();
                    if self.needs(x) {
                        let data = g.data()[off * m..(off + rows) * m].to_vec();
                        accum(grads, x, Tensor::new(self.val(x).shape().to_vec(), data), true);
                    }
                    off += rows;
                }
            }
            Op::MeanScalars(xs) => {
                let share = g.item() / xs.len() as f64;
                for &x in xs {
                    accum(grads, x, Tensor::scalar(share), self.needs(x));
                }
            }
            Op::NllMean { logp, targets } => {
                if self.needs(*logp) {
                    let (n, c) = (self.val(*logp).rows(), self.val(*logp).cols());
                    let mut d = Tensor::zeros(vec![n, c]);
                    let scale = g.item() / n as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        d.data_mut()[r * c + t] = -scale;
                    }
                    accum(grads, *logp, d, true);
                }
            }
        }
    }
}
