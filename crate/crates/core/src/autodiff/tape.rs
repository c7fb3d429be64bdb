use std::collections::HashSet;

use super::{ActiveMask, GradBag, MaskIndex};
use crate::error::{Error, Result};
use crate::nn::{self, LayerNormCtx, LayerNormSaved};
use crate::tensor::{Matrix, ParamStore, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(TensorId),
    Linear { x: NodeId, weight: TensorId, bias: Option<TensorId> },
    Embedding { table: TensorId, tokens: Vec<usize> },
    LayerNorm { x: NodeId, gamma: TensorId, beta: TensorId, saved: LayerNormSaved },
    Tanh(NodeId),
    Relu(NodeId),
    Mse { pred: NodeId, target: Matrix },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Matrix },
    Sum(NodeId),
    HalfSquaredNorm(NodeId),
    Add(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Embedding { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Mse { .. } => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::HalfSquaredNorm(_) => "half_squared_norm",
            Op::Add(..) => "add",
        }
    }

    fn tensors(&self) -> Vec<TensorId> {
        match self {
            Op::Param(t) => vec![*t],
            Op::Linear { weight, bias, .. } => std::iter::once(*weight).chain(*bias).collect(),
            Op::Embedding { table, .. } => vec![*table],
            Op::LayerNorm { gamma, beta, .. } => vec![*gamma, *beta],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Matrix>,
    requires_grad: bool,
}

/// Recorded forward computation, borrowing the parameters it was built from.
///
/// Nodes are appended in evaluation order, so the node list is topologically
/// sorted by construction.
#[derive(Debug, Clone)]
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    loss: Option<NodeId>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), loss: None }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (_, Some(v)) => v,
            (Op::Param(t), None) => &self.params.get(*t).expect("validated at record time").values,
            _ => unreachable!("every non-parameter node stores its value"),
        }
    }

    pub fn loss_node(&self) -> Option<NodeId> {
        self.loss
    }

    pub fn loss(&self) -> Result<f64> {
        let id = self.loss.ok_or_else(|| Error::shape("loss", "tape has no loss node"))?;
        Ok(self.value(id).get(0, 0))
    }

    pub fn set_loss(&mut self, id: NodeId) -> Result<()> {
        let v = self.value(id);
        if v.shape() != (1, 1) {
            return Err(Error::shape("loss", format!("loss node must be 1x1, got {:?}", v.shape())));
        }
        self.loss = Some(id);
        Ok(())
    }

    fn push(&mut self, op: Op, value: Option<Matrix>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn param(&self, id: TensorId) -> Result<&'p Matrix> {
        Ok(&self.params.get(id)?.values)
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, Some(value), false)
    }

    pub fn param_leaf(&mut self, tensor: TensorId) -> Result<NodeId> {
        self.params.get(tensor)?;
        Ok(self.push(Op::Param(tensor), None, true))
    }

    pub fn linear(&mut self, x: NodeId, weight: TensorId, bias: Option<TensorId>) -> Result<NodeId> {
        let w = self.param(weight)?;
        let b = bias.map(|b| self.param(b)).transpose()?;
        let y = nn::linear_forward(self.value(x), w, b)?;
        Ok(self.push(Op::Linear { x, weight, bias }, Some(y), true))
    }

    pub fn embedding(&mut self, table: TensorId, tokens: Vec<usize>) -> Result<NodeId> {
        let y = nn::embedding_forward(&tokens, self.param(table)?)?;
        Ok(self.push(Op::Embedding { table, tokens }, Some(y), true))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<NodeId> {
        let (y, saved) = nn::layernorm_forward(self.value(x), self.param(gamma)?, self.param(beta)?, eps)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, saved }, Some(y), true))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        y.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
        let rg = self.rg(x);
        self.push(Op::Tanh(x), Some(y), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(x);
        self.push(Op::Relu(x), Some(y), rg)
    }

    /// Mean over all elements of `(pred - target)^2`.
    pub fn mse(&mut self, pred: NodeId, target: Matrix) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape("mse", format!("prediction {:?} against target {:?}", p.shape(), target.shape())));
        }
        let n = p.len() as f64;
        let sum: f64 = p.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
        let rg = self.rg(pred);
        Ok(self.push(Op::Mse { pred, target }, Some(Matrix::scalar(sum / n)), rg))
    }

    /// Mean softmax cross-entropy over rows of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let z = self.value(logits);
        if z.rows() != labels.len() {
            return Err(Error::shape("cross_entropy", format!("logits {:?} against {} labels", z.shape(), labels.len())));
        }
        let mut probs = Matrix::zeros(z.rows(), z.cols());
        let mut total = 0.0;
        for (n, &label) in labels.iter().enumerate() {
            if label >= z.cols() {
                return Err(Error::shape("cross_entropy", format!("label {label} with {} classes", z.cols())));
            }
            let row = z.row(n);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (c, v) in row.iter().enumerate() {
                probs.set(n, c, (v - max).exp() / denom);
            }
            total += denom.ln() - (row[label] - max);
        }
        let rg = self.rg(logits);
        let loss = Matrix::scalar(total / labels.len() as f64);
        Ok(self.push(Op::CrossEntropy { logits, labels, probs }, Some(loss), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).as_slice().iter().sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), Some(Matrix::scalar(s)), rg)
    }

    /// `0.5 * sum(x^2)`.
    pub fn half_squared_norm(&mut self, x: NodeId) -> NodeId {
        let s = 0.5 * self.value(x).as_slice().iter().map(|v| v * v).sum::<f64>();
        let rg = self.rg(x);
        self.push(Op::HalfSquaredNorm(x), Some(Matrix::scalar(s)), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(x, y)| x + y).collect();
        let y = Matrix::from_vec(va.rows(), va.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), Some(y), rg))
    }

    /// Flags of nodes whose value influences the loss.
    fn reaches_loss(&self) -> Vec<bool> {
        let mut reach = vec![false; self.nodes.len()];
        let Some(loss) = self.loss else { return reach };
        reach[loss.0] = true;
        for id in (0..=loss.0).rev() {
            if !reach[id] {
                continue;
            }
            for input in self.inputs(NodeId(id)) {
                reach[input.0] = true;
            }
        }
        reach
    }

    fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Input | Op::Param(_) | Op::Embedding { .. } => Vec::new(),
            Op::Linear { x, .. } | Op::LayerNorm { x, .. } => vec![*x],
            Op::Tanh(x) | Op::Relu(x) | Op::Sum(x) | Op::HalfSquaredNorm(x) => vec![*x],
            Op::Mse { pred, .. } => vec![*pred],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Add(a, b) => vec![*a, *b],
        }
    }

    /// Earliest node reading any of `tensors`.
    pub fn first_node_using(&self, tensors: &[TensorId]) -> Option<NodeId> {
        let wanted: HashSet<_> = tensors.iter().copied().collect();
        self.nodes
            .iter()
            .position(|n| n.op.tensors().iter().any(|t| wanted.contains(t)))
            .map(NodeId)
    }

    /// Parameter-gradient multiply-accumulates each node would spend under
    /// `mask`, without running the backward pass. Matches the instrumented
    /// counts of [`super::backward_chunked`] exactly.
    pub fn param_grad_flops(&self, mask: &ActiveMask) -> Result<Vec<u64>> {
        let index = mask.index(self.params)?;
        let reach = self.reaches_loss();
        let mut out = vec![0u64; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if !reach[id] {
                continue;
            }
            out[id] = match &node.op {
                Op::Param(t) => {
                    let cols = self.params.get(*t)?.cols();
                    index.slices_of(*t).iter().map(|s| (s.num_rows() * cols) as u64).sum()
                }
                Op::Linear { x, weight, bias } => {
                    let xv = self.value(*x);
                    let (batch, in_dim) = (xv.rows(), xv.cols());
                    let w: u64 = index.slices_of(*weight).iter().map(|s| (s.num_rows() * batch * in_dim) as u64).sum();
                    let b: u64 = bias
                        .map(|b| index.slices_of(b).iter().map(|s| (s.num_rows() * batch) as u64).sum())
                        .unwrap_or(0);
                    w + b
                }
                Op::Embedding { table, tokens } => {
                    let dim = self.params.get(*table)?.cols() as u64;
                    index
                        .slices_of(*table)
                        .iter()
                        .map(|s| tokens.iter().filter(|t| s.rows().contains(t)).count() as u64 * dim)
                        .sum()
                }
                Op::LayerNorm { x, gamma, beta, .. } => {
                    let batch = self.value(*x).rows();
                    [gamma, beta]
                        .iter()
                        .map(|t| index.slices_of(**t).iter().map(|s| (s.num_rows() * batch) as u64).sum::<u64>())
                        .sum()
                }
                _ => 0,
            };
        }
        Ok(out)
    }

    pub(crate) fn backward(&self, mask: &ActiveMask) -> Result<GradBag> {
        let index: MaskIndex = mask.index(self.params)?;
        let mut bag = GradBag::allocate(mask, self.params)?;
        let Some(loss) = self.loss else {
            return Err(Error::shape("backward", "tape has no loss node"));
        };
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(t) => {
                    for s in index.slices_of(*t) {
                        let slot = bag.slot(s);
                        for r in s.rows() {
                            for (acc, g) in slot.row_mut(r - s.row_begin).iter_mut().zip(dy.row(r)) {
                                *acc += g;
                            }
                        }
                        let flops = (s.num_rows() * dy.cols()) as u64;
                        bag.add_flops(flops);
                    }
                }
                Op::Linear { x, weight, bias } => {
                    let w = self.param(*weight)?;
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, nn::linear_dx(w, &dy));
                    }
                    let xv = self.value(*x);
                    for s in index.slices_of(*weight) {
                        let f = nn::linear_weight_grad_into(xv, &dy, s.rows(), bag.slot(s));
                        bag.add_flops(f);
                    }
                    if let Some(b) = bias {
                        for s in index.slices_of(*b) {
                            let f = nn::linear_bias_grad_into(&dy, s.rows(), bag.slot(s));
                            bag.add_flops(f);
                        }
                    }
                }
                Op::Embedding { table, tokens } => {
                    for s in index.slices_of(*table) {
                        let f = nn::embedding_grad_into(tokens, &dy, s.rows(), bag.slot(s));
                        bag.add_flops(f);
                    }
                }
                Op::LayerNorm { x, gamma, beta, saved } => {
                    let ctx = LayerNormCtx { saved, gamma: self.param(*gamma)? };
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, nn::layernorm_dx(&ctx, &dy));
                    }
                    for s in index.slices_of(*gamma) {
                        let f = nn::layernorm_gamma_grad_into(&saved.xhat, &dy, s.rows(), bag.slot(s));
                        bag.add_flops(f);
                    }
                    for s in index.slices_of(*beta) {
                        let f = nn::layernorm_beta_grad_into(&dy, s.rows(), bag.slot(s));
                        bag.add_flops(f);
                    }
                }
                Op::Tanh(x) => {
                    let y = node.value.as_ref().expect("tanh value");
                    let data = dy.as_slice().iter().zip(y.as_slice()).map(|(g, t)| g * (1.0 - t * t)).collect();
                    accumulate(&mut grads, *x, Matrix::from_vec(dy.rows(), dy.cols(), data)?);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = dy
                        .as_slice()
                        .iter()
                        .zip(xv.as_slice())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Matrix::from_vec(dy.rows(), dy.cols(), data)?);
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let scale = dy.get(0, 0) * 2.0 / p.len() as f64;
                    let data = p.as_slice().iter().zip(target.as_slice()).map(|(a, b)| scale * (a - b)).collect();
                    accumulate(&mut grads, *pred, Matrix::from_vec(p.rows(), p.cols(), data)?);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let scale = dy.get(0, 0) / labels.len() as f64;
                    let mut d = probs.clone();
                    for (n, &label) in labels.iter().enumerate() {
                        let v = d.get(n, label);
                        d.set(n, label, v - 1.0);
                    }
                    d.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *logits, d);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let g = dy.get(0, 0);
                    accumulate(&mut grads, *x, Matrix::from_vec(xv.rows(), xv.cols(), vec![g; xv.len()])?);
                }
                Op::HalfSquaredNorm(x) => {
                    let xv = self.value(*x);
                    let g = dy.get(0, 0);
                    let data = xv.as_slice().iter().map(|v| g * v).collect();
                    accumulate(&mut grads, *x, Matrix::from_vec(xv.rows(), xv.cols(), data)?);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, dy);
                    }
                }
            }
        }
        Ok(bag)
    }

    /// Name of the operation recorded at `id`, for diagnostics.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
