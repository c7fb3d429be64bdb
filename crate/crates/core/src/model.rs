//! Sequential models over the shipped layers, and the `forward` entry point
//! that records a [`Tape`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{EmbeddingLayer, LayerNormLayer, LinearLayer};
use crate::tensor::{Matrix, ParamStore, Precision, TensorId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layer {
    Linear(LinearLayer),
    Embedding(EmbeddingLayer),
    LayerNorm(LayerNormLayer),
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossHead {
    /// Mean squared error against a dense target.
    Mse,
    /// Mean softmax cross-entropy against class labels.
    CrossEntropy,
    /// Sum of all outputs; no target.
    Sum,
    /// `0.5 * sum_l ||theta_l||^2` over all parameters, ignoring layers and data.
    ParamQuadratic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchInput {
    Dense(Matrix),
    Tokens(Vec<usize>),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Dense(Matrix),
    Labels(Vec<usize>),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: BatchInput,
    pub target: Target,
}

impl Batch {
    pub fn dense(input: Matrix, target: Matrix) -> Self {
        Self { input: BatchInput::Dense(input), target: Target::Dense(target) }
    }

    pub fn labelled(input: Matrix, labels: Vec<usize>) -> Self {
        Self { input: BatchInput::Dense(input), target: Target::Labels(labels) }
    }

    pub fn tokens(tokens: Vec<usize>, labels: Vec<usize>) -> Self {
        Self { input: BatchInput::Tokens(tokens), target: Target::Labels(labels) }
    }

    pub fn empty() -> Self {
        Self { input: BatchInput::None, target: Target::None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ParamStore,
    pub layers: Vec<Layer>,
    pub head: LossHead,
}

impl Model {
    /// Parameters grouped per layer, in layer order. Parameter-free layers are skipped.
    pub fn layer_tensors(&self) -> Vec<Vec<TensorId>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Linear(lin) => Some(std::iter::once(lin.weight).chain(lin.bias).collect()),
                Layer::Embedding(e) => Some(vec![e.table]),
                Layer::LayerNorm(n) => Some(vec![n.gamma, n.beta]),
                Layer::Tanh | Layer::Relu => None,
            })
            .collect()
    }

    /// Model with loss `0.5 * ||theta||^2` over the given tensors.
    pub fn quadratic(tensors: Vec<Matrix>, precision: Precision) -> Result<Self> {
        let mut params = ParamStore::new();
        for (i, t) in tensors.into_iter().enumerate() {
            params.register(format!("theta{i}"), t, precision)?;
        }
        Ok(Self { params, layers: Vec::new(), head: LossHead::ParamQuadratic })
    }

    /// Multilayer perceptron `dims[0] -> dims[1] -> ... -> dims[n]` with tanh between layers.
    pub fn mlp(dims: &[usize], head: LossHead, seed: u64) -> Result<Self> {
        let mut b = ModelBuilder::new(seed);
        for (i, w) in dims.windows(2).enumerate() {
            if i > 0 {
                b.tanh();
            }
            b.linear(w[0], w[1], true)?;
        }
        Ok(b.build(head))
    }
}

/// Incremental model construction with deterministic initialization.
pub struct ModelBuilder {
    params: ParamStore,
    layers: Vec<Layer>,
    rng: ChaCha8Rng,
    precision: Precision,
}

impl ModelBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            params: ParamStore::new(),
            layers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            precision: Precision::Fp16,
        }
    }

    pub fn precision(&mut self, precision: Precision) -> &mut Self {
        self.precision = precision;
        self
    }

    fn next_name(&self) -> String {
        format!("layers.{}", self.layers.len())
    }

    pub fn linear(&mut self, in_dim: usize, out_dim: usize, bias: bool) -> Result<&mut Self> {
        let name = self.next_name();
        let l = LinearLayer::new(&mut self.params, &name, in_dim, out_dim, bias, self.precision, &mut self.rng)?;
        self.layers.push(Layer::Linear(l));
        Ok(self)
    }

    pub fn embedding(&mut self, vocab: usize, dim: usize) -> Result<&mut Self> {
        let name = self.next_name();
        let e = EmbeddingLayer::new(&mut self.params, &name, vocab, dim, self.precision, &mut self.rng)?;
        self.layers.push(Layer::Embedding(e));
        Ok(self)
    }

    pub fn layer_norm(&mut self, dim: usize, epsilon: f64) -> Result<&mut Self> {
        if epsilon <= 0.0 {
            return Err(Error::Hyper(format!("layer norm epsilon must be > 0, got {epsilon}")));
        }
        let name = self.next_name();
        let mut n = LayerNormLayer::new(&mut self.params, &name, dim, self.precision)?;
        n.epsilon = epsilon;
        self.layers.push(Layer::LayerNorm(n));
        Ok(self)
    }

    pub fn tanh(&mut self) -> &mut Self {
        self.layers.push(Layer::Tanh);
        self
    }

    pub fn relu(&mut self) -> &mut Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn build(&mut self, head: LossHead) -> Model {
        Model {
            params: std::mem::take(&mut self.params),
            layers: std::mem::take(&mut self.layers),
            head,
        }
    }
}

/// Runs the full model on `batch`, recording every operation.
///
/// The forward pass always reads every parameter; masking only happens in backward.
pub fn forward<'m>(model: &'m Model, batch: &Batch) -> Result<(f64, Tape<'m>)> {
    let mut tape = Tape::new(&model.params);
    let loss = match model.head {
        LossHead::ParamQuadratic => {
            let mut acc: Option<NodeId> = None;
            for p in model.params.iter() {
                let leaf = tape.param_leaf(p.id())?;
                let q = tape.half_squared_norm(leaf);
                acc = Some(match acc {
                    Some(a) => tape.add(a, q)?,
                    None => q,
                });
            }
            acc.ok_or_else(|| Error::shape("forward", "quadratic model without parameters"))?
        }
        head => {
            let mut cur: Option<NodeId> = match &batch.input {
                BatchInput::Dense(x) => Some(tape.input(x.clone())),
                BatchInput::Tokens(_) | BatchInput::None => None,
            };
            for (i, layer) in model.layers.iter().enumerate() {
                let next = match (layer, cur) {
                    (Layer::Embedding(e), None) => {
                        let BatchInput::Tokens(tokens) = &batch.input else {
                            return Err(Error::shape("embedding", "embedding layer needs a token batch"));
                        };
                        tape.embedding(e.table, tokens.clone())?
                    }
                    (Layer::Embedding(_), Some(_)) => {
                        return Err(Error::shape("embedding", format!("embedding at layer {i} must be the first layer")));
                    }
                    (_, None) => {
                        return Err(Error::shape("forward", format!("layer {i} has no dense input")));
                    }
                    (Layer::Linear(l), Some(x)) => {
                        let in_dim = tape.value(x).cols();
                        if in_dim != l.in_dim {
                            return Err(Error::shape(
                                "linear",
                                format!("layer {i} expects {} inputs, got {:?}", l.in_dim, tape.value(x).shape()),
                            ));
                        }
                        tape.linear(x, l.weight, l.bias)?
                    }
                    (Layer::LayerNorm(n), Some(x)) => tape.layer_norm(x, n.gamma, n.beta, n.epsilon)?,
                    (Layer::Tanh, Some(x)) => tape.tanh(x),
                    (Layer::Relu, Some(x)) => tape.relu(x),
                };
                cur = Some(next);
            }
            let out = cur.ok_or_else(|| Error::shape("forward", "model produced no output"))?;
            match (head, &batch.target) {
                (LossHead::Mse, Target::Dense(t)) => tape.mse(out, t.clone())?,
                (LossHead::CrossEntropy, Target::Labels(l)) => tape.cross_entropy(out, l.clone())?,
                (LossHead::Sum, _) => tape.sum(out),
                (h, _) => return Err(Error::shape("forward", format!("target kind does not match loss head {h:?}"))),
            }
        }
    };
    tape.set_loss(loss)?;
    let value = tape.loss()?;
    if !value.is_finite() {
        return Err(Error::NonFinite { what: "loss", context: format!("forward over {} recorded ops", tape.len()) });
    }
    Ok((value, tape))
}
