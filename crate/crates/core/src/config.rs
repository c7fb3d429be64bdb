//! Experiment configuration documents (TOML).
//!
//! Defaults: `seed = 0`; data `generator = "none"`, `samples = 1000`,
//! `batch = 32`, `classes = 4`, `spread = 3.0`, data seed = `seed + 1`;
//! schedule `K = 8`, `T = K`, `prefetch = false`, `grad_accum = 1`,
//! `plan = "balanced"`, `ticks_per_step = 1000`, instantaneous transfers;
//! optimizer AdamW with `eta = 1e-3`, `beta1 = 0.9`, `beta2 = 0.999`,
//! `epsilon = 1e-8`, `lambda = 0`; policy 4 bytes each for gradient, master
//! copy and both moments; model `head = "cross_entropy"`, `precision = "fp16"`,
//! linear `bias = true`, layer norm `epsilon = 1e-5`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LossHead, Model, ModelBuilder};
use crate::optim::{AdamWHyper, Optimizer, Sgd};
use crate::partition::CostPolicy;
use crate::schedule::{ScheduleConfig, TransferModel};
use crate::tensor::{uniform_init, Precision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub model: ModelSpec,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub policy: PolicySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
    /// Tensor shapes `[rows, cols]` of a `0.5 * ||theta||^2` model; excludes `layers`.
    #[serde(default)]
    pub quadratic: Vec<[usize; 2]>,
    #[serde(default = "default_head")]
    pub head: LossHead,
    #[serde(default)]
    pub precision: PrecisionSpec,
}

fn default_head() -> LossHead {
    LossHead::CrossEntropy
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionSpec {
    #[default]
    Fp16,
    Fp32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        #[serde(rename = "in")]
        in_dim: usize,
        out: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Embedding {
        vocab: usize,
        dim: usize,
    },
    LayerNorm {
        dim: usize,
        #[serde(default = "default_ln_eps")]
        epsilon: f64,
    },
    Tanh {},
    Relu {},
}

fn yes() -> bool {
    true
}

fn default_ln_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    #[default]
    None,
    /// Gaussian class clusters over the model's input dimension.
    Blobs,
    /// Uniform tokens over the embedding vocabulary, label = token mod classes.
    Tokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub generator: Generator,
    pub samples: usize,
    pub batch: usize,
    pub classes: usize,
    pub spread: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { generator: Generator::None, samples: 1000, batch: 32, classes: 4, spread: 3.0, seed: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    /// Byte-balanced row-range chunks.
    #[default]
    Balanced,
    /// One chunk per layer (layer-wise rotation).
    PerLayer,
    /// One chunk per tensor.
    PerTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    pub prefetch: bool,
    pub grad_accum: usize,
    pub plan: PlanKind,
    pub ticks_per_step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bytes_per_tick: Option<u64>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { k: None, t: None, prefetch: false, grad_accum: 1, plan: PlanKind::Balanced, ticks_per_step: 1000, bytes_per_tick: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lambda: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let h = AdamWHyper::default();
        Self { kind: OptimizerKind::Adamw, eta: h.eta, beta1: h.beta1, beta2: h.beta2, epsilon: h.epsilon, lambda: h.lambda }
    }
}

impl OptimizerSpec {
    pub fn optimizer(&self) -> Optimizer {
        match self.kind {
            OptimizerKind::Adamw => Optimizer::AdamW(self.adamw()),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { eta: self.eta }),
        }
    }

    pub fn adamw(&self) -> AdamWHyper {
        AdamWHyper { eta: self.eta, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon, lambda: self.lambda }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySpec {
    pub grad_bytes: u64,
    pub master_bytes: u64,
    pub moment1_bytes: u64,
    pub moment2_bytes: u64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self { grad_bytes: 4, master_bytes: 4, moment1_bytes: 4, moment2_bytes: 4 }
    }
}

impl PolicySpec {
    pub fn policy(&self) -> Result<CostPolicy> {
        CostPolicy::new(self.grad_bytes, self.master_bytes, self.moment1_bytes, self.moment2_bytes)
    }
}

impl ExperimentConfig {
    pub fn k(&self) -> usize {
        self.schedule.k.unwrap_or(8)
    }

    pub fn interval(&self) -> usize {
        self.schedule.t.unwrap_or_else(|| self.k())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed.wrapping_add(1))
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            k: self.k(),
            interval: self.interval(),
            total_steps: self.steps,
            prefetch: self.schedule.prefetch,
            grad_accum: self.schedule.grad_accum,
            transfer: TransferModel {
                ticks_per_step: self.schedule.ticks_per_step,
                bytes_per_tick: self.schedule.bytes_per_tick,
            },
        }
    }

    pub fn precision(&self) -> Precision {
        match self.model.precision {
            PrecisionSpec::Fp16 => Precision::Fp16,
            PrecisionSpec::Fp32 => Precision::Fp32,
        }
    }

    /// Builds the model with deterministic initialization from `seed`.
    pub fn build_model(&self) -> Result<Model> {
        if !self.model.quadratic.is_empty() {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(self.seed);
            let tensors = self.model.quadratic.iter().map(|&[r, c]| uniform_init(r, c, 1.0, &mut rng)).collect();
            return Model::quadratic(tensors, self.precision());
        }
        let mut b = ModelBuilder::new(self.seed);
        b.precision(self.precision());
        for l in &self.model.layers {
            match *l {
                LayerSpec::Linear { in_dim, out, bias } => {
                    b.linear(in_dim, out, bias)?;
                }
                LayerSpec::Embedding { vocab, dim } => {
                    b.embedding(vocab, dim)?;
                }
                LayerSpec::LayerNorm { dim, epsilon } => {
                    b.layer_norm(dim, epsilon)?;
                }
                LayerSpec::Tanh {} => {
                    b.tanh();
                }
                LayerSpec::Relu {} => {
                    b.relu();
                }
            }
        }
        Ok(b.build(self.model.head))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses, defaults and validates a configuration document.
pub fn validate_config(document: &str) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig =
        toml::from_str(document).map_err(|e| Error::config("document", e.message().to_string()))?;
    if cfg.steps == 0 {
        return Err(Error::config("steps", "steps ≥ 1"));
    }
    let m = &cfg.model;
    if m.layers.is_empty() == m.quadratic.is_empty() {
        return Err(Error::config("model", "exactly one of `layers` or `quadratic` must be given"));
    }
    if !m.quadratic.is_empty() {
        if m.quadratic.iter().any(|[r, c]| *r == 0 || *c == 0) {
            return Err(Error::config("model.quadratic", "every shape must have rows ≥ 1 and cols ≥ 1"));
        }
        cfg.model.head = LossHead::ParamQuadratic;
    } else if m.head == LossHead::ParamQuadratic {
        return Err(Error::config("model.head", "param_quadratic requires `quadratic` shapes"));
    }
    let s = &cfg.schedule;
    if s.k == Some(0) {
        return Err(Error::config("schedule.K", "K ≥ 1"));
    }
    if s.t == Some(0) {
        return Err(Error::config("schedule.T", "T ≥ 1"));
    }
    if s.grad_accum == 0 {
        return Err(Error::config("schedule.grad_accum", "grad_accum ≥ 1"));
    }
    if s.ticks_per_step == 0 {
        return Err(Error::config("schedule.ticks_per_step", "ticks_per_step ≥ 1"));
    }
    if s.bytes_per_tick == Some(0) {
        return Err(Error::config("schedule.bytes_per_tick", "bytes_per_tick ≥ 1"));
    }
    let d = &cfg.data;
    if d.generator != Generator::None && (d.samples == 0 || d.batch == 0 || d.batch > d.samples) {
        return Err(Error::config("data.batch", "1 ≤ batch ≤ samples"));
    }
    if d.generator != Generator::None && d.classes < 2 {
        return Err(Error::config("data.classes", "classes ≥ 2"));
    }
    cfg.optimizer.optimizer().validate().map_err(|e| Error::config("optimizer", e.to_string()))?;
    cfg.policy.policy().map_err(|e| Error::config("policy", e.to_string()))?;

    // Cross-check against the model: chunk count is bounded by row granularity.
    let model = cfg.build_model()?;
    let rows: u64 = model.params.metas().iter().filter(|m| m.trainable).map(|m| m.rows as u64).sum();
    if cfg.schedule.plan == PlanKind::Balanced && cfg.k() as u64 > rows {
        return Err(Error::ChunkCount { k: cfg.k(), rows });
    }
    if cfg.schedule.plan != PlanKind::Balanced && cfg.schedule.k.is_none() {
        // Layer and tensor plans fix K; fill it in so T defaults to it.
        let k = match cfg.schedule.plan {
            PlanKind::PerLayer => model.layer_tensors().len(),
            _ => model.params.len(),
        };
        cfg.schedule.k = Some(k);
    }
    cfg.schedule.k = Some(cfg.k());
    cfg.schedule.t = Some(cfg.interval());
    Ok(cfg)
}
