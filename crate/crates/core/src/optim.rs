//! Per-chunk AdamW with full-precision master weights and a local step counter.
//!
//! Each chunk owns a flat state laid out as its slices concatenated in plan
//! order, each slice row-major. Bias correction uses the chunk's own counter
//! `n`, never the global step, because chunks are updated at different times.

use serde::{Deserialize, Serialize};

use crate::autodiff::GradBag;
use crate::error::{Error, Result};
use crate::partition::{ChunkPlan, PlanSlice};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWHyper {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lambda: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self { eta: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, lambda: 0.0 }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Hyper(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Hyper(format!("beta1 must be in [0, 1), got {}", self.beta1)));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Hyper(format!("beta2 must be in [0, 1), got {}", self.beta2)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Hyper(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Hyper(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    Host,
    Device,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    sum: Vec<f64>,
    count: usize,
}

impl GradAccumulator {
    pub fn count(&self) -> usize {
        self.count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkStates {
    pub chunk_index: usize,
    pub layout: Vec<PlanSlice>,
    pub master: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Local update counter; incremented once per optimizer step, never reset.
    pub n: u64,
    pub tier: Tier,
    pub accum: Option<GradAccumulator>,
}

impl ChunkStates {
    pub fn elements(&self) -> usize {
        self.master.len()
    }

    fn require_device(&self, what: &str) -> Result<()> {
        if self.tier != Tier::Device {
            return Err(Error::Schedule(format!("{what} on chunk {} while its states are on the host", self.chunk_index)));
        }
        Ok(())
    }

    /// Flattens a gradient bag into this chunk's layout.
    pub fn flatten(&self, bag: &GradBag) -> Result<Vec<f64>> {
        if bag.len() != self.layout.len() {
            return Err(Error::Layout(format!(
                "chunk {} has {} slices, gradient bag has {}",
                self.chunk_index,
                self.layout.len(),
                bag.len()
            )));
        }
        let mut flat = Vec::with_capacity(self.elements());
        for s in &self.layout {
            let g = bag.get(&s.slice_ref()).ok_or_else(|| {
                Error::Layout(format!("gradient bag lacks {}[{}..{})", s.name, s.row_begin, s.row_end))
            })?;
            flat.extend_from_slice(g.as_slice());
        }
        Ok(flat)
    }

    /// Copies master weights into the resident model parameters.
    pub fn write_back(&self, params: &mut ParamStore) -> Result<()> {
        let mut offset = 0;
        for s in &self.layout {
            let p = params.get_mut(s.tensor)?;
            let cols = p.cols();
            let len = (s.row_end - s.row_begin) * cols;
            p.values.as_mut_slice()[s.row_begin * cols..s.row_end * cols]
                .copy_from_slice(&self.master[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }
}

pub fn init_chunk_states(plan: &ChunkPlan, chunk_index: usize, params: &ParamStore) -> Result<ChunkStates> {
    let chunk = plan
        .chunks
        .get(chunk_index)
        .ok_or_else(|| Error::Layout(format!("chunk {chunk_index} not in a plan of {}", plan.k())))?;
    let mut master = Vec::with_capacity(chunk.elements() as usize);
    for s in &chunk.slices {
        let p = params.get(s.tensor)?;
        if s.row_end > p.rows() || s.cols != p.cols() {
            return Err(Error::Layout(format!("plan slice {}[{}..{}) does not fit tensor {:?}", s.name, s.row_begin, s.row_end, p.values.shape())));
        }
        master.extend_from_slice(&p.values.as_slice()[s.row_begin * s.cols..s.row_end * s.cols]);
    }
    let len = master.len();
    Ok(ChunkStates {
        chunk_index,
        layout: chunk.slices.clone(),
        master,
        m: vec![0.0; len],
        v: vec![0.0; len],
        n: 0,
        tier: Tier::Host,
        accum: None,
    })
}

/// Adds one micro-batch gradient to the chunk's accumulator.
pub fn accumulate_grad(states: &mut ChunkStates, grad_bag: &GradBag) -> Result<()> {
    states.require_device("gradient accumulation")?;
    let flat = states.flatten(grad_bag)?;
    match &mut states.accum {
        Some(acc) => {
            for (a, g) in acc.sum.iter_mut().zip(&flat) {
                *a += g;
            }
            acc.count += 1;
        }
        None => states.accum = Some(GradAccumulator { sum: flat, count: 1 }),
    }
    Ok(())
}

/// Mean of the accumulated micro-batch gradients; clears the accumulator.
pub fn take_mean_grad(states: &mut ChunkStates) -> Result<Vec<f64>> {
    let acc = states
        .accum
        .take()
        .ok_or_else(|| Error::Schedule(format!("optimizer step on chunk {} without gradients", states.chunk_index)))?;
    let count = acc.count as f64;
    Ok(acc.sum.into_iter().map(|g| g / count).collect())
}

/// Range of the diagonal adaptive preconditioner `1 / (sqrt(v_hat) + eps)` after a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub precond_min: f64,
    pub precond_max: f64,
}

/// Chunk-local optimizer step. AdamW is the shipped implementation.
pub trait ChunkOptimizer {
    fn step(&self, states: &mut ChunkStates, grad: &[f64]) -> Result<StepStats>;
}

impl ChunkOptimizer for AdamWHyper {
    fn step(&self, states: &mut ChunkStates, grad: &[f64]) -> Result<StepStats> {
        adamw_chunk_step(states, grad, self)
    }
}

/// Plain gradient step `theta <- theta - eta * g`. Moments are left untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sgd {
    pub eta: f64,
}

impl ChunkOptimizer for Sgd {
    fn step(&self, states: &mut ChunkStates, grad: &[f64]) -> Result<StepStats> {
        states.require_device("optimizer step")?;
        if grad.len() != states.elements() {
            return Err(Error::Layout(format!("gradient of {} elements for chunk of {}", grad.len(), states.elements())));
        }
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: "gradient", context: format!("chunk {}", states.chunk_index) });
        }
        states.n += 1;
        for (theta, g) in states.master.iter_mut().zip(grad) {
            *theta -= self.eta * g;
        }
        Ok(StepStats { precond_min: 1.0, precond_max: 1.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    AdamW(AdamWHyper),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn validate(&self) -> Result<()> {
        match self {
            Optimizer::AdamW(h) => h.validate(),
            Optimizer::Sgd(s) if s.eta > 0.0 && s.eta.is_finite() => Ok(()),
            Optimizer::Sgd(s) => Err(Error::Hyper(format!("eta must be > 0, got {}", s.eta))),
        }
    }
}

impl ChunkOptimizer for Optimizer {
    fn step(&self, states: &mut ChunkStates, grad: &[f64]) -> Result<StepStats> {
        match self {
            Optimizer::AdamW(h) => adamw_chunk_step(states, grad, h),
            Optimizer::Sgd(s) => s.step(states, grad),
        }
    }
}

pub fn adamw_chunk_step(states: &mut ChunkStates, g: &[f64], hyper: &AdamWHyper) -> Result<StepStats> {
    states.require_device("optimizer step")?;
    if g.len() != states.elements() {
        return Err(Error::Layout(format!("gradient of {} elements for chunk of {}", g.len(), states.elements())));
    }
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            context: format!("chunk {} element {i}, local step {}", states.chunk_index, states.n + 1),
        });
    }
    states.n += 1;
    let n = i32::try_from(states.n).unwrap_or(i32::MAX);
    let bc1 = 1.0 - hyper.beta1.powi(n);
    let bc2 = 1.0 - hyper.beta2.powi(n);
    let mut stats = StepStats { precond_min: f64::INFINITY, precond_max: 0.0 };
    for i in 0..g.len() {
        let gi = g[i];
        states.m[i] = hyper.beta1 * states.m[i] + (1.0 - hyper.beta1) * gi;
        states.v[i] = hyper.beta2 * states.v[i] + (1.0 - hyper.beta2) * gi * gi;
        let m_hat = states.m[i] / bc1;
        let v_hat = states.v[i] / bc2;
        let denom = v_hat.sqrt() + hyper.epsilon;
        let theta = states.master[i];
        states.master[i] = theta - hyper.eta * (m_hat / denom + hyper.lambda * theta);
        let p = 1.0 / denom;
        stats.precond_min = stats.precond_min.min(p);
        stats.precond_max = stats.precond_max.max(p);
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Checkpoint blobs: "CKFT", u32 version, 32-byte plan digest, u32 chunk index,
// u64 counter n, u64 element count, then master, m, v as little-endian f64.

const MAGIC: &[u8; 4] = b"CKFT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 32 + 4 + 8 + 8;

pub fn encode_checkpoint(states: &ChunkStates, plan_digest: &[u8; 32]) -> Vec<u8> {
    let e = states.elements();
    let mut out = Vec::with_capacity(HEADER_LEN + 3 * 8 * e);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(plan_digest);
    out.extend_from_slice(&(states.chunk_index as u32).to_le_bytes());
    out.extend_from_slice(&states.n.to_le_bytes());
    out.extend_from_slice(&(e as u64).to_le_bytes());
    for arr in [&states.master, &states.m, &states.v] {
        for x in arr.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Restores a chunk's states from a blob written by [`encode_checkpoint`].
///
/// The chunk's layout comes from `plan`; the blob must carry the same plan digest.
pub fn decode_checkpoint(bytes: &[u8], plan: &ChunkPlan, expected_digest: &[u8; 32]) -> Result<ChunkStates> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing CKFT header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", u32_at(4))));
    }
    if &bytes[8..40] != expected_digest {
        return Err(Error::Checkpoint("plan digest mismatch".into()));
    }
    let chunk_index = u32_at(40) as usize;
    let n = u64_at(44);
    let e = u64_at(52) as usize;
    let chunk = plan
        .chunks
        .get(chunk_index)
        .ok_or_else(|| Error::Checkpoint(format!("chunk {chunk_index} not in plan")))?;
    if chunk.elements() as usize != e || bytes.len() != HEADER_LEN + 3 * 8 * e {
        return Err(Error::Checkpoint(format!("chunk {chunk_index}: expected {} elements", chunk.elements())));
    }
    let read = |k: usize| -> Vec<f64> {
        let base = HEADER_LEN + k * 8 * e;
        (0..e).map(|i| f64::from_le_bytes(bytes[base + 8 * i..base + 8 * i + 8].try_into().unwrap())).collect()
    };
    Ok(ChunkStates {
        chunk_index,
        layout: chunk.slices.clone(),
        master: read(0),
        m: read(1),
        v: read(2),
        n,
        tier: Tier::Host,
        accum: None,
    })
}
