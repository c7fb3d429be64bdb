//! Memory and gradient-generation cost accounting.
//!
//! Memory is modelled per step as resident parameters + device-resident chunk
//! states (+ gradient buffers of the active chunk) + a constant activation
//! term + in-flight transfer buffers. Costs count only the multiply-accumulates
//! that produce parameter gradients.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::ActiveMask;
use crate::error::{Error, Result};
use crate::model::{forward, Batch, Model};
use crate::partition::CostPolicy;
use crate::tensor::TensorId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemorySample {
    pub step: usize,
    pub resident_param_bytes: u64,
    pub active_state_bytes: u64,
    pub activation_bytes: u64,
    pub transfer_buffer_bytes: u64,
    pub total: u64,
}

impl MemorySample {
    pub fn new(step: usize, resident: u64, active: u64, activation: u64, transfer: u64) -> Self {
        Self {
            step,
            resident_param_bytes: resident,
            active_state_bytes: active,
            activation_bytes: activation,
            transfer_buffer_bytes: transfer,
            total: resident + active + activation + transfer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryTrace {
    samples: Vec<MemorySample>,
}

impl MemoryTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, sample: MemorySample) -> Result<()> {
        if let Some(last) = self.samples.last() {
            if sample.step <= last.step {
                return Err(Error::Layout(format!("trace steps must increase: {} after {}", sample.step, last.step)));
            }
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn from_totals(totals: &[u64]) -> Self {
        Self {
            samples: totals.iter().enumerate().map(|(i, &t)| MemorySample::new(i, t, 0, 0, 0)).collect(),
        }
    }

    pub fn samples(&self) -> &[MemorySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> Option<&MemorySample> {
        self.samples.iter().max_by_key(|s| (s.total, std::cmp::Reverse(s.step)))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.samples {
            w.serialize(s).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("memory trace", e))?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::io("csv", std::io::Error::other(e.to_string()))
}

/// `2M + 16M/K` under the default policy: resident parameters at their storage
/// width plus the active chunk's gradient, master copy and moments.
pub fn model_peak_bytes(elements: u64, k: usize, param_bytes: u64, policy: &CostPolicy) -> f64 {
    let m = elements as f64;
    param_bytes as f64 * m + policy.mutable_bytes_per_element() as f64 * m / k as f64
}

/// `(max_t M_t - min_t M_t) / mean_t M_t` over step totals.
pub fn jitter(trace: &MemoryTrace) -> Result<f64> {
    jitter_of(trace.samples.iter().map(|s| s.total as f64))
}

pub fn jitter_of(values: impl IntoIterator<Item = f64>) -> Result<f64> {
    let mut n = 0usize;
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for v in values {
        n += 1;
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    if n == 0 {
        return Err(Error::EmptyTrace);
    }
    let mean = sum / n as f64;
    if mean == 0.0 {
        return Ok(0.0);
    }
    Ok((hi - lo) / mean)
}

/// Upper estimate of byte-balanced jitter: `2 * eps_B / mean_total`.
pub fn jitter_bound(imbalance: f64, trace: &MemoryTrace) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mean = trace.samples.iter().map(|s| s.total as f64).sum::<f64>() / trace.len() as f64;
    Ok(2.0 * imbalance / mean)
}

/// Constant per-step activation footprint: `batch * width * layers * 4` bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActivationModel {
    pub batch: u64,
    pub width: u64,
    pub layers: u64,
}

impl ActivationModel {
    pub fn bytes(&self) -> u64 {
        self.batch * self.width * self.layers * 4
    }

    pub fn for_model(model: &Model, batch: usize) -> Self {
        let width = model
            .params
            .iter()
            .map(|p| p.rows().max(p.cols()))
            .max()
            .unwrap_or(0);
        Self { batch: batch as u64, width: width as u64, layers: model.layers.len().max(1) as u64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Adam,
    Lomo,
    Lora,
    BAdam,
    HiFT,
    ChunkFT,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Adam => "Adam",
            Method::Lomo => "LOMO",
            Method::Lora => "LoRA",
            Method::BAdam => "BAdam",
            Method::HiFT => "HiFT",
            Method::ChunkFT => "ChunkFT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: String,
    /// Gradient-generation backward cost per full-parameter cycle, relative to one dense backward.
    pub cost: f64,
}

impl CostReport {
    pub fn summary(&self) -> String {
        format!("method = \"{}\"\ngrad_generation_cost_per_cycle = {}\n", self.method, self.cost)
    }
}

/// Closed-form gradient-generation cost per full-parameter cycle.
///
/// Layer-wise rotation (BAdam, HiFT) pays the suffix backward from the loss
/// down to the selected block, giving `(K + 1) / 2` for uniform blocks.
pub fn analytic_bp_cost(method: Method, k: usize, lora_rank: Option<usize>, dim: Option<usize>) -> Result<CostReport> {
    let cost = match method {
        Method::Adam | Method::Lomo | Method::ChunkFT => 1.0,
        Method::Lora => {
            let r = lora_rank.ok_or(Error::MissingArgument { method: "LoRA", argument: "lora_rank" })?;
            let m = dim.ok_or(Error::MissingArgument { method: "LoRA", argument: "dim" })?;
            r as f64 / m as f64
        }
        Method::BAdam | Method::HiFT => {
            if k == 0 {
                return Err(Error::Hyper("K must be >= 1".into()));
            }
            suffix_cost_ratio(&vec![1.0; k])
        }
    };
    Ok(CostReport { method: method.name().into(), cost })
}

/// `sum_k C_{>=k} / C` for depth-ordered blocks with per-block backward costs.
pub fn suffix_cost_ratio(block_costs: &[f64]) -> f64 {
    let total: f64 = block_costs.iter().sum();
    let mut suffix = 0.0;
    let mut acc = 0.0;
    for c in block_costs.iter().rev() {
        suffix += c;
        acc += suffix;
    }
    acc / total
}

/// Per-step parameter-gradient FLOP counts of an instrumented run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepFlops {
    /// Multiply-accumulates actually spent by the chunk-aware backward.
    pub chunked: u64,
    /// What a dense backward on the same batch would have spent.
    pub dense: u64,
}

/// Gradient-generation cost over the first full rotation (`K * T` steps),
/// normalized by dense backwards on the same batches: `K * sum(chunked) / sum(dense)`.
pub fn measured_bp_cost(flops: &[StepFlops], k: usize, interval: usize) -> Result<f64> {
    let steps = k * interval;
    if flops.len() < steps || steps == 0 {
        return Err(Error::Layout(format!("need {steps} recorded steps for a full rotation, have {}", flops.len())));
    }
    let chunked: u128 = flops[..steps].iter().map(|f| f.chunked as u128).sum();
    let dense: u128 = flops[..steps].iter().map(|f| f.dense as u128).sum();
    if dense == 0 {
        return Err(Error::Layout("dense backward performs no parameter-gradient work".into()));
    }
    if chunked * k as u128 == dense {
        return Ok(1.0);
    }
    Ok((chunked * k as u128) as f64 / dense as f64)
}

/// Simulates a layer-wise rotation over `blocks` (depth order) on one batch:
/// selecting block `k` costs the dense gradient generation of every node from
/// the block's first use to the loss. Returns the cost relative to one dense backward.
pub fn layerwise_suffix_bp_cost(model: &Model, batch: &Batch, blocks: &[Vec<TensorId>]) -> Result<f64> {
    let (_, tape) = forward(model, batch)?;
    let per_node = tape.param_grad_flops(&ActiveMask::full(&model.params))?;
    let dense: u64 = per_node.iter().sum();
    let mut total = 0u64;
    for block in blocks {
        let start = tape
            .first_node_using(block)
            .ok_or_else(|| Error::Layout("block not used by the forward pass".into()))?;
        total += per_node[start.0..].iter().sum::<u64>();
    }
    Ok(total as f64 / dense as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_model_values() {
        let p = CostPolicy::default();
        assert_eq!(model_peak_bytes(7_000_000_000, 1, 2, &p), 126e9);
        assert_eq!(model_peak_bytes(7_000_000_000, 8, 2, &p), 28e9);
        let far = model_peak_bytes(7_000_000_000, 1 << 30, 2, &p);
        assert!((far - 14e9).abs() < 1e3);
    }

    #[test]
    fn jitter_values() {
        assert_eq!(jitter(&MemoryTrace::from_totals(&[10, 10, 10])).unwrap(), 0.0);
        let j = jitter_of([26.34, 26.5, 26.71]).unwrap();
        assert!((j - 0.01396).abs() < 1e-4, "{j}");
        assert_eq!((j * 100.0).round() / 100.0, 0.01);
        let b = jitter_of([37.59, 48.245, 58.90]).unwrap();
        assert!((b - 0.44).abs() < 0.005, "{b}");
        assert!(matches!(jitter(&MemoryTrace::new()), Err(Error::EmptyTrace)));
    }

    #[test]
    fn analytic_costs() {
        assert_eq!(analytic_bp_cost(Method::BAdam, 3, None, None).unwrap().cost, 2.0);
        assert_eq!(analytic_bp_cost(Method::HiFT, 4, None, None).unwrap().cost, 2.5);
        for k in [1, 7, 64] {
            assert_eq!(analytic_bp_cost(Method::ChunkFT, k, None, None).unwrap().cost, 1.0);
        }
        let lora = analytic_bp_cost(Method::Lora, 1, Some(8), Some(4096)).unwrap().cost;
        assert!((lora - 0.001953125).abs() < 1e-15);
        assert!(matches!(
            analytic_bp_cost(Method::Lora, 1, None, Some(4096)),
            Err(Error::MissingArgument { argument: "lora_rank", .. })
        ));
    }

    #[test]
    fn non_uniform_suffix_generalizes_uniform_case() {
        assert_eq!(suffix_cost_ratio(&[1.0; 4]), 2.5);
        // Heavy first block: selecting it costs everything, later blocks are cheap.
        assert_eq!(suffix_cost_ratio(&[3.0, 1.0]), 5.0 / 4.0);
    }

    #[test]
    fn trace_steps_must_increase() {
        let mut t = MemoryTrace::new();
        t.push(MemorySample::new(0, 1, 0, 0, 0)).unwrap();
        assert!(t.push(MemorySample::new(0, 1, 0, 0, 0)).is_err());
    }

    #[test]
    fn sample_total_sums_categories() {
        let s = MemorySample::new(3, 10, 20, 30, 40);
        assert_eq!(s.total, 100);
    }
}
