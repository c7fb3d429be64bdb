//! Rotation control loop.
//!
//! Every `T` steps the next chunk becomes active (`k = I mod K`): its states are
//! loaded from the host tier, updated for `T` steps, then offloaded. Transfers
//! run on a single simulated worker with a tick clock; they only move timing
//! metadata, never values, so results match a fully synchronous run.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::accounting::{csv_err, ActivationModel, MemorySample, MemoryTrace, StepFlops};
use crate::autodiff::{backward_chunked, ActiveMask};
use crate::error::{Error, Result};
use crate::model::{forward, Batch, BatchInput, Model};
use crate::optim::{
    accumulate_grad, decode_checkpoint, encode_checkpoint, init_chunk_states, take_mean_grad, ChunkOptimizer,
    ChunkStates, Optimizer, StepStats, Tier,
};
use crate::partition::{ChunkPlan, CostPolicy};

/// Transfer timing: `ceil(bytes / bytes_per_tick)` ticks per transfer, `ticks_per_step` ticks per step.
/// `bytes_per_tick = None` makes every transfer instantaneous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferModel {
    pub ticks_per_step: u64,
    pub bytes_per_tick: Option<u64>,
}

impl Default for TransferModel {
    fn default() -> Self {
        Self { ticks_per_step: 1000, bytes_per_tick: None }
    }
}

impl TransferModel {
    pub fn duration(&self, bytes: u64) -> u64 {
        match self.bytes_per_tick {
            Some(bw) => bytes.div_ceil(bw.max(1)),
            None => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub k: usize,
    /// Steps per active chunk (`T`).
    pub interval: usize,
    pub total_steps: usize,
    pub prefetch: bool,
    /// Micro-batches accumulated per optimizer step.
    pub grad_accum: usize,
    pub transfer: TransferModel,
}

impl ScheduleConfig {
    /// `T = K`, no prefetch, one micro-batch per step, instantaneous transfers.
    pub fn new(k: usize, total_steps: usize) -> Self {
        Self { k, interval: k, total_steps, prefetch: false, grad_accum: 1, transfer: TransferModel::default() }
    }

    pub fn with_interval(mut self, interval: usize) -> Self {
        self.interval = interval;
        self
    }

    pub fn with_prefetch(mut self, prefetch: bool) -> Self {
        self.prefetch = prefetch;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("K", "K >= 1"));
        }
        if self.interval == 0 {
            return Err(Error::config("T", "T >= 1"));
        }
        if self.grad_accum == 0 {
            return Err(Error::config("grad_accum", "grad_accum >= 1"));
        }
        if self.transfer.ticks_per_step == 0 {
            return Err(Error::config("ticks_per_step", "ticks_per_step >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Load,
    Offload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub chunk: usize,
    pub direction: Direction,
    pub bytes: u64,
    pub issue_step: usize,
    pub issue_tick: u64,
    pub start_tick: u64,
    pub complete_tick: u64,
    pub speculative: bool,
}

impl TransferEvent {
    pub fn latency(&self) -> u64 {
        self.complete_tick - self.start_tick
    }

    /// Step during which the transfer completes.
    pub fn complete_step(&self, ticks_per_step: u64) -> usize {
        (self.complete_tick / ticks_per_step) as usize
    }

    /// Ticks during which the transfer holds a staging buffer. Queued offloads
    /// hold their states from issue; loads allocate when they start.
    fn buffer_window(&self) -> (u64, u64) {
        match self.direction {
            Direction::Load => (self.start_tick, self.complete_tick),
            Direction::Offload => (self.issue_tick, self.complete_tick),
        }
    }
}

/// Data-plane work the driver must perform for a scheduling decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Load { chunk: usize, speculative: bool },
    Offload { chunk: usize },
    /// Drop a clean device copy; the host copy is already current.
    Release { chunk: usize },
}

/// Everything the memory accounting needs to rebuild a per-step trace.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResidencyLog {
    pub ticks_per_step: u64,
    /// Active chunk per executed step.
    pub active: Vec<usize>,
    /// Intervals `[from, to)` during which the training worker owns a chunk's states.
    pub ownership: Vec<(usize, u64, u64)>,
    pub transfers: Vec<TransferEvent>,
}

#[derive(Debug, Clone)]
pub struct ScheduleState {
    config: ScheduleConfig,
    state_bytes: Vec<u64>,
    /// Active index counter `I`.
    pub i: usize,
    /// Global step `t`.
    pub t: usize,
    /// Chunks whose states are on the device and owned by the training worker.
    pub resident: BTreeSet<usize>,
    /// Issued transfers not yet complete at the current step's start.
    pub pending_transfers: Vec<TransferEvent>,
    owned_since: BTreeMap<usize, u64>,
    dirty: BTreeSet<usize>,
    worker_free: u64,
    stall_ticks: u64,
    noop_loads: usize,
    log: ResidencyLog,
}

impl ScheduleState {
    /// `state_bytes[k]` is the transfer size of chunk `k`'s master weights and moments.
    pub fn new(config: ScheduleConfig, state_bytes: Vec<u64>) -> Result<Self> {
        config.validate()?;
        if state_bytes.len() != config.k {
            return Err(Error::Schedule(format!("{} chunk sizes for K = {}", state_bytes.len(), config.k)));
        }
        Ok(Self {
            config,
            state_bytes,
            i: 0,
            t: 0,
            resident: BTreeSet::new(),
            pending_transfers: Vec::new(),
            owned_since: BTreeMap::new(),
            dirty: BTreeSet::new(),
            worker_free: 0,
            stall_ticks: 0,
            noop_loads: 0,
            log: ResidencyLog { ticks_per_step: config.transfer.ticks_per_step, ..Default::default() },
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn active_chunk(&self) -> usize {
        self.i % self.config.k
    }

    pub fn stall_ticks(&self) -> u64 {
        self.stall_ticks
    }

    pub fn noop_loads(&self) -> usize {
        self.noop_loads
    }

    pub fn log(&self) -> &ResidencyLog {
        &self.log
    }

    pub fn into_log(self) -> ResidencyLog {
        self.log
    }

    fn tick(&self, step: usize) -> u64 {
        step as u64 * self.config.transfer.ticks_per_step
    }

    fn transfer(&mut self, chunk: usize, direction: Direction, issue: u64, ready_by: u64, speculative: bool) -> TransferEvent {
        let bytes = self.state_bytes[chunk];
        let d = self.config.transfer.duration(bytes);
        let start = self.worker_free.max(issue).max(ready_by.saturating_sub(d));
        let ev = TransferEvent {
            chunk,
            direction,
            bytes,
            issue_step: self.t,
            issue_tick: issue,
            start_tick: start,
            complete_tick: start + d,
            speculative,
        };
        self.worker_free = ev.complete_tick;
        self.log.transfers.push(ev);
        self.pending_transfers.push(ev);
        ev
    }

    fn request_load(&mut self, chunk: usize, ready_by: u64, speculative: bool) -> Option<Action> {
        if self.resident.contains(&chunk) {
            self.noop_loads += 1;
            log::debug!("step {}: chunk {chunk} already resident, load skipped", self.t);
            return None;
        }
        let ev = self.transfer(chunk, Direction::Load, self.tick(self.t), ready_by, speculative);
        self.stall_ticks += ev.complete_tick.saturating_sub(ready_by);
        self.resident.insert(chunk);
        self.owned_since.insert(chunk, ev.complete_tick);
        Some(Action::Load { chunk, speculative })
    }

    fn offload(&mut self, chunk: usize, issue: u64) -> Action {
        self.close_ownership(chunk, issue);
        if self.dirty.remove(&chunk) {
            self.transfer(chunk, Direction::Offload, issue, issue, false);
            Action::Offload { chunk }
        } else {
            Action::Release { chunk }
        }
    }

    fn close_ownership(&mut self, chunk: usize, at: u64) {
        self.resident.remove(&chunk);
        if let Some(from) = self.owned_since.remove(&chunk) {
            self.log.ownership.push((chunk, from.min(at), at));
        }
    }

    pub fn step_begin(&mut self) -> Result<Vec<Action>> {
        if self.t >= self.config.total_steps {
            return Err(Error::Schedule(format!("step {} past total_steps {}", self.t, self.config.total_steps)));
        }
        let now = self.tick(self.t);
        self.pending_transfers.retain(|e| e.complete_tick > now);
        let mut actions = Vec::new();
        let k = self.config.k;
        let c = self.active_chunk();
        if self.t % self.config.interval == 0 {
            actions.extend(self.request_load(c, now, false));
            let next = (self.i + 1) % k;
            if self.config.prefetch && next != c {
                let activation = self.tick(self.t + self.config.interval);
                if self.t + self.config.interval < self.config.total_steps {
                    actions.extend(self.request_load(next, activation, true));
                }
            }
        }
        if !self.resident.contains(&c) {
            return Err(Error::Schedule(format!("step {}: active chunk {c} is not resident", self.t)));
        }
        self.log.active.push(c);
        Ok(actions)
    }

    /// Closes step `t`. `pending_grads` reports whether the active chunk still
    /// holds unconsumed gradients, which forbids offloading it.
    pub fn step_end(&mut self, pending_grads: bool) -> Result<Vec<Action>> {
        let c = self.active_chunk();
        self.dirty.insert(c);
        let end = self.tick(self.t + 1);
        let mut actions = Vec::new();
        let last = self.t + 1 == self.config.total_steps;
        let rotating = self.t % self.config.interval == self.config.interval - 1;
        if (rotating || last) && pending_grads {
            return Err(Error::Schedule(format!("step {}: offload of chunk {c} with gradients pending", self.t)));
        }
        if rotating {
            let next = (self.i + 1) % self.config.k;
            if next != c {
                actions.push(self.offload(c, end));
            }
            self.i += 1;
        }
        if last {
            let remaining: Vec<usize> = self.resident.iter().copied().collect();
            for chunk in remaining {
                actions.push(self.offload(chunk, end));
            }
        }
        self.t += 1;
        Ok(actions)
    }
}

/// Runs the schedule alone, without any compute.
pub fn simulate_schedule(config: ScheduleConfig, state_bytes: Vec<u64>) -> Result<ResidencyLog> {
    let mut s = ScheduleState::new(config, state_bytes)?;
    for _ in 0..config.total_steps {
        s.step_begin()?;
        s.step_end(false)?;
    }
    Ok(s.into_log())
}

/// Static inputs of the per-step memory model.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLayout {
    pub resident_param_bytes: u64,
    pub chunk_elements: Vec<u64>,
    pub policy: CostPolicy,
    pub activation_bytes: u64,
}

impl MemoryLayout {
    pub fn state_bytes(&self) -> Vec<u64> {
        self.chunk_elements.iter().map(|e| e * self.policy.state_bytes_per_element()).collect()
    }
}

/// Per-step samples: the active chunk's states and gradients, states of other
/// chunks owned during the step, and staging buffers of transfers whose window
/// overlaps the step.
pub fn memory_trace(log: &ResidencyLog, layout: &MemoryLayout) -> Result<MemoryTrace> {
    let steps = log.active.len();
    let s = log.ticks_per_step;
    let mut extra_state = vec![0u64; steps];
    let mut transfer = vec![0u64; steps];
    let overlapping = |from: u64, to: u64| {
        let first = (from / s) as usize;
        let last = to.div_ceil(s) as usize;
        first..last.min(steps)
    };
    for &(chunk, from, to) in &log.ownership {
        if from >= to {
            continue;
        }
        for t in overlapping(from, to) {
            if log.active[t] != chunk {
                extra_state[t] += layout.chunk_elements[chunk] * layout.policy.state_bytes_per_element();
            }
        }
    }
    for ev in &log.transfers {
        let (from, to) = ev.buffer_window();
        if from >= to {
            continue;
        }
        for t in overlapping(from, to) {
            transfer[t] += ev.bytes;
        }
    }
    let mut trace = MemoryTrace::new();
    for t in 0..steps {
        let e = layout.chunk_elements[log.active[t]];
        let active = e * layout.policy.mutable_bytes_per_element() + extra_state[t];
        trace.push(MemorySample::new(t, layout.resident_param_bytes, active, layout.activation_bytes, transfer[t]))?;
    }
    Ok(trace)
}

pub fn write_transfer_log<W: Write>(transfers: &[TransferEvent], ticks_per_step: u64, out: W) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        step: usize,
        chunk: usize,
        direction: Direction,
        bytes: u64,
        latency: u64,
        complete_step: usize,
        speculative: bool,
    }
    let mut w = csv::Writer::from_writer(out);
    for e in transfers {
        w.serialize(Row {
            step: e.issue_step,
            chunk: e.chunk,
            direction: e.direction,
            bytes: e.bytes,
            latency: e.latency(),
            complete_step: e.complete_step(ticks_per_step),
            speculative: e.speculative,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("transfer log", e))?;
    Ok(())
}

/// Source of training batches; advanced once per micro-batch regardless of the active chunk.
pub trait BatchSource {
    fn next_batch(&mut self) -> Result<Batch>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub step: usize,
    /// Rotation slot counter `I` during the step.
    pub epoch: usize,
    /// Position inside the slot, `t mod T`.
    pub inner: usize,
    pub chunk: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub model: Model,
    pub trace: MemoryTrace,
    pub trajectory: Vec<TrajectoryEntry>,
    pub transfers: Vec<TransferEvent>,
    pub flops: Vec<StepFlops>,
    pub step_stats: Vec<StepStats>,
    /// Host-tier checkpoint blob of every chunk after the final flush.
    pub host_blobs: Vec<Vec<u8>>,
    pub layout: MemoryLayout,
    pub stall_ticks: u64,
    pub ticks_per_step: u64,
}

impl TrainingRun {
    pub fn chunk_states(&self, plan: &ChunkPlan) -> Result<Vec<ChunkStates>> {
        let digest = plan.digest();
        self.host_blobs.iter().map(|b| decode_checkpoint(b, plan, &digest)).collect()
    }

    pub fn write_trajectory<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.trajectory {
            w.serialize(e).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("trajectory", e))?;
        Ok(())
    }
}

fn batch_rows(batch: &Batch) -> usize {
    match &batch.input {
        BatchInput::Dense(x) => x.rows(),
        BatchInput::Tokens(t) => t.len(),
        BatchInput::None => 1,
    }
}

/// Trains `model` with chunk rotation. Only the active chunk's rows receive
/// gradients; each step is forward, masked backward, accumulate, optimizer step.
pub fn run_training(
    mut model: Model,
    data: &mut dyn BatchSource,
    plan: &ChunkPlan,
    config: &ScheduleConfig,
    optimizer: &Optimizer,
) -> Result<TrainingRun> {
    config.validate()?;
    optimizer.validate()?;
    let metas = model.params.metas();
    plan.validate(&metas)?;
    if plan.k() != config.k {
        return Err(Error::Schedule(format!("plan has {} chunks, schedule expects K = {}", plan.k(), config.k)));
    }
    let digest = plan.digest();
    let mut host: Vec<Vec<u8>> = (0..plan.k())
        .map(|k| init_chunk_states(plan, k, &model.params).map(|s| encode_checkpoint(&s, &digest)))
        .collect::<Result<_>>()?;
    let masks: Vec<ActiveMask> = plan.chunks.iter().map(|c| c.mask()).collect();
    let full = ActiveMask::full(&model.params);
    let mut layout = MemoryLayout {
        resident_param_bytes: metas.iter().map(|m| m.elements() * m.precision.bytes()).sum(),
        chunk_elements: plan.chunks.iter().map(|c| c.elements()).collect(),
        policy: plan.policy,
        activation_bytes: 0,
    };
    let mut sched = ScheduleState::new(*config, layout.state_bytes())?;
    let mut device: BTreeMap<usize, ChunkStates> = BTreeMap::new();
    let mut trajectory = Vec::with_capacity(config.total_steps);
    let mut flops = Vec::with_capacity(config.total_steps);
    let mut step_stats = Vec::with_capacity(config.total_steps);
    let mut activation: Option<ActivationModel> = None;

    let apply = |actions: Vec<Action>, device: &mut BTreeMap<usize, ChunkStates>, host: &mut Vec<Vec<u8>>| -> Result<()> {
        for a in actions {
            match a {
                Action::Load { chunk, .. } => {
                    let mut s = decode_checkpoint(&host[chunk], plan, &digest)?;
                    s.tier = Tier::Device;
                    device.insert(chunk, s);
                }
                Action::Offload { chunk } => {
                    let mut s = device
                        .remove(&chunk)
                        .ok_or_else(|| Error::Schedule(format!("offload of non-resident chunk {chunk}")))?;
                    s.tier = Tier::Host;
                    host[chunk] = encode_checkpoint(&s, &digest);
                }
                Action::Release { chunk } => {
                    device.remove(&chunk);
                }
            }
        }
        Ok(())
    };

    for t in 0..config.total_steps {
        let epoch = sched.i;
        let c = sched.active_chunk();
        let ctx = |e: Error| e.at_step(t, c);
        let actions = sched.step_begin().map_err(ctx)?;
        apply(actions, &mut device, &mut host).map_err(ctx)?;
        let states = device
            .get_mut(&c)
            .ok_or_else(|| Error::Schedule(format!("active chunk {c} has no device states")))
            .map_err(ctx)?;
        debug_assert_eq!(states.tier, Tier::Device);

        let mut loss_sum = 0.0;
        let mut step_flops = StepFlops::default();
        for _ in 0..config.grad_accum {
            let batch = data.next_batch().map_err(ctx)?;
            activation.get_or_insert_with(|| ActivationModel::for_model(&model, batch_rows(&batch)));
            let (loss, tape) = forward(&model, &batch).map_err(ctx)?;
            let bag = backward_chunked(&tape, &masks[c]).map_err(ctx)?;
            step_flops.chunked += bag.flops();
            step_flops.dense += tape.param_grad_flops(&full).map_err(ctx)?.iter().sum::<u64>();
            accumulate_grad(states, &bag).map_err(ctx)?;
            loss_sum += loss;
        }
        let g = take_mean_grad(states).map_err(ctx)?;
        let grad_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        step_stats.push(optimizer.step(states, &g).map_err(ctx)?);
        states.write_back(&mut model.params).map_err(ctx)?;
        let pending = states.accum.is_some();

        trajectory.push(TrajectoryEntry {
            step: t,
            epoch,
            inner: t % config.interval,
            chunk: c,
            loss: loss_sum / config.grad_accum as f64,
            grad_norm,
        });
        flops.push(step_flops);
        let actions = sched.step_end(pending).map_err(ctx)?;
        apply(actions, &mut device, &mut host).map_err(ctx)?;
    }
    if !device.is_empty() {
        return Err(Error::Schedule(format!("{} chunks still on the device after the final flush", device.len())));
    }
    if !model.params.all_finite() {
        return Err(Error::NonFinite { what: "parameters", context: "after training".into() });
    }

    layout.activation_bytes = activation.map(|a| a.bytes()).unwrap_or(0);
    let stall_ticks = sched.stall_ticks();
    let log = sched.into_log();
    let trace = memory_trace(&log, &layout)?;
    Ok(TrainingRun {
        model,
        trace,
        trajectory,
        transfers: log.transfers,
        flops,
        step_stats,
        host_blobs: host,
        layout,
        stall_ticks,
        ticks_per_step: config.transfer.ticks_per_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(config: ScheduleConfig) -> (Vec<usize>, ResidencyLog) {
        let mut s = ScheduleState::new(config, vec![120; config.k]).unwrap();
        let mut active = Vec::new();
        for _ in 0..config.total_steps {
            s.step_begin().unwrap();
            active.push(s.active_chunk());
            s.step_end(false).unwrap();
        }
        (active, s.into_log())
    }

    fn steps_of(log: &ResidencyLog, dir: Direction) -> Vec<usize> {
        log.transfers.iter().filter(|e| e.direction == dir).map(|e| e.issue_step).collect()
    }

    #[test]
    fn k2_t3_loads_and_offloads() {
        let (active, log) = run(ScheduleConfig::new(2, 12).with_interval(3));
        assert_eq!(active, vec![0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1]);
        assert_eq!(steps_of(&log, Direction::Load), vec![0, 3, 6, 9]);
        assert_eq!(steps_of(&log, Direction::Offload), vec![2, 5, 8, 11]);
    }

    #[test]
    fn k3_t1_cycles() {
        let (active, _) = run(ScheduleConfig::new(3, 7).with_interval(1));
        assert_eq!(active, vec![0, 1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn single_chunk_loads_once_and_flushes_at_end() {
        let (active, log) = run(ScheduleConfig::new(1, 5).with_interval(1));
        assert_eq!(active, vec![0; 5]);
        assert_eq!(steps_of(&log, Direction::Load), vec![0]);
        assert_eq!(steps_of(&log, Direction::Offload), vec![4]);
    }

    #[test]
    fn interval_one_transfers_every_step() {
        let (_, log) = run(ScheduleConfig::new(2, 4).with_interval(1));
        assert_eq!(steps_of(&log, Direction::Load), vec![0, 1, 2, 3]);
        assert_eq!(steps_of(&log, Direction::Offload), vec![0, 1, 2, 3]);
    }

    #[test]
    fn partial_rotation_is_flushed() {
        let (_, log) = run(ScheduleConfig::new(2, 4).with_interval(3));
        assert_eq!(steps_of(&log, Direction::Offload), vec![2, 3]);
    }

    #[test]
    fn counter_increments_at_offload() {
        let mut s = ScheduleState::new(ScheduleConfig::new(2, 6).with_interval(3), vec![8, 8]).unwrap();
        for expect in [0, 0, 0, 1, 1, 1] {
            s.step_begin().unwrap();
            assert_eq!(s.i, expect);
            s.step_end(false).unwrap();
        }
        assert_eq!(s.i, 2);
    }

    #[test]
    fn offload_with_pending_gradients_is_rejected() {
        let mut s = ScheduleState::new(ScheduleConfig::new(2, 4).with_interval(1), vec![8, 8]).unwrap();
        s.step_begin().unwrap();
        assert!(matches!(s.step_end(true), Err(Error::Schedule(_))));
    }

    #[test]
    fn mid_slot_step_may_keep_gradients() {
        let mut s = ScheduleState::new(ScheduleConfig::new(2, 4).with_interval(2), vec![8, 8]).unwrap();
        s.step_begin().unwrap();
        assert!(s.step_end(true).is_ok());
    }

    #[test]
    fn prefetch_reloads_are_noops_and_arrive_on_time() {
        let mut config = ScheduleConfig::new(3, 9).with_interval(3).with_prefetch(true);
        config.transfer = TransferModel { ticks_per_step: 100, bytes_per_tick: Some(2) };
        let mut s = ScheduleState::new(config, vec![120; 3]).unwrap();
        for _ in 0..9 {
            s.step_begin().unwrap();
            s.step_end(false).unwrap();
        }
        // Chunk 0 loaded on demand, chunks 1 and 2 prefetched; activation loads skipped.
        assert_eq!(s.noop_loads(), 2);
        let loads: Vec<_> = s.log().transfers.iter().filter(|e| e.direction == Direction::Load).collect();
        assert_eq!(loads.len(), 3);
        assert_eq!(loads[1].complete_tick, 300);
        assert_eq!(loads[2].complete_tick, 600);
        assert_eq!(s.stall_ticks(), 60);
    }

    #[test]
    fn invalid_config_names_field() {
        let err = ScheduleState::new(ScheduleConfig::new(0, 4), vec![]).unwrap_err();
        assert!(err.to_string().contains("K"));
    }

    #[test]
    fn step_past_total_is_rejected() {
        let mut s = ScheduleState::new(ScheduleConfig::new(1, 1), vec![8]).unwrap();
        s.step_begin().unwrap();
        s.step_end(false).unwrap();
        assert!(s.step_begin().is_err());
    }

    #[test]
    fn trace_counts_states_and_staging() {
        let mut config = ScheduleConfig::new(2, 4).with_interval(2);
        config.transfer = TransferModel { ticks_per_step: 10, bytes_per_tick: Some(12) };
        let log = simulate_schedule(config, vec![120, 240]).unwrap();
        let layout = MemoryLayout {
            resident_param_bytes: 60,
            chunk_elements: vec![10, 20],
            policy: CostPolicy::default(),
            activation_bytes: 7,
        };
        let trace = memory_trace(&log, &layout).unwrap();
        let totals: Vec<u64> = trace.samples().iter().map(|s| s.total).collect();
        // Chunk 1's load queues behind chunk 0's offload on the single worker.
        assert_eq!(trace.samples()[0].transfer_buffer_bytes, 120);
        assert_eq!(trace.samples()[2].transfer_buffer_bytes, 120);
        assert_eq!(trace.samples()[3].transfer_buffer_bytes, 240);
        assert_eq!(totals[1], 60 + 160 + 7);
    }
}
