//! Byte-level training cost estimation and byte-balanced chunk plans.
//!
//! Trainable rows are laid out in registration order, each weighted by its
//! mutable training cost (gradient, master copy, both moments). A plan cuts
//! that sequence into `K` contiguous non-empty pieces. Large tensors span
//! several chunks by splitting along rows.
//!
//! Cuts are first placed where the running byte total first meets or exceeds
//! `k * total / K`. When that leaves a spread larger than one row between the
//! heaviest and lightest chunk, a window search finds cuts that keep every
//! chunk inside `[lo, lo + max_row_cost]`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ActiveMask, SliceRef};
use crate::error::{Error, Result};
use crate::tensor::{TensorId, TensorMeta};

/// Per-element byte widths of the mutable training state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostPolicy {
    grad_bytes: u64,
    master_bytes: u64,
    moment1_bytes: u64,
    moment2_bytes: u64,
}

impl Default for CostPolicy {
    fn default() -> Self {
        Self { grad_bytes: 4, master_bytes: 4, moment1_bytes: 4, moment2_bytes: 4 }
    }
}

impl CostPolicy {
    pub fn new(grad_bytes: u64, master_bytes: u64, moment1_bytes: u64, moment2_bytes: u64) -> Result<Self> {
        let p = Self { grad_bytes, master_bytes, moment1_bytes, moment2_bytes };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("grad_bytes", self.grad_bytes),
            ("master_bytes", self.master_bytes),
            ("moment1_bytes", self.moment1_bytes),
            ("moment2_bytes", self.moment2_bytes),
        ] {
            if v == 0 {
                return Err(Error::Policy(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn grad_bytes(&self) -> u64 {
        self.grad_bytes
    }

    /// Bytes per element that are loaded and offloaded with a chunk (master + moments).
    pub fn state_bytes_per_element(&self) -> u64 {
        self.master_bytes + self.moment1_bytes + self.moment2_bytes
    }

    /// Bytes per element resident only while a chunk is active.
    pub fn mutable_bytes_per_element(&self) -> u64 {
        self.grad_bytes + self.state_bytes_per_element()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteCost {
    /// Gradient + master + moments; the quantity chunks are balanced on.
    pub mutable: u64,
    /// Always-resident parameter storage at the tensor's declared precision.
    pub resident: u64,
}

pub fn estimate_byte_cost(tensor: &TensorMeta, policy: &CostPolicy) -> Result<ByteCost> {
    policy.validate()?;
    let elements = tensor.elements();
    Ok(ByteCost {
        mutable: elements * policy.mutable_bytes_per_element(),
        resident: elements * tensor.precision.bytes(),
    })
}

/// One row range of one tensor inside a chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSlice {
    pub tensor: TensorId,
    pub name: String,
    pub row_begin: usize,
    pub row_end: usize,
    pub cols: usize,
}

impl PlanSlice {
    pub fn slice_ref(&self) -> SliceRef {
        SliceRef { tensor: self.tensor, row_begin: self.row_begin, row_end: self.row_end }
    }

    pub fn elements(&self) -> u64 {
        ((self.row_end - self.row_begin) * self.cols) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub slices: Vec<PlanSlice>,
    pub byte_cost: u64,
}

impl Chunk {
    pub fn elements(&self) -> u64 {
        self.slices.iter().map(PlanSlice::elements).sum()
    }

    pub fn mask(&self) -> ActiveMask {
        ActiveMask::new(self.slices.iter().map(PlanSlice::slice_ref)).expect("plan slices are disjoint")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub chunks: Vec<Chunk>,
    pub policy: CostPolicy,
}

/// Flat, human-readable form of a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub chunk: usize,
    pub tensor: String,
    pub tensor_id: usize,
    pub row_begin: usize,
    pub row_end: usize,
    pub cols: usize,
}

impl ChunkPlan {
    pub fn k(&self) -> usize {
        self.chunks.len()
    }

    pub fn byte_costs(&self) -> Vec<u64> {
        self.chunks.iter().map(|c| c.byte_cost).collect()
    }

    pub fn total_bytes(&self) -> u64 {
        self.chunks.iter().map(|c| c.byte_cost).sum()
    }

    pub fn max_chunk_bytes(&self) -> u64 {
        self.chunks.iter().map(|c| c.byte_cost).max().unwrap_or(0)
    }

    pub fn min_chunk_bytes(&self) -> u64 {
        self.chunks.iter().map(|c| c.byte_cost).min().unwrap_or(0)
    }

    /// Largest absolute deviation of a chunk's cost from the mean chunk cost.
    pub fn imbalance(&self) -> f64 {
        let mean = self.total_bytes() as f64 / self.k() as f64;
        self.chunks.iter().map(|c| (c.byte_cost as f64 - mean).abs()).fold(0.0, f64::max)
    }

    pub fn entries(&self) -> Vec<PlanEntry> {
        self.chunks
            .iter()
            .enumerate()
            .flat_map(|(k, c)| {
                c.slices.iter().map(move |s| PlanEntry {
                    chunk: k,
                    tensor: s.name.clone(),
                    tensor_id: s.tensor.0,
                    row_begin: s.row_begin,
                    row_end: s.row_end,
                    cols: s.cols,
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries()).expect("plan entries serialize")
    }

    pub fn from_json(text: &str, policy: CostPolicy) -> Result<Self> {
        let entries: Vec<PlanEntry> =
            serde_json::from_str(text).map_err(|e| Error::Layout(format!("plan document: {e}")))?;
        let k = entries.iter().map(|e| e.chunk + 1).max().unwrap_or(0);
        let mut chunks = vec![Chunk { slices: Vec::new(), byte_cost: 0 }; k];
        for e in entries {
            let s = PlanSlice {
                tensor: TensorId(e.tensor_id),
                name: e.tensor,
                row_begin: e.row_begin,
                row_end: e.row_end,
                cols: e.cols,
            };
            chunks[e.chunk].byte_cost += s.elements() * policy.mutable_bytes_per_element();
            chunks[e.chunk].slices.push(s);
        }
        Ok(Self { chunks, policy })
    }

    /// Hex SHA-256 of the serialized plan; ties checkpoints to the plan they were written under.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }

    /// Checks exact cover of the trainable rows of `metas` and per-chunk ordering.
    pub fn validate(&self, metas: &[TensorMeta]) -> Result<()> {
        let mut seen: Vec<Vec<(usize, usize)>> = vec![Vec::new(); metas.len()];
        for (k, chunk) in self.chunks.iter().enumerate() {
            if chunk.slices.is_empty() {
                return Err(Error::Layout(format!("chunk {k} is empty")));
            }
            let mut last_order = None;
            for s in &chunk.slices {
                let meta = metas.get(s.tensor.0).ok_or(Error::UnknownTensor(s.tensor))?;
                if !meta.trainable {
                    return Err(Error::Layout(format!("frozen tensor {} in chunk {k}", meta.name)));
                }
                if s.row_begin >= s.row_end || s.row_end > meta.rows || s.cols != meta.cols {
                    return Err(Error::RowRange { begin: s.row_begin, end: s.row_end, rows: meta.rows });
                }
                if last_order.is_some_and(|o| o >= meta.reg_order) {
                    return Err(Error::Layout(format!("chunk {k} slices out of registration order")));
                }
                last_order = Some(meta.reg_order);
                seen[s.tensor.0].push((s.row_begin, s.row_end));
            }
        }
        for (meta, ranges) in metas.iter().zip(seen.iter_mut()) {
            if !meta.trainable {
                continue;
            }
            ranges.sort();
            let mut next = 0;
            for &(b, e) in ranges.iter() {
                if b != next {
                    return Err(Error::Layout(format!("tensor {} rows not exactly covered near row {next}", meta.name)));
                }
                next = e;
            }
            if next != meta.rows {
                return Err(Error::Layout(format!("tensor {} rows not exactly covered near row {next}", meta.name)));
            }
        }
        Ok(())
    }
}

/// The trainable rows in registration order, with prefix-sum lookups in
/// `O(log tensors)` so virtual models with billions of elements stay cheap.
struct RowLine<'a> {
    tensors: Vec<&'a TensorMeta>,
    row_cost: Vec<u64>,
    /// Global index of each tensor's first row; one extra trailing entry.
    row_start: Vec<u64>,
    /// Prefix bytes at each tensor's first row; one extra trailing entry.
    byte_start: Vec<u64>,
}

impl<'a> RowLine<'a> {
    fn new(metas: &'a [TensorMeta], policy: &CostPolicy) -> Self {
        let mut tensors: Vec<&TensorMeta> = metas.iter().filter(|m| m.trainable).collect();
        tensors.sort_by_key(|m| m.reg_order);
        let row_cost: Vec<u64> = tensors.iter().map(|m| m.cols as u64 * policy.mutable_bytes_per_element()).collect();
        let mut row_start = vec![0];
        let mut byte_start = vec![0];
        for (m, c) in tensors.iter().zip(&row_cost) {
            row_start.push(row_start.last().unwrap() + m.rows as u64);
            byte_start.push(byte_start.last().unwrap() + m.rows as u64 * c);
        }
        Self { tensors, row_cost, row_start, byte_start }
    }

    fn rows(&self) -> u64 {
        *self.row_start.last().unwrap()
    }

    fn total(&self) -> u64 {
        *self.byte_start.last().unwrap()
    }

    fn max_row_cost(&self) -> u64 {
        self.row_cost.iter().copied().max().unwrap_or(0)
    }

    /// Bytes of the first `q` rows.
    fn prefix(&self, q: u64) -> u64 {
        let t = self.row_start.partition_point(|&s| s <= q) - 1;
        if t >= self.tensors.len() {
            return self.total();
        }
        self.byte_start[t] + (q - self.row_start[t]) * self.row_cost[t]
    }

    /// Smallest `q` with `prefix(q) >= x`, or `rows() + 1` if none.
    fn first_at_least(&self, x: u64) -> u64 {
        if x == 0 {
            return 0;
        }
        if x > self.total() {
            return self.rows() + 1;
        }
        let t = self.byte_start.partition_point(|&b| b < x) - 1;
        let need = x - self.byte_start[t];
        self.row_start[t] + need.div_ceil(self.row_cost[t])
    }

    /// Largest `q` with `prefix(q) <= x`.
    fn last_at_most(&self, x: u64) -> u64 {
        if x >= self.total() {
            return self.rows();
        }
        let t = self.byte_start.partition_point(|&b| b <= x) - 1;
        self.row_start[t] + (x - self.byte_start[t]) / self.row_cost[t]
    }

    /// Compares `prefix(q)` with the fractional target `j * total / k`.
    fn distance_to_target(&self, q: u64, j: u64, k: u64) -> u128 {
        let lhs = self.prefix(q) as u128 * k as u128;
        let rhs = j as u128 * self.total() as u128;
        lhs.abs_diff(rhs)
    }

    fn cut_costs(&self, cuts: &[u64]) -> Vec<u64> {
        cuts.windows(2).map(|w| self.prefix(w[1]) - self.prefix(w[0])).collect()
    }

    fn into_plan(self, cuts: &[u64], policy: CostPolicy) -> ChunkPlan {
        let mut chunks = Vec::with_capacity(cuts.len() - 1);
        for w in cuts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let mut slices = Vec::new();
            for (t, m) in self.tensors.iter().enumerate() {
                let (ts, te) = (self.row_start[t], self.row_start[t + 1]);
                let (b, e) = (lo.max(ts), hi.min(te));
                if b < e {
                    slices.push(PlanSlice {
                        tensor: m.id,
                        name: m.name.clone(),
                        row_begin: (b - ts) as usize,
                        row_end: (e - ts) as usize,
                        cols: m.cols,
                    });
                }
            }
            chunks.push(Chunk { slices, byte_cost: self.prefix(hi) - self.prefix(lo) });
        }
        ChunkPlan { chunks, policy }
    }

    /// Cuts at the first row whose inclusion meets or exceeds each cumulative
    /// target, keeping every chunk non-empty.
    fn threshold_cuts(&self, k: u64) -> Vec<u64> {
        let n = self.rows();
        let mut cuts = vec![0u64];
        for j in 1..k {
            let target = (j as u128 * self.total() as u128).div_ceil(k as u128) as u64;
            let q = self.first_at_least(target);
            let prev = *cuts.last().unwrap();
            cuts.push(q.clamp(prev + 1, n - (k - j)));
        }
        cuts.push(n);
        cuts
    }

    /// Cuts keeping every chunk cost inside `[lo, lo + width]`, if possible.
    ///
    /// With `width >= max_row_cost` the set of cut positions reachable after
    /// `j` chunks is a contiguous index interval, so feasibility is a forward
    /// sweep of `K` intervals and the cuts are recovered backwards.
    fn window_cuts(&self, k: u64, lo: u64, width: u64) -> Option<Vec<u64>> {
        let n = self.rows();
        let total = self.total();
        let hi = lo + width;
        let mut reach = Vec::with_capacity(k as usize + 1);
        reach.push((0u64, 0u64));
        for _ in 0..k {
            let (a, b) = *reach.last().unwrap();
            let next_a = self.first_at_least(self.prefix(a) + lo);
            if next_a > n {
                return None;
            }
            let top = b.min(self.last_at_most(total.checked_sub(lo)?));
            if top < a {
                return None;
            }
            let next_b = self.last_at_most(self.prefix(top) + hi).min(n);
            if next_a > next_b {
                return None;
            }
            reach.push((next_a, next_b));
        }
        let (a, b) = reach[k as usize];
        if !(a..=b).contains(&n) {
            return None;
        }
        let mut cuts = vec![n];
        for j in (1..k).rev() {
            let q = *cuts.last().unwrap();
            let pq = self.prefix(q);
            let (ra, rb) = reach[j as usize];
            let from = self.first_at_least(pq.saturating_sub(hi)).max(ra);
            let to = self.last_at_most(pq.checked_sub(lo)?).min(rb).min(q - 1);
            if from > to {
                return None;
            }
            let guess = self.first_at_least((j as u128 * total as u128).div_ceil(k as u128) as u64);
            let pick = [guess.saturating_sub(1).clamp(from, to), guess.clamp(from, to)]
                .into_iter()
                .min_by_key(|&c| (self.distance_to_target(c, j, k), std::cmp::Reverse(c)))
                .unwrap();
            cuts.push(pick);
        }
        cuts.push(0);
        cuts.reverse();
        Some(cuts)
    }
}

fn spread(costs: &[u64]) -> u64 {
    costs.iter().max().unwrap() - costs.iter().min().unwrap()
}

/// Splits the trainable parameters of `metas` into `k` byte-balanced chunks.
pub fn partition(metas: &[TensorMeta], k: usize, policy: &CostPolicy) -> Result<ChunkPlan> {
    policy.validate()?;
    let line = RowLine::new(metas, policy);
    let n = line.rows();
    if k == 0 || k as u64 > n {
        return Err(Error::ChunkCount { k, rows: n });
    }
    let k64 = k as u64;
    let width = line.max_row_cost();
    let cuts = line.threshold_cuts(k64);
    if spread(&line.cut_costs(&cuts)) <= width {
        return Ok(line.into_plan(&cuts, *policy));
    }

    // Some balanced plan has its lightest chunk equal to `lo`, so `lo` can be
    // searched over achievable segment costs in `[mean - width, mean]`. A
    // coarse grid is tried first; exact enumeration follows within a budget.
    const GRID: u64 = 64;
    const ENUMERATION_BUDGET: u64 = 4_000_000;
    let mean_floor = line.total() / k64;
    let base = mean_floor.saturating_sub(width).max(1);
    let grid = (0..=GRID).map(|i| base + (mean_floor + 1 - base) * i / GRID);
    let mut found = grid.clone().find_map(|lo| line.window_cuts(k64, lo, width));
    if found.is_none() {
        let mut candidates = std::collections::BTreeSet::new();
        let mut spent = 0u64;
        for p in 0..n {
            let start = line.prefix(p);
            let q_from = line.first_at_least(start + base);
            let q_to = line.last_at_most(start + mean_floor + 1);
            if q_from > q_to {
                continue;
            }
            spent += q_to - q_from + 1;
            if spent > ENUMERATION_BUDGET {
                break;
            }
            candidates.extend((q_from..=q_to).map(|q| line.prefix(q) - start));
        }
        found = candidates.into_iter().rev().find_map(|lo| line.window_cuts(k64, lo, width));
    }
    match found {
        Some(c) => Ok(line.into_plan(&c, *policy)),
        None => {
            log::warn!("no cut set within one row of balance for K={k}; using threshold cuts");
            Ok(line.into_plan(&cuts, *policy))
        }
    }
}

/// Like [`partition`], with `K = ceil(total / budget_bytes)`.
pub fn partition_by_budget(metas: &[TensorMeta], budget_bytes: u64, policy: &CostPolicy) -> Result<ChunkPlan> {
    policy.validate()?;
    let line = RowLine::new(metas, policy);
    let row_cost = line.max_row_cost();
    if budget_bytes < row_cost || budget_bytes == 0 {
        return Err(Error::Budget { budget: budget_bytes, row_cost });
    }
    let k = line.total().div_ceil(budget_bytes).max(1);
    partition(metas, k as usize, policy)
}

/// One chunk per group of whole tensors, in the given order.
///
/// This is the layer-identity partition used by layer-wise schemes; it exists
/// for comparison and is not byte-balanced.
pub fn partition_by_groups(metas: &[TensorMeta], groups: &[Vec<TensorId>], policy: &CostPolicy) -> Result<ChunkPlan> {
    policy.validate()?;
    let mut chunks = Vec::with_capacity(groups.len());
    for group in groups {
        let mut members: Vec<&TensorMeta> = group
            .iter()
            .map(|id| metas.get(id.0).ok_or(Error::UnknownTensor(*id)))
            .collect::<Result<_>>()?;
        members.retain(|m| m.trainable);
        members.sort_by_key(|m| m.reg_order);
        if members.is_empty() {
            continue;
        }
        let slices: Vec<PlanSlice> = members
            .iter()
            .map(|m| PlanSlice { tensor: m.id, name: m.name.clone(), row_begin: 0, row_end: m.rows, cols: m.cols })
            .collect();
        let byte_cost = slices.iter().map(|s| s.elements() * policy.mutable_bytes_per_element()).sum();
        chunks.push(Chunk { slices, byte_cost });
    }
    Ok(ChunkPlan { chunks, policy: *policy })
}

/// One chunk per trainable tensor.
pub fn partition_per_tensor(metas: &[TensorMeta], policy: &CostPolicy) -> Result<ChunkPlan> {
    let mut ordered: Vec<&TensorMeta> = metas.iter().filter(|m| m.trainable).collect();
    ordered.sort_by_key(|m| m.reg_order);
    let groups: Vec<Vec<TensorId>> = ordered.iter().map(|m| vec![m.id]).collect();
    partition_by_groups(metas, &groups, policy)
}

/// Cost of the heaviest single row among trainable tensors.
pub fn max_row_cost(metas: &[TensorMeta], policy: &CostPolicy) -> u64 {
    metas
        .iter()
        .filter(|m| m.trainable)
        .map(|m| m.cols as u64 * policy.mutable_bytes_per_element())
        .max()
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    pub(crate) fn meta(id: usize, name: &str, rows: usize, cols: usize) -> TensorMeta {
        TensorMeta {
            id: TensorId(id),
            name: name.into(),
            rows,
            cols,
            precision: Precision::Fp16,
            reg_order: id,
            trainable: true,
        }
    }

    #[test]
    fn byte_cost_of_ten_by_four() {
        let c = estimate_byte_cost(&meta(0, "t", 10, 4), &CostPolicy::default()).unwrap();
        assert_eq!(c, ByteCost { mutable: 640, resident: 80 });
        let one = estimate_byte_cost(&meta(0, "t", 1, 1), &CostPolicy::default()).unwrap();
        assert_eq!(one.mutable, 16);
    }

    #[test]
    fn zero_width_policy_is_rejected() {
        assert!(matches!(CostPolicy::new(0, 4, 4, 4), Err(Error::Policy(_))));
    }

    #[test]
    fn single_chunk_holds_every_tensor_whole() {
        let metas = vec![meta(0, "a", 3, 2), meta(1, "b", 5, 1)];
        let plan = partition(&metas, 1, &CostPolicy::default()).unwrap();
        assert_eq!(plan.k(), 1);
        assert_eq!(plan.chunks[0].slices.len(), 2);
        assert_eq!(plan.chunks[0].slices[1].row_end, 5);
        plan.validate(&metas).unwrap();
    }

    #[test]
    fn two_chunk_split_example() {
        let metas = vec![meta(0, "A", 100, 10), meta(1, "B", 20, 10)];
        let plan = partition(&metas, 2, &CostPolicy::default()).unwrap();
        let c0 = &plan.chunks[0].slices;
        let c1 = &plan.chunks[1].slices;
        assert_eq!((c0.len(), c0[0].row_begin, c0[0].row_end), (1, 0, 60));
        assert_eq!((c1[0].name.as_str(), c1[0].row_begin, c1[0].row_end), ("A", 60, 100));
        assert_eq!((c1[1].name.as_str(), c1[1].row_begin, c1[1].row_end), ("B", 0, 20));
        assert_eq!(plan.byte_costs(), vec![9600, 9600]);
    }

    #[test]
    fn too_many_chunks_is_an_error() {
        let metas = vec![meta(0, "a", 3, 2)];
        let err = partition(&metas, 4, &CostPolicy::default()).unwrap_err();
        assert!(err.to_string().contains("chunk count exceeds row granularity"));
        assert!(partition(&metas, 0, &CostPolicy::default()).is_err());
    }

    #[test]
    fn budget_partitions() {
        let metas = vec![meta(0, "A", 100, 10)];
        let policy = CostPolicy::default();
        assert_eq!(partition_by_budget(&metas, 16_000, &policy).unwrap().k(), 1);
        assert_eq!(partition_by_budget(&metas, 1_000_000, &policy).unwrap().k(), 1);
        let half = partition_by_budget(&metas, 8_000, &policy).unwrap();
        assert_eq!(half.k(), 2);
        assert_eq!(half.chunks[0].slices[0].row_end, 50);
        let fine = partition_by_budget(&metas, 160, &policy).unwrap();
        assert_eq!(fine.k(), 100);
        assert!(fine.chunks.iter().all(|c| c.slices[0].row_end - c.slices[0].row_begin == 1));
        assert!(matches!(partition_by_budget(&metas, 159, &policy), Err(Error::Budget { row_cost: 160, .. })));
    }

    #[test]
    fn frozen_tensors_are_excluded() {
        let mut metas = vec![meta(0, "a", 4, 2), meta(1, "b", 4, 2)];
        metas[0].trainable = false;
        let plan = partition(&metas, 2, &CostPolicy::default()).unwrap();
        assert!(plan.chunks.iter().flat_map(|c| &c.slices).all(|s| s.tensor == TensorId(1)));
        plan.validate(&metas).unwrap();
    }

    #[test]
    fn heavy_row_does_not_starve_later_chunks() {
        // A pure fixed-budget greedy leaves the last chunk empty here.
        let metas = vec![meta(0, "big", 1, 100), meta(1, "small", 2, 1)];
        let plan = partition(&metas, 3, &CostPolicy::default()).unwrap();
        plan.validate(&metas).unwrap();
        assert_eq!(plan.k(), 3);
        assert!(spread(&plan.byte_costs()) <= max_row_cost(&metas, &plan.policy));
    }

    #[test]
    fn plan_document_round_trips() {
        let metas = vec![meta(0, "A", 100, 10), meta(1, "B", 20, 10)];
        let plan = partition(&metas, 3, &CostPolicy::default()).unwrap();
        let back = ChunkPlan::from_json(&plan.to_json(), plan.policy).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.digest(), plan.digest());
    }

    #[test]
    fn per_tensor_plan_keeps_tensors_whole() {
        let metas = vec![meta(0, "A", 100, 10), meta(1, "B", 20, 10)];
        let plan = partition_per_tensor(&metas, &CostPolicy::default()).unwrap();
        assert_eq!(plan.byte_costs(), vec![16_000, 3_200]);
        plan.validate(&metas).unwrap();
    }
}
