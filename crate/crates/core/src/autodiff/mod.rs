//! Reverse-mode autodiff whose backward pass materializes parameter gradients
//! only for an active set of row slices.
//!
//! Activation gradients always propagate through every node; only the
//! parameter-gradient kernels consult the [`ActiveMask`]. Gradient buffers are
//! allocated once per masked slice, and nothing is allocated for unmasked rows.

mod tape;

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, ParamStore, TensorId};

/// Accounted width of one gradient element (fp32 gradient buffers).
pub const GRAD_ELEMENT_BYTES: u64 = 4;

/// A contiguous range of rows `[row_begin, row_end)` of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceRef {
    pub tensor: TensorId,
    pub row_begin: usize,
    pub row_end: usize,
}

impl SliceRef {
    pub fn new(tensor: TensorId, rows: Range<usize>) -> Self {
        Self { tensor, row_begin: rows.start, row_end: rows.end }
    }

    pub fn rows(&self) -> Range<usize> {
        self.row_begin..self.row_end
    }

    pub fn num_rows(&self) -> usize {
        self.row_end - self.row_begin
    }

    pub fn overlaps(&self, other: &SliceRef) -> bool {
        self.tensor == other.tensor && self.row_begin < other.row_end && other.row_begin < self.row_end
    }
}

/// Set of pairwise-disjoint parameter slices whose gradients should be produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActiveMask {
    slices: Vec<SliceRef>,
}

impl ActiveMask {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(slices: impl IntoIterator<Item = SliceRef>) -> Result<Self> {
        let mut slices: Vec<SliceRef> = slices.into_iter().collect();
        slices.sort();
        for s in &slices {
            if s.row_begin >= s.row_end {
                return Err(Error::RowRange { begin: s.row_begin, end: s.row_end, rows: s.row_end });
            }
        }
        for pair in slices.windows(2) {
            if pair[0].overlaps(&pair[1]) {
                return Err(Error::OverlappingSlices {
                    tensor: pair[0].tensor,
                    first_begin: pair[0].row_begin,
                    first_end: pair[0].row_end,
                    second_begin: pair[1].row_begin,
                    second_end: pair[1].row_end,
                });
            }
        }
        Ok(Self { slices })
    }

    /// Every row of every parameter in the store.
    pub fn full(params: &ParamStore) -> Self {
        Self { slices: params.iter().map(|p| SliceRef::new(p.id(), 0..p.rows())).collect() }
    }

    pub fn slices(&self) -> &[SliceRef] {
        &self.slices
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn num_elements(&self, params: &ParamStore) -> Result<u64> {
        self.slices
            .iter()
            .map(|s| Ok(s.num_rows() as u64 * params.get(s.tensor)?.cols() as u64))
            .sum()
    }

    /// Per-tensor ranges, checked against the store.
    pub(crate) fn index(&self, params: &ParamStore) -> Result<MaskIndex> {
        let mut by_tensor: HashMap<TensorId, Vec<SliceRef>> = HashMap::new();
        for s in &self.slices {
            let p = params.get(s.tensor)?;
            if s.row_end > p.rows() {
                return Err(Error::RowRange { begin: s.row_begin, end: s.row_end, rows: p.rows() });
            }
            by_tensor.entry(s.tensor).or_default().push(*s);
        }
        Ok(MaskIndex { by_tensor })
    }
}

pub(crate) struct MaskIndex {
    by_tensor: HashMap<TensorId, Vec<SliceRef>>,
}

impl MaskIndex {
    pub(crate) fn slices_of(&self, id: TensorId) -> &[SliceRef] {
        self.by_tensor.get(&id).map_or(&[], Vec::as_slice)
    }
}

/// Parameter gradients for the masked slices of one backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradBag {
    grads: BTreeMap<SliceRef, Matrix>,
    allocated_bytes: u64,
    flops: u64,
}

impl GradBag {
    pub(crate) fn allocate(mask: &ActiveMask, params: &ParamStore) -> Result<Self> {
        let mut bag = GradBag::default();
        for s in mask.slices() {
            let cols = params.get(s.tensor)?.cols();
            bag.grads.insert(*s, Matrix::zeros(s.num_rows(), cols));
            bag.allocated_bytes += (s.num_rows() * cols) as u64 * GRAD_ELEMENT_BYTES;
        }
        Ok(bag)
    }

    pub(crate) fn slot(&mut self, slice: &SliceRef) -> &mut Matrix {
        self.grads.get_mut(slice).expect("slot allocated for every masked slice")
    }

    pub(crate) fn add_flops(&mut self, flops: u64) {
        self.flops += flops;
    }

    pub fn get(&self, slice: &SliceRef) -> Option<&Matrix> {
        self.grads.get(slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SliceRef, &Matrix)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Parameter-gradient bytes allocated, at [`GRAD_ELEMENT_BYTES`] per element.
    pub fn allocated_bytes(&self) -> u64 {
        self.allocated_bytes
    }

    /// Multiply-accumulates spent producing parameter gradients.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Matrix::is_finite)
    }

    pub fn into_inner(self) -> BTreeMap<SliceRef, Matrix> {
        self.grads
    }
}

/// Full gradient of every parameter, indexed by [`TensorId`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    grads: Vec<Matrix>,
    flops: u64,
}

impl DenseGrads {
    pub fn get(&self, id: TensorId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (TensorId, &Matrix)> {
        self.grads.iter().enumerate().map(|(i, g)| (TensorId(i), g))
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Rows of the dense gradient covered by `slice`.
    pub fn slice(&self, slice: &SliceRef) -> Matrix {
        self.grads[slice.tensor.0].row_slice(slice.row_begin, slice.row_end)
    }
}

/// Runs the chunk-aware backward pass for the slices in `mask`.
pub fn backward_chunked(tape: &Tape<'_>, mask: &ActiveMask) -> Result<GradBag> {
    tape.backward(mask)
}

/// Full gradient through the same kernels as [`backward_chunked`], with every
/// row of every parameter active.
pub fn backward_dense(tape: &Tape<'_>) -> Result<DenseGrads> {
    let params = tape.params();
    let bag = tape.backward(&ActiveMask::full(params))?;
    let flops = bag.flops();
    let mut grads: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    for (slice, g) in bag.into_inner() {
        grads[slice.tensor.0] = g;
    }
    Ok(DenseGrads { grads, flops })
}
