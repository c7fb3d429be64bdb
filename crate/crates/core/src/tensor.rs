//! Dense row-major matrices and registered parameter tensors.
//!
//! All compute happens in `f64`. The declared [`Precision`] of a parameter
//! only drives byte accounting.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix. Vectors are `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged matrix literal");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn column(values: &[f64]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of rows `[begin, end)`.
    pub fn row_slice(&self, begin: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - begin,
            cols: self.cols,
            data: self.data[begin * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Identifier of a parameter tensor; equals its index in the owning [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TensorId(pub usize);

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Declared storage width of a resident parameter element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Fp16,
    Fp32,
}

impl Precision {
    pub fn bytes(self) -> u64 {
        match self {
            Precision::Fp16 => 2,
            Precision::Fp32 => 4,
        }
    }

    pub fn from_bytes(bytes: u64) -> Result<Self> {
        match bytes {
            2 => Ok(Precision::Fp16),
            4 => Ok(Precision::Fp32),
            other => Err(Error::Policy(format!("storage precision must be 2 or 4 bytes, got {other}"))),
        }
    }
}

/// Shape and bookkeeping of a parameter, without values.
///
/// Partitioning and memory accounting only need this, which lets them run on
/// virtual models far too large to allocate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub id: TensorId,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub precision: Precision,
    pub reg_order: usize,
    pub trainable: bool,
}

impl TensorMeta {
    pub fn elements(&self) -> u64 {
        self.rows as u64 * self.cols as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub meta: TensorMeta,
    pub values: Matrix,
}

impl ParamTensor {
    pub fn id(&self) -> TensorId {
        self.meta.id
    }

    pub fn name(&self) -> &str {
        &self.meta.name
    }

    pub fn rows(&self) -> usize {
        self.meta.rows
    }

    pub fn cols(&self) -> usize {
        self.meta.cols
    }
}

/// Registry of all parameters of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor at the next registration position.
    pub fn register(&mut self, name: impl Into<String>, values: Matrix, precision: Precision) -> Result<TensorId> {
        let name = name.into();
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::InvalidTensor { name, reason: "rows and cols must be >= 1".into() });
        }
        let id = TensorId(self.params.len());
        self.params.push(ParamTensor {
            meta: TensorMeta {
                id,
                name,
                rows: values.rows(),
                cols: values.cols(),
                precision,
                reg_order: id.0,
                trainable: true,
            },
            values,
        });
        Ok(id)
    }

    pub fn set_trainable(&mut self, id: TensorId, trainable: bool) -> Result<()> {
        self.get_mut(id)?.meta.trainable = trainable;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: TensorId) -> Result<&ParamTensor> {
        self.params.get(id.0).ok_or(Error::UnknownTensor(id))
    }

    pub fn get_mut(&mut self, id: TensorId) -> Result<&mut ParamTensor> {
        self.params.get_mut(id.0).ok_or(Error::UnknownTensor(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn metas(&self) -> Vec<TensorMeta> {
        self.params.iter().map(|p| p.meta.clone()).collect()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> u64 {
        self.params.iter().map(|p| p.meta.elements()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.values.is_finite())
    }
}

/// Deterministic Xavier-style initialization shared by model builders and tests.
pub fn uniform_init(rows: usize, cols: usize, scale: f64, rng: &mut impl rand::Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix { rows, cols, data }
}
