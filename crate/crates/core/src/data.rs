//! Seeded synthetic datasets and batch sources.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::schedule::BatchSource;
use crate::tensor::Matrix;

/// Labelled rows, either dense features or token ids.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Dense { inputs: Matrix, labels: Vec<usize> },
    Tokens { tokens: Vec<usize>, labels: Vec<usize> },
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Dense { labels, .. } | Dataset::Tokens { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch of the given rows, in the given order.
    pub fn batch(&self, rows: &[usize]) -> Batch {
        match self {
            Dataset::Dense { inputs, labels } => {
                let cols = inputs.cols();
                let mut data = Vec::with_capacity(rows.len() * cols);
                for &r in rows {
                    data.extend_from_slice(inputs.row(r));
                }
                let x = Matrix::from_vec(rows.len(), cols, data).expect("row gather keeps shape");
                Batch::labelled(x, rows.iter().map(|&r| labels[r]).collect())
            }
            Dataset::Tokens { tokens, labels } => Batch::tokens(
                rows.iter().map(|&r| tokens[r]).collect(),
                rows.iter().map(|&r| labels[r]).collect(),
            ),
        }
    }
}

/// Gaussian class clusters: each class has a random center of norm ~`spread`,
/// samples add unit noise. Classes are assigned round-robin.
pub fn gaussian_blobs(samples: usize, dim: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if samples == 0 || dim == 0 || classes < 2 {
        return Err(Error::config("data", "samples >= 1, dim >= 1, classes >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = spread / (dim as f64).sqrt();
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut data = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for s in 0..samples {
        let c = s % classes;
        for center in &centers[c] {
            data.push(center + rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(c);
    }
    Ok(Dataset::Dense { inputs: Matrix::from_vec(samples, dim, data)?, labels })
}

/// Uniform random tokens; the label is `token mod classes`.
pub fn token_classes(samples: usize, vocab: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if samples == 0 || vocab == 0 || classes == 0 {
        return Err(Error::config("data", "samples, vocab and classes >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..samples).map(|_| rng.random_range(0..vocab)).collect();
    let labels = tokens.iter().map(|t| t % classes).collect();
    Ok(Dataset::Tokens { tokens, labels })
}

/// Fixed-size minibatches over a reshuffled permutation each epoch.
/// A trailing partial batch is dropped so every step sees the same shape.
#[derive(Debug, Clone)]
pub struct ShuffledBatches {
    data: Dataset,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl ShuffledBatches {
    pub fn new(data: Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > data.len() {
            return Err(Error::config("batch", format!("batch must be in 1..={}", data.len())));
        }
        let order = (0..data.len()).collect();
        let mut s = Self { data, batch_size, rng: ChaCha8Rng::seed_from_u64(seed), order, pos: 0 };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }
}

impl BatchSource for ShuffledBatches {
    fn next_batch(&mut self) -> Result<Batch> {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let rows = &self.order[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        Ok(self.data.batch(rows))
    }
}

/// Yields the same batch forever.
#[derive(Debug, Clone)]
pub struct FixedBatch(pub Batch);

impl BatchSource for FixedBatch {
    fn next_batch(&mut self) -> Result<Batch> {
        Ok(self.0.clone())
    }
}
