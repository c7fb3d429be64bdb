use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// `0.5 * theta^T A theta` with `A` symmetric positive definite.
    Quadratic { a: DMatrix<f64> },
    /// `(1/n) sum_j log(1 + exp(-y_j x_j^T theta)) + (lambda/2) ||theta||^2`, labels in {-1, +1}.
    Logistic { x: DMatrix<f64>, y: Vec<f64>, lambda: f64 },
}

impl Objective {
    pub fn dim(&self) -> usize {
        match self {
            Objective::Quadratic { a } => a.nrows(),
            Objective::Logistic { x, .. } => x.ncols(),
        }
    }

    pub fn samples(&self) -> Option<usize> {
        match self {
            Objective::Quadratic { .. } => None,
            Objective::Logistic { x, .. } => Some(x.nrows()),
        }
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        match self {
            Objective::Quadratic { a } => {
                let t = DVector::from_column_slice(theta);
                0.5 * t.dot(&(a * &t))
            }
            Objective::Logistic { x, y, lambda } => {
                let n = x.nrows();
                let mut total = 0.0;
                for j in 0..n {
                    let z = y[j] * row_dot(x, j, theta);
                    total += softplus(-z);
                }
                total / n as f64 + 0.5 * lambda * theta.iter().map(|v| v * v).sum::<f64>()
            }
        }
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            Objective::Quadratic { a } => {
                let t = DVector::from_column_slice(theta);
                (a * &t).as_slice().to_vec()
            }
            Objective::Logistic { x, .. } => {
                let all: Vec<usize> = (0..x.nrows()).collect();
                self.sample_grad(theta, &all)
            }
        }
    }

    /// Gradient of the data term averaged over `indices` (in the given order), plus regularization.
    pub fn sample_grad(&self, theta: &[f64], indices: &[usize]) -> Vec<f64> {
        match self {
            Objective::Quadratic { .. } => self.grad(theta),
            Objective::Logistic { x, y, lambda } => {
                let d = x.ncols();
                let mut g = vec![0.0; d];
                for &j in indices {
                    let z = y[j] * row_dot(x, j, theta);
                    let w = -y[j] * sigmoid(-z);
                    for (c, gc) in g.iter_mut().enumerate() {
                        *gc += w * x[(j, c)];
                    }
                }
                let n = indices.len() as f64;
                for (gc, t) in g.iter_mut().zip(theta) {
                    *gc = *gc / n + lambda * t;
                }
                g
            }
        }
    }

    /// Upper bound on the block smoothness constant of `block`.
    ///
    /// Exact for quadratics (largest eigenvalue of the diagonal block); for
    /// logistic loss `sigma_max(X_i^T X_i) / (4n) + lambda`.
    pub fn block_lipschitz_bound(&self, block: Range<usize>) -> f64 {
        match self {
            Objective::Quadratic { a } => {
                let sub = a.view((block.start, block.start), (block.len(), block.len())).into_owned();
                max_eigenvalue(sub)
            }
            Objective::Logistic { x, lambda, .. } => {
                let xi = x.columns(block.start, block.len());
                let gram = xi.transpose() * xi;
                max_eigenvalue(gram) / (4.0 * x.nrows() as f64) + lambda
            }
        }
    }

    /// Smoothness constant of the whole objective (same construction over all coordinates).
    pub fn full_lipschitz_bound(&self) -> f64 {
        self.block_lipschitz_bound(0..self.dim())
    }
}

fn row_dot(x: &DMatrix<f64>, j: usize, theta: &[f64]) -> f64 {
    let mut s = 0.0;
    for (c, t) in theta.iter().enumerate() {
        s += x[(j, c)] * t;
    }
    s
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn max_eigenvalue(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Differentiable objective over a block partition, with smoothness constants and a lower bound.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothProblem {
    pub objective: Objective,
    pub blocks: Vec<Range<usize>>,
    /// Per-block smoothness constants `L_i`.
    pub lipschitz: Vec<f64>,
    pub l_star: f64,
    pub theta0: Vec<f64>,
}

impl SmoothProblem {
    /// Uses the objective's block smoothness bounds for `L_i` and `L_star = 0`
    /// (both shipped objectives are nonnegative).
    pub fn new(objective: Objective, blocks: Vec<Range<usize>>, theta0: Vec<f64>) -> Result<Self> {
        let d = objective.dim();
        if theta0.len() != d {
            return Err(Error::shape("problem", format!("theta0 has {} entries for dimension {d}", theta0.len())));
        }
        let mut next = 0;
        for b in &blocks {
            if b.start != next || b.is_empty() {
                return Err(Error::Layout(format!("blocks must tile 0..{d} contiguously, got {blocks:?}")));
            }
            next = b.end;
        }
        if next != d {
            return Err(Error::Layout(format!("blocks must tile 0..{d} contiguously, got {blocks:?}")));
        }
        let lipschitz: Vec<f64> = blocks.iter().map(|b| objective.block_lipschitz_bound(b.clone())).collect();
        if lipschitz.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Hyper(format!("block smoothness constants must be > 0, got {lipschitz:?}")));
        }
        Ok(Self { objective, blocks, lipschitz, l_star: 0.0, theta0 })
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    /// `L_bar = max_i L_i`.
    pub fn l_bar(&self) -> f64 {
        self.lipschitz.iter().copied().fold(0.0, f64::max)
    }

    pub fn with_blocks(mut self, blocks: Vec<Range<usize>>) -> Result<Self> {
        let theta0 = std::mem::take(&mut self.theta0);
        let mut p = Self::new(self.objective, blocks, theta0)?;
        p.l_star = self.l_star;
        Ok(p)
    }
}

/// `k` contiguous blocks of near-equal size over `0..dim` (larger blocks first).
pub fn even_blocks(dim: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k == 0 || k > dim {
        return Err(Error::ChunkCount { k, rows: dim as u64 });
    }
    let base = dim / k;
    let extra = dim % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    Ok(out)
}

/// `0.5 * theta^T diag(values) theta`, one block per coordinate.
pub fn diagonal_quadratic(values: &[f64], theta0: Vec<f64>) -> Result<SmoothProblem> {
    let a = DMatrix::from_diagonal(&DVector::from_column_slice(values));
    let blocks = even_blocks(values.len(), values.len())?;
    SmoothProblem::new(Objective::Quadratic { a }, blocks, theta0)
}

/// Random SPD quadratic `A = Q^T Q / dim + mu I` with a standard-normal start.
pub fn random_quadratic(dim: usize, k: usize, mu: f64, seed: u64) -> Result<SmoothProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let a = (q.transpose() * &q) / dim as f64 + DMatrix::identity(dim, dim) * mu;
    let theta0 = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    SmoothProblem::new(Objective::Quadratic { a }, even_blocks(dim, k)?, theta0)
}

/// Logistic regression on `n` Gaussian points in `dim` features, labels from a
/// random separator with 10% flipped; starts from a standard-normal point.
pub fn synthetic_logistic(n: usize, dim: usize, k: usize, lambda: f64, seed: u64) -> Result<SmoothProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let x = DMatrix::from_fn(n, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = (0..n)
        .map(|j| {
            let s = row_dot(&x, j, &w);
            let label = if s >= 0.0 { 1.0 } else { -1.0 };
            if rng.random::<f64>() < 0.1 { -label } else { label }
        })
        .collect();
    let theta0 = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    SmoothProblem::new(Objective::Logistic { x, y, lambda }, even_blocks(dim, k)?, theta0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEstimate {
    pub values: Vec<f64>,
    /// Exact constants, or lower estimates from finite probes.
    pub exact: bool,
}

/// Block smoothness constants: exact eigenvalues for quadratics, otherwise the
/// largest observed `||grad_i(x) - grad_i(y)|| / ||x_i - y_i||` over probe pairs
/// that differ only in block `i`.
pub fn estimate_block_lipschitz(problem: &SmoothProblem, num_probes: usize, seed: u64) -> Result<LipschitzEstimate> {
    if num_probes < 2 {
        return Err(Error::Hyper(format!("need at least 2 probes, got {num_probes}")));
    }
    if let Objective::Quadratic { .. } = problem.objective {
        return Ok(LipschitzEstimate { values: problem.lipschitz.clone(), exact: true });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = problem.objective.dim();
    let mut values = vec![0.0f64; problem.k()];
    for (i, block) in problem.blocks.iter().enumerate() {
        let mut probes = 0;
        while probes < num_probes {
            let x: Vec<f64> = (0..d).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let mut y = x.clone();
            for c in block.clone() {
                y[c] += rng.sample::<f64, _>(StandardNormal);
            }
            let dx: f64 = block.clone().map(|c| (x[c] - y[c]).powi(2)).sum::<f64>().sqrt();
            if dx == 0.0 {
                continue;
            }
            let gx = problem.objective.grad(&x);
            let gy = problem.objective.grad(&y);
            let dg: f64 = block.clone().map(|c| (gx[c] - gy[c]).powi(2)).sum::<f64>().sqrt();
            values[i] = values[i].max(dg / dx);
            probes += 1;
        }
    }
    Ok(LipschitzEstimate { values, exact: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_constants() {
        let p = diagonal_quadratic(&[1.0, 4.0], vec![1.0, 1.0]).unwrap();
        let est = estimate_block_lipschitz(&p, 2, 0).unwrap();
        assert!(est.exact);
        assert!((est.values[0] - 1.0).abs() < 1e-12 && (est.values[1] - 4.0).abs() < 1e-12);
        assert!((p.l_bar() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn identity_constants_are_one() {
        let p = diagonal_quadratic(&[1.0; 5], vec![0.0; 5]).unwrap();
        assert!(p.lipschitz.iter().all(|l| (l - 1.0).abs() < 1e-12));
    }

    #[test]
    fn logistic_probe_estimate_is_below_analytic_bound() {
        let p = synthetic_logistic(20, 8, 4, 0.0, 3).unwrap();
        let est = estimate_block_lipschitz(&p, 200, 1).unwrap();
        assert!(!est.exact);
        let x = match &p.objective {
            Objective::Logistic { x, .. } => x.clone(),
            _ => unreachable!(),
        };
        let global = max_eigenvalue(x.transpose() * &x) / 4.0 / 20.0;
        for (e, bound) in est.values.iter().zip(&p.lipschitz) {
            assert!(*e > 0.0 && e <= bound && *bound <= global + 1e-12, "{e} {bound} {global}");
        }
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let p = synthetic_logistic(15, 5, 1, 0.1, 9).unwrap();
        let theta = p.theta0.clone();
        let g = p.objective.grad(&theta);
        for c in 0..5 {
            let h = 1e-6;
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[c] += h;
            b[c] -= h;
            let fd = (p.objective.loss(&a) - p.objective.loss(&b)) / (2.0 * h);
            assert!((fd - g[c]).abs() < 1e-7, "{fd} vs {}", g[c]);
        }
    }

    #[test]
    fn even_blocks_tile() {
        assert_eq!(even_blocks(5, 2).unwrap(), vec![0..3, 3..5]);
        assert!(even_blocks(2, 3).is_err());
    }
}
