//! Forward and chunk-aware backward kernels for Linear, Embedding and LayerNorm.
//!
//! Every backward kernel splits into two independent parts: the activation
//! gradient `dx`, which is always computed over all parameter rows, and the
//! parameter gradient, which is only produced for the requested row ranges.
//! Parameter-gradient kernels accumulate into caller-owned slice buffers in a
//! fixed loop order (batch index ascending per element), so a kernel run over
//! rows `[a, b)` yields exactly the same bits as rows `[a, b)` of a run over
//! all rows.
//!
//! Each parameter-gradient kernel returns the number of multiply-accumulates
//! it performed, which feeds the gradient-generation cost accounting.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{uniform_init, Matrix, ParamStore, Precision, TensorId};

pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearLayer {
    pub weight: TensorId,
    pub bias: Option<TensorId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        precision: Precision,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let scale = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.register(format!("{name}.weight"), uniform_init(out_dim, in_dim, scale, rng), precision)?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), uniform_init(out_dim, 1, 0.1, rng), precision)?)
        } else {
            None
        };
        Ok(Self { weight, bias, in_dim, out_dim })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingLayer {
    pub table: TensorId,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        precision: Precision,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let table = store.register(format!("{name}.table"), uniform_init(vocab, dim, 1.0, rng), precision)?;
        Ok(Self { table, vocab, dim })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNormLayer {
    pub gamma: TensorId,
    pub beta: TensorId,
    pub dim: usize,
    pub epsilon: f64,
}

impl LayerNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, precision: Precision) -> Result<Self> {
        let gamma = store.register(format!("{name}.gamma"), Matrix::from_vec(dim, 1, vec![1.0; dim])?, precision)?;
        let beta = store.register(format!("{name}.beta"), Matrix::zeros(dim, 1), precision)?;
        Ok(Self { gamma, beta, dim, epsilon: DEFAULT_LAYER_NORM_EPS })
    }
}

pub(crate) fn check_rows(range: &Range<usize>, rows: usize) -> Result<()> {
    if range.start >= range.end || range.end > rows {
        return Err(Error::RowRange { begin: range.start, end: range.end, rows });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Linear: y = x W^T + b, x is batch x in, W is out x in.

pub fn linear_forward(x: &Matrix, weight: &Matrix, bias: Option<&Matrix>) -> Result<Matrix> {
    if x.cols() != weight.cols() {
        return Err(Error::shape(
            "linear",
            format!("input {:?} against weight {:?}", x.shape(), weight.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != (weight.rows(), 1) {
            return Err(Error::shape("linear", format!("bias {:?} for weight {:?}", b.shape(), weight.shape())));
        }
    }
    let mut y = Matrix::zeros(x.rows(), weight.rows());
    for n in 0..x.rows() {
        let xr = x.row(n);
        for o in 0..weight.rows() {
            let mut acc = 0.0;
            for (xi, wi) in xr.iter().zip(weight.row(o)) {
                acc += xi * wi;
            }
            if let Some(b) = bias {
                acc += b.get(o, 0);
            }
            y.set(n, o, acc);
        }
    }
    Ok(y)
}

/// Saved forward context of a linear layer.
#[derive(Debug, Clone, Copy)]
pub struct LinearCtx<'a> {
    pub x: &'a Matrix,
    pub weight: &'a Matrix,
    pub has_bias: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub d_weight: Option<Matrix>,
    pub d_bias: Option<Matrix>,
    pub dx: Matrix,
    pub flops: u64,
}

pub(crate) fn linear_dx(weight: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(dy.rows(), weight.cols());
    for n in 0..dy.rows() {
        let dyr = dy.row(n);
        let dxr = dx.row_mut(n);
        for (o, &g) in dyr.iter().enumerate() {
            for (d, w) in dxr.iter_mut().zip(weight.row(o)) {
                *d += g * w;
            }
        }
    }
    dx
}

/// `out[o - rows.start] += sum_n dy[n][o] * x[n]` for `o` in `rows`.
pub(crate) fn linear_weight_grad_into(x: &Matrix, dy: &Matrix, rows: Range<usize>, out: &mut Matrix) -> u64 {
    for o in rows.clone() {
        let out_row = out.row_mut(o - rows.start);
        for n in 0..dy.rows() {
            let g = dy.get(n, o);
            for (acc, xi) in out_row.iter_mut().zip(x.row(n)) {
                *acc += g * xi;
            }
        }
    }
    (rows.len() * dy.rows() * x.cols()) as u64
}

pub(crate) fn linear_bias_grad_into(dy: &Matrix, rows: Range<usize>, out: &mut Matrix) -> u64 {
    for o in rows.clone() {
        let slot = &mut out.as_mut_slice()[o - rows.start];
        for n in 0..dy.rows() {
            *slot += dy.get(n, o);
        }
    }
    (rows.len() * dy.rows()) as u64
}

pub fn linear_backward_chunked(ctx: &LinearCtx<'_>, dy: &Matrix, active_rows: Option<Range<usize>>) -> Result<LinearGrads> {
    let out_dim = ctx.weight.rows();
    if dy.shape() != (ctx.x.rows(), out_dim) {
        return Err(Error::shape("linear backward", format!("dy {:?}, expected {:?}", dy.shape(), (ctx.x.rows(), out_dim))));
    }
    let dx = linear_dx(ctx.weight, dy);
    let Some(rows) = active_rows else {
        return Ok(LinearGrads { d_weight: None, d_bias: None, dx, flops: 0 });
    };
    check_rows(&rows, out_dim)?;
    let mut d_weight = Matrix::zeros(rows.len(), ctx.weight.cols());
    let mut flops = linear_weight_grad_into(ctx.x, dy, rows.clone(), &mut d_weight);
    let d_bias = if ctx.has_bias {
        let mut db = Matrix::zeros(rows.len(), 1);
        flops += linear_bias_grad_into(dy, rows, &mut db);
        Some(db)
    } else {
        None
    };
    Ok(LinearGrads { d_weight: Some(d_weight), d_bias, dx, flops })
}

// ---------------------------------------------------------------------------
// Embedding: y[p] = table[tokens[p]].

pub fn embedding_forward(tokens: &[usize], table: &Matrix) -> Result<Matrix> {
    let mut y = Matrix::zeros(tokens.len(), table.cols());
    for (p, &t) in tokens.iter().enumerate() {
        if t >= table.rows() {
            return Err(Error::TokenRange { token: t, vocab: table.rows() });
        }
        y.row_mut(p).copy_from_slice(table.row(t));
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingCtx<'a> {
    pub tokens: &'a [usize],
    pub vocab: usize,
}

pub(crate) fn embedding_grad_into(tokens: &[usize], dy: &Matrix, rows: Range<usize>, out: &mut Matrix) -> u64 {
    let mut hits = 0u64;
    for (p, &t) in tokens.iter().enumerate() {
        if rows.contains(&t) {
            for (acc, g) in out.row_mut(t - rows.start).iter_mut().zip(dy.row(p)) {
                *acc += g;
            }
            hits += 1;
        }
    }
    hits * dy.cols() as u64
}

/// Gradient of the embedding table restricted to `active_rows`.
///
/// The returned slice has `active_rows.len()` rows regardless of vocabulary size.
pub fn embedding_backward_chunked(ctx: &EmbeddingCtx<'_>, dy: &Matrix, active_rows: Range<usize>) -> Result<(Matrix, u64)> {
    check_rows(&active_rows, ctx.vocab)?;
    if dy.rows() != ctx.tokens.len() {
        return Err(Error::shape("embedding backward", format!("dy {:?} for {} tokens", dy.shape(), ctx.tokens.len())));
    }
    let mut out = Matrix::zeros(active_rows.len(), dy.cols());
    let flops = embedding_grad_into(ctx.tokens, dy, active_rows, &mut out);
    Ok((out, flops))
}

// ---------------------------------------------------------------------------
// LayerNorm over the last dimension; batch is the leading dimension.

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormSaved {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
    pub xhat: Matrix,
}

pub fn layernorm_forward(x: &Matrix, gamma: &Matrix, beta: &Matrix, eps: f64) -> Result<(Matrix, LayerNormSaved)> {
    let dim = x.cols();
    if gamma.shape() != (dim, 1) || beta.shape() != (dim, 1) {
        return Err(Error::shape(
            "layer_norm",
            format!("input {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
        ));
    }
    let mut y = Matrix::zeros(x.rows(), dim);
    let mut xhat = Matrix::zeros(x.rows(), dim);
    let mut mean = Vec::with_capacity(x.rows());
    let mut rstd = Vec::with_capacity(x.rows());
    for n in 0..x.rows() {
        let row = x.row(n);
        let mu = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / dim as f64;
        let r = 1.0 / (var + eps).sqrt();
        for j in 0..dim {
            let h = (row[j] - mu) * r;
            xhat.set(n, j, h);
            y.set(n, j, h * gamma.get(j, 0) + beta.get(j, 0));
        }
        mean.push(mu);
        rstd.push(r);
    }
    Ok((y, LayerNormSaved { mean, rstd, xhat }))
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormCtx<'a> {
    pub saved: &'a LayerNormSaved,
    pub gamma: &'a Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormGrads {
    pub d_gamma: Option<Matrix>,
    pub d_beta: Option<Matrix>,
    pub dx: Matrix,
    pub flops: u64,
}

pub(crate) fn layernorm_dx(ctx: &LayerNormCtx<'_>, dy: &Matrix) -> Matrix {
    let xhat = &ctx.saved.xhat;
    let dim = xhat.cols();
    let inv_dim = 1.0 / dim as f64;
    let mut dx = Matrix::zeros(dy.rows(), dim);
    let mut g = vec![0.0; dim];
    for n in 0..dy.rows() {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..dim {
            g[j] = dy.get(n, j) * ctx.gamma.get(j, 0);
            sum_g += g[j];
            sum_gx += g[j] * xhat.get(n, j);
        }
        let mean_g = sum_g * inv_dim;
        let mean_gx = sum_gx * inv_dim;
        let r = ctx.saved.rstd[n];
        for j in 0..dim {
            dx.set(n, j, r * (g[j] - mean_g - xhat.get(n, j) * mean_gx));
        }
    }
    dx
}

pub(crate) fn layernorm_gamma_grad_into(xhat: &Matrix, dy: &Matrix, rows: Range<usize>, out: &mut Matrix) -> u64 {
    for j in rows.clone() {
        let slot = &mut out.as_mut_slice()[j - rows.start];
        for n in 0..dy.rows() {
            *slot += dy.get(n, j) * xhat.get(n, j);
        }
    }
    (rows.len() * dy.rows()) as u64
}

pub(crate) fn layernorm_beta_grad_into(dy: &Matrix, rows: Range<usize>, out: &mut Matrix) -> u64 {
    for j in rows.clone() {
        let slot = &mut out.as_mut_slice()[j - rows.start];
        for n in 0..dy.rows() {
            *slot += dy.get(n, j);
        }
    }
    (rows.len() * dy.rows()) as u64
}

pub fn layernorm_backward_chunked(
    ctx: &LayerNormCtx<'_>,
    dy: &Matrix,
    active_rows: Option<Range<usize>>,
) -> Result<LayerNormGrads> {
    if dy.shape() != ctx.saved.xhat.shape() {
        return Err(Error::shape(
            "layer_norm backward",
            format!("dy {:?}, expected {:?}", dy.shape(), ctx.saved.xhat.shape()),
        ));
    }
    let dx = layernorm_dx(ctx, dy);
    let Some(rows) = active_rows else {
        return Ok(LayerNormGrads { d_gamma: None, d_beta: None, dx, flops: 0 });
    };
    check_rows(&rows, dy.cols())?;
    let mut d_gamma = Matrix::zeros(rows.len(), 1);
    let mut d_beta = Matrix::zeros(rows.len(), 1);
    let flops = layernorm_gamma_grad_into(&ctx.saved.xhat, dy, rows.clone(), &mut d_gamma)
        + layernorm_beta_grad_into(dy, rows, &mut d_beta);
    Ok(LayerNormGrads { d_gamma: Some(d_gamma), d_beta: Some(d_beta), dx, flops })
}
