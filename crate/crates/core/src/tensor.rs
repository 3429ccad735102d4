//! Dense row-major `f32` tensors and the handful of kernels the GPT-2 forward
//! pass needs: matrix products, row softmax, layer norm and tanh-GELU.
//!
//! Every kernel is single-threaded and accumulates each output element in a
//! fixed order, so repeated calls on identical inputs are bitwise identical.

use crate::error::{Error, Result};

mod gemm;

pub use gemm::{gemm_accumulate, gemm_nt};

/// A dense, row-major tensor of 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("invalid shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "zero-sized tensor {shape:?}");
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix whose row length is the last dimension.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Length of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Copies a subset of rows into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let c = self.cols();
        let n = self.rows();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Range(format!("row {r} out of {n}")));
            }
            out.extend_from_slice(self.row(r));
        }
        Self::new(vec![rows.len(), c], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Matrix product `a · b` for `a: [m×k]`, `b: [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: [{m}×{k}] · [{k2}×{n}]"
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_accumulate(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// Affine map `x · w + bias` applied to every row of `x`.
pub fn linear(x: &Tensor, w: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let (m, k) = x.dims2()?;
    let (k2, n) = w.dims2()?;
    if k != k2 || bias.len() != n {
        return Err(Error::Shape(format!(
            "linear: x [{m}×{k}], w [{k2}×{n}], bias [{}]",
            bias.len()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_accumulate(m, k, n, x.data(), w.data(), &mut out);
    for row in out.chunks_exact_mut(n) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax over a slice, in place.
///
/// `-inf` entries act as a mask. A row with no finite entry is rejected.
pub fn softmax_in_place(row: &mut [f32]) -> Result<()> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY || max.is_nan() {
        return Err(Error::Numeric("softmax over a fully masked row".into()));
    }
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
    Ok(())
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.dims2()?;
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data.chunks_exact_mut(c) {
        softmax_in_place(row)?;
    }
    Ok(out)
}

/// Layer norm of one vector, writing into `out`.
///
/// Returns the divisor `sqrt(var + eps)`; attribution code reuses it to apply
/// the same normalization to partial residual states.
pub fn layer_norm_into(x: &[f32], gain: &[f32], bias: &[f32], eps: f32, out: &mut [f32]) -> f32 {
    debug_assert!(!x.is_empty());
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let scale = (var + eps as f64).sqrt() as f32;
    let mean = mean as f32;
    for i in 0..x.len() {
        out[i] = (x[i] - mean) / scale * gain[i] + bias[i];
    }
    scale
}

/// Layer norm of a single vector. Returns the normalized vector and its scale.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<(Tensor, f32)> {
    let n = x.len();
    if gain.len() != n || bias.len() != n {
        return Err(Error::Shape(format!(
            "layer_norm: x [{n}], gain [{}], bias [{}]",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = vec![0.0; n];
    let scale = layer_norm_into(x.data(), gain.data(), bias.data(), eps, &mut out);
    Ok((Tensor::new(x.shape().to_vec(), out)?, scale))
}

/// Row-wise layer norm over a `[m×n]` matrix, also returning the per-row scales.
pub fn layer_norm_rows(x: &Tensor, gain: &[f32], bias: &[f32], eps: f32) -> (Tensor, Vec<f32>) {
    let n = x.cols();
    let mut out = vec![0.0; x.len()];
    let scales = x
        .data
        .chunks_exact(n)
        .zip(out.chunks_exact_mut(n))
        .map(|(row, o)| layer_norm_into(row, gain, bias, eps, o))
        .collect();
    (
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        scales,
    )
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// Tanh-approximate GELU of a scalar.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

pub fn gelu_in_place(x: &mut [f32]) {
    for v in x {
        *v = gelu_scalar(*v);
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    // eight independent lanes keep the loop vectorizable
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] += a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<f32>() + tail
}
