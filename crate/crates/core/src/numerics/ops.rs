//! Forward kernels shared by the tape and by tape-free callers.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Per-row normalization statistics kept for the backward pass.
pub(crate) struct LayerNormOut {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_raw(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> LayerNormOut {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    LayerNormOut { out, xhat, rstd }
}

pub(crate) fn check_layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<()> {
    let d = x.cols();
    if d == 0 {
        return Err(Error::invalid("layer_norm over an empty feature dimension"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("layer_norm eps must be positive, got {eps}")));
    }
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    Ok(())
}

/// Row-wise LayerNorm (population variance) followed by `gain * xhat + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    check_layer_norm(x, gain, bias, eps)?;
    let out = layer_norm_raw(x.data(), x.cols(), gain.data(), bias.data(), eps);
    Tensor::new(x.shape().to_vec(), out.out)
}

/// Reverse row order inside every block of `seq_len` rows.
pub fn flip_rows(data: &[f64], cols: usize, seq_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let rows = data.len() / cols.max(1);
    for s in 0..rows / seq_len.max(1) {
        for t in 0..seq_len {
            let src = (s * seq_len + t) * cols;
            let dst = (s * seq_len + seq_len - 1 - t) * cols;
            out[dst..dst + cols].copy_from_slice(&data[src..src + cols]);
        }
    }
    out
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
