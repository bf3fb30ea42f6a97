//! Fully connected building blocks with hand-written forward and backward
//! passes, plus the central finite-difference oracle the gradient tests use.
//!
//! Backward functions take the cached forward values (layer input, or the
//! forward output for sigmoid) instead of recomputing them.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor, View};

/// Gradients of a scalar objective through one affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub d_input: Tensor,
    pub d_weights: Tensor,
    pub d_bias: Tensor,
}

fn check_affine(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, m) = x.dims2("affine")?;
    let (wm, n) = w.dims2("affine")?;
    if m != wm {
        return Err(Error::dim("affine", x.shape(), w.shape()));
    }
    Ok((b, m, n))
}

/// `out[i, j] = Σ_k x[i, k] · w[k, j] + b[j]`.
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, _, n) = check_affine(x, w)?;
    if b.shape() != [n] {
        return Err(Error::dim("affine", w.shape(), b.shape()));
    }
    let mut out = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    gemm(1.0, View::of(x), View::of(w), 1.0, &mut out);
    Tensor::matrix(rows, n, out)
}

pub fn affine_backward(x: &Tensor, w: &Tensor, upstream: &Tensor) -> Result<LayerGrad> {
    let (rows, m, _) = check_affine(x, w)?;
    let (d_weights, d_bias) = affine_backward_params(x, w, upstream)?;
    let mut d_input = vec![0.0; rows * m];
    gemm(1.0, View::of(upstream), View::of(w).t(), 0.0, &mut d_input);
    Ok(LayerGrad {
        d_input: Tensor::matrix(rows, m, d_input)?,
        d_weights,
        d_bias,
    })
}

/// Weight and bias gradients only; skips `upstream · wᵀ` for input layers.
pub fn affine_backward_params(x: &Tensor, w: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let (rows, m, n) = check_affine(x, w)?;
    if upstream.shape() != [rows, n] {
        return Err(Error::dim("affine_backward", &[rows, n], upstream.shape()));
    }
    let mut d_weights = vec![0.0; m * n];
    gemm(1.0, View::of(x).t(), View::of(upstream), 0.0, &mut d_weights);
    let mut d_bias = vec![0.0; n];
    for row in upstream.iter_rows() {
        for (acc, &g) in d_bias.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((Tensor::matrix(m, n, d_weights)?, Tensor::vector(d_bias)?))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes `upstream` where `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    x.zip_map(upstream, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

pub fn sigmoid_backward(y: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    y.zip_map(upstream, |y, g| g * y * (1.0 - y))
}

/// Numerically stable `log Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise log-softmax.
pub fn log_softmax_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.data_mut().chunks_exact_mut(cols) {
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Backward of row-wise log-softmax given its forward output.
pub fn log_softmax_backward(y: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    y.expect_same_shape("log_softmax_backward", upstream)?;
    let cols = y.cols();
    let mut out = upstream.clone();
    for (row, ys) in out.data_mut().chunks_exact_mut(cols).zip(y.iter_rows()) {
        let total: f64 = row.iter().sum();
        for (g, &ly) in row.iter_mut().zip(ys) {
            *g -= ly.exp() * total;
        }
    }
    Ok(out)
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn finite_difference<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(i));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}
