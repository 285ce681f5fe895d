//! Matrix products, activations, and the reconstruction loss.
//!
//! Every product accumulates in `f64` in ascending inner-index order and rounds
//! once to `f32`, so results are independent of blocking.

use crate::error::{Error, Result};
use crate::numkern::Tensor;

/// `out[i][j] = sum_p a[i][p] * b[j][p]` for row-major `a: m x k`, `b: n x k`.
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut j = 0;
        while j + 4 <= n {
            let b0 = &b[j * k..(j + 1) * k];
            let b1 = &b[(j + 1) * k..(j + 2) * k];
            let b2 = &b[(j + 2) * k..(j + 3) * k];
            let b3 = &b[(j + 3) * k..(j + 4) * k];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for p in 0..k {
                let x = ar[p] as f64;
                s0 += x * b0[p] as f64;
                s1 += x * b1[p] as f64;
                s2 += x * b2[p] as f64;
                s3 += x * b3[p] as f64;
            }
            orow[j] = s0 as f32;
            orow[j + 1] = s1 as f32;
            orow[j + 2] = s2 as f32;
            orow[j + 3] = s3 as f32;
            j += 4;
        }
        while j < n {
            let br = &b[j * k..(j + 1) * k];
            let mut s = 0.0f64;
            for p in 0..k {
                s += ar[p] as f64 * br[p] as f64;
            }
            orow[j] = s as f32;
            j += 1;
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn require_2d(t: &Tensor, name: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(format!(
            "{name} must be 2-D, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Standard matrix product `a[m x k] * b[k x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d(a, "lhs")?;
    let (k2, n) = require_2d(b, "rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let bt = transpose_raw(b.data(), k, n);
    Tensor::new(&[m, n], gemm_nt(a.data(), &bt, m, n, k))
}

/// `a * b^T` for `a[m x k]`, `b[n x k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_nt {:?} x {:?}^T",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new(&[m, n], gemm_nt(a.data(), b.data(), m, n, k))
}

/// `a^T * b` for `a[k x m]`, `b[k x n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_tn {:?}^T x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let at = transpose_raw(a.data(), k, m);
    let bt = transpose_raw(b.data(), k, n);
    Tensor::new(&[m, n], gemm_nt(&at, &bt, m, n, k))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// `dy` masked by `x > 0`, where `x` is the pre-activation input.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut out = dy.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f32::tanh)
}

/// Gradient through tanh given its output `y`.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut out = dy.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(y.data()) {
        *g *= 1.0 - v * v;
    }
    out
}

pub fn softplus_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x.max(0.0) + (-x.abs()).exp().ln_1p()) as f32
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

/// Gradient through softplus given its input `x`.
pub fn softplus_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut out = dy.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        let s = 1.0 / (1.0 + (-(v as f64)).exp());
        *g = (*g as f64 * s) as f32;
    }
    out
}

/// Mean squared error, accumulated in `f64`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.check_same(target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of [`mse_loss`] with respect to `pred`, scaled by `weight`.
pub fn mse_backward(pred: &Tensor, target: &Tensor, weight: f64) -> Result<Tensor> {
    pred.check_same(target)?;
    let k = 2.0 * weight / pred.len() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (k * (p as f64 - t as f64)) as f32)
        .collect();
    Tensor::new(pred.shape(), data)
}
