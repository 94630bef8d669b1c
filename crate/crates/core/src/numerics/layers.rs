//! Forward and backward passes for the handful of layers the model uses.
//!
//! Backward functions accumulate parameter gradients into caller-provided
//! buffers (`+=`) and return the gradient with respect to the layer input.

use super::array::{gemm, DenseArray, MatRef};
use crate::error::{Error, Result};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// `out[m, j] = Σ_a x[m, a] · w[a, j] + b[j]`.
pub fn linear(x: &DenseArray, w: &DenseArray, b: Option<&DenseArray>) -> Result<DenseArray> {
    let (m, a) = (x.rows(), x.cols());
    if w.shape().len() != 2 || w.shape()[0] != a {
        return Err(Error::shape(
            "linear",
            format!("input {:?} cannot multiply weight {:?}", x.shape(), w.shape()),
        ));
    }
    let n = w.shape()[1];
    let mut out = DenseArray::zeros(&[m, n]);
    if let Some(b) = b {
        if b.len() != n {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} does not match output width {n}", b.shape()),
            ));
        }
        for r in 0..m {
            out.row_mut(r).copy_from_slice(b.data());
        }
    }
    gemm(
        m,
        a,
        n,
        1.0,
        MatRef::row_major(x.data(), a),
        MatRef::row_major(w.data(), n),
        1.0,
        out.data_mut(),
    );
    Ok(out)
}

/// Parameter half of [`linear_backward`], for layers whose input needs no gradient.
pub fn linear_backward_params(x: &DenseArray, dout: &DenseArray, dw: &mut [f64], db: Option<&mut [f64]>) {
    let (m, a) = (x.rows(), x.cols());
    let n = dout.cols();
    debug_assert_eq!(dout.rows(), m);
    debug_assert_eq!(dw.len(), a * n);
    gemm(
        a,
        m,
        n,
        1.0,
        MatRef::transposed(x.data(), a),
        MatRef::row_major(dout.data(), n),
        1.0,
        dw,
    );
    if let Some(db) = db {
        for r in 0..m {
            for (acc, g) in db.iter_mut().zip(dout.row(r)) {
                *acc += g;
            }
        }
    }
}

/// Accumulates `dW += xᵀ·dout`, `db += Σ_rows dout`; returns `dx = dout·Wᵀ`.
pub fn linear_backward(
    x: &DenseArray,
    w: &DenseArray,
    dout: &DenseArray,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> DenseArray {
    let (m, a) = (x.rows(), x.cols());
    let n = w.shape()[1];
    debug_assert_eq!(dout.cols(), n);
    linear_backward_params(x, dout, dw, db);
    let mut dx = DenseArray::zeros(&[m, a]);
    gemm(
        m,
        n,
        a,
        1.0,
        MatRef::row_major(dout.data(), n),
        MatRef::transposed(w.data(), n),
        0.0,
        dx.data_mut(),
    );
    dx
}

/// Saved normalized activations for [`layer_norm_backward`].
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: DenseArray,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(
    x: &DenseArray,
    gamma: &DenseArray,
    beta: &DenseArray,
    eps: f64,
) -> Result<(DenseArray, NormCache)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "input {:?} with gamma {:?} / beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let m = x.rows();
    let mut xhat = DenseArray::zeros(&[m, d]);
    let mut out = DenseArray::zeros(&[m, d]);
    let mut inv_std = Vec::with_capacity(m);
    for r in 0..m {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let o = out.row_mut(r);
        for j in 0..d {
            o[j] = gamma.data()[j] * xh[j] + beta.data()[j];
        }
    }
    Ok((out, NormCache { xhat, inv_std }))
}

pub fn layer_norm_backward(
    cache: &NormCache,
    gamma: &DenseArray,
    dout: &DenseArray,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> DenseArray {
    let (m, d) = (cache.xhat.rows(), cache.xhat.cols());
    let mut dx = DenseArray::zeros(&[m, d]);
    let mut dxhat = vec![0.0; d];
    for r in 0..m {
        let xh = cache.xhat.row(r);
        let go = dout.row(r);
        for j in 0..d {
            dgamma[j] += go[j] * xh[j];
            dbeta[j] += go[j];
            dxhat[j] = go[j] * gamma.data()[j];
        }
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
        let scale = cache.inv_std[r] / d as f64;
        let out = dx.row_mut(r);
        for j in 0..d {
            out[j] = scale * (d as f64 * dxhat[j] - sum_d - xh[j] * sum_dx);
        }
    }
    dx
}

/// Column-wise batch normalization with batch statistics (biased variance).
/// Returns the output, the cache, and the per-column batch mean and variance.
pub fn batch_norm_train(
    x: &DenseArray,
    gamma: &DenseArray,
    beta: &DenseArray,
    eps: f64,
) -> Result<(DenseArray, NormCache, Vec<f64>, Vec<f64>)> {
    let (b, d) = (x.rows(), x.cols());
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(
            "batch_norm",
            format!("input {:?} with gamma {:?}", x.shape(), gamma.shape()),
        ));
    }
    let mut mean = vec![0.0; d];
    for r in 0..b {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut var = vec![0.0; d];
    for r in 0..b {
        for j in 0..d {
            let c = x.row(r)[j] - mean[j];
            var[j] += c * c;
        }
    }
    var.iter_mut().for_each(|v| *v /= b as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = DenseArray::zeros(&[b, d]);
    let mut out = DenseArray::zeros(&[b, d]);
    for r in 0..b {
        for j in 0..d {
            let h = (x.row(r)[j] - mean[j]) * inv_std[j];
            xhat.row_mut(r)[j] = h;
            out.row_mut(r)[j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    Ok((out, NormCache { xhat, inv_std }, mean, var))
}

/// Backward of [`batch_norm_train`]; `cache.inv_std` is indexed by column here.
pub fn batch_norm_train_backward(
    cache: &NormCache,
    gamma: &DenseArray,
    dout: &DenseArray,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> DenseArray {
    let (b, d) = (cache.xhat.rows(), cache.xhat.cols());
    let mut sum_d = vec![0.0; d];
    let mut sum_dx = vec![0.0; d];
    for r in 0..b {
        for j in 0..d {
            let g = dout.row(r)[j];
            let xh = cache.xhat.row(r)[j];
            dgamma[j] += g * xh;
            dbeta[j] += g;
            let dxh = g * gamma.data()[j];
            sum_d[j] += dxh;
            sum_dx[j] += dxh * xh;
        }
    }
    let mut dx = DenseArray::zeros(&[b, d]);
    for r in 0..b {
        for j in 0..d {
            let dxh = dout.row(r)[j] * gamma.data()[j];
            let xh = cache.xhat.row(r)[j];
            dx.row_mut(r)[j] =
                cache.inv_std[j] / b as f64 * (b as f64 * dxh - sum_d[j] - xh * sum_dx[j]);
        }
    }
    dx
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(x: &DenseArray) -> DenseArray {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Given `y = softmax(x)` row-wise and `dy`, returns `dx`.
pub fn softmax_rows_backward(y: &DenseArray, dy: &DenseArray) -> DenseArray {
    let mut dx = DenseArray::zeros(y.shape());
    for r in 0..y.rows() {
        softmax_backward_row(y.row(r), dy.row(r), dx.row_mut(r));
    }
    dx
}

pub(crate) fn softmax_backward_row(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((o, yv), g) in dx.iter_mut().zip(y).zip(dy) {
        *o = yv * (g - dot);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> DenseArray {
        DenseArray::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn vector(v: &[f64]) -> DenseArray {
        DenseArray::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_map() {
        let out = linear(&mat(&[&[1., 2.]]), &mat(&[&[1., 0.], &[0., 1.]]), Some(&vector(&[0., 0.]))).unwrap();
        assert_eq!(out.data(), &[1., 2.]);
    }

    #[test]
    fn linear_hand_multiply() {
        // [1,1]·[[2,3],[4,5]] + [1,1] = [2+4+1, 3+5+1]
        let out = linear(&mat(&[&[1., 1.]]), &mat(&[&[2., 3.], &[4., 5.]]), Some(&vector(&[1., 1.]))).unwrap();
        assert_eq!(out.data(), &[7., 9.]);
    }

    #[test]
    fn linear_rejects_inner_mismatch() {
        let err = linear(&mat(&[&[1., 1., 1.]]), &mat(&[&[2., 3.], &[4., 5.]]), None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let (out, _) = layer_norm(&mat(&[&[4., 4., 4.]]), &vector(&[1.; 3]), &vector(&[0.; 3]), 1e-5).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_two_values() {
        // mean 2, population std 1
        let (out, _) = layer_norm(&mat(&[&[1., 3.]]), &vector(&[1., 1.]), &vector(&[0., 0.]), 1e-14).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-12);
        assert!((out.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let (out, _) = layer_norm(&mat(&[&[1., 5., -2.]]), &vector(&[0.; 3]), &vector(&[0.5, -1., 2.]), 1e-5).unwrap();
        assert_eq!(out.data(), &[0.5, -1., 2.]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_rows(&mat(&[&[0., 0.]])).data(), &[0.5, 0.5]);
        assert_eq!(softmax_rows(&mat(&[&[1000., 1000.]])).data(), &[0.5, 0.5]);
        let s = softmax_rows(&mat(&[&[0., 3f64.ln()]]));
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
