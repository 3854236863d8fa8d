//! Tape-free evaluation of the core numeric operations.

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::Shape(format!("matmul {sa:?} × {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![T::zero(); m * n];
    kernels::matmul_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Softmax over the last dimension.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    row_map(logits, kernels::softmax_into)
}

/// Log-softmax over the last dimension.
pub fn log_softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    row_map(logits, kernels::log_softmax_into)
}

fn row_map<T: Scalar>(x: &Tensor<T>, f: fn(&[T], &mut [T])) -> Result<Tensor<T>> {
    let c = x.last_dim();
    if c == 0 {
        return Err(Error::Shape("last dimension must be at least 1".into()));
    }
    let mut out = vec![T::zero(); x.numel()];
    for (src, dst) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        f(src, dst);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `−log softmax(logits)[target]`, evaluated through log-sum-exp.
pub fn cross_entropy_logits<T: Scalar>(logits: &Tensor<T>, target: usize) -> Result<T> {
    let v = logits.numel();
    if target >= v {
        return Err(Error::Index { index: target, size: v });
    }
    Ok(kernels::log_sum_exp(logits.data()) - logits.data()[target])
}

pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if d == 0 || gain.numel() != d {
        return Err(Error::Shape(format!(
            "rms_norm {:?} with gain {:?}",
            x.shape(),
            gain.shape()
        )));
    }
    let mut out = vec![T::zero(); x.numel()];
    for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let s = kernels::inv_rms(src);
        for ((o, &xv), &g) in dst.iter_mut().zip(src).zip(gain.data()) {
            *o = xv * s * g;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
