//! Slice-level kernels shared by the pure ops and the tape.
//!
//! Every reduction runs in a fixed index order, so results are bitwise
//! reproducible for identical inputs.

use super::Scalar;

pub const RMS_EPS: f64 = 1e-5;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub fn matmul_nt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in g_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let mut s = T::zero();
    for &v in row {
        s += (v - max).exp();
    }
    max + s.ln()
}

pub fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        s += e;
    }
    let inv = T::one() / s;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub fn log_softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let lse = log_sum_exp(row);
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Inverse RMS of a row: `1 / sqrt(mean(x²) + ε)`.
pub fn inv_rms<T: Scalar>(row: &[T]) -> T {
    let mut ss = T::zero();
    for &v in row {
        ss += v * v;
    }
    let mean = ss / T::of(row.len() as f64);
    T::one() / (mean + T::of(RMS_EPS)).sqrt()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow for large |x|.
#[inline]
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

/// Rotary angle for position `pos`, pair index `i` within a head of width `head_dim`.
#[inline]
pub fn rope_angle(pos: usize, i: usize, head_dim: usize) -> f64 {
    let inv_freq = 10000f64.powf(-2.0 * i as f64 / head_dim as f64);
    pos as f64 * inv_freq
}
