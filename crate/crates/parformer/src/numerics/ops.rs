//! Pure tensor kernels.
//!
//! These are the building blocks shared by the public operations and the
//! gradient tape. Everything here is a plain function of its inputs; the
//! tape records which kernel ran and replays the hand-derived adjoint.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Real, Tensor};

/// Default layer-norm epsilon (biased-variance convention).
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Default guard for cosine similarity on (near-)zero vectors.
pub const COSINE_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Raw matmul kernels. `a` and `b` are row-major; the j-inner loops keep the
// hot accesses contiguous so they vectorize.
// ---------------------------------------------------------------------------

/// c[m,n] += a[m,k] . b[k,n]
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] . b[n,k]^T  (dot products of contiguous rows)
pub fn matmul_bt_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *cv += s;
        }
    }
}

/// c[k,n] += a[m,k]^T . b[m,n]
pub fn matmul_at_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise scalar functions.
// ---------------------------------------------------------------------------

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Exact-erf GELU: 0.5 x (1 + erf(x / sqrt(2))).
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::ONE + (x * inv_sqrt2).erf())
}

/// d/dx gelu(x) = Phi(x) + x phi(x).
pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let phi_cdf = half * (T::ONE + (x * inv_sqrt2).erf());
    let pdf = T::from_f64(1.0 / (std::f64::consts::TAU).sqrt()) * (-half * x * x).exp();
    phi_cdf + x * pdf
}

// ---------------------------------------------------------------------------
// Spec-level operations.
// ---------------------------------------------------------------------------

/// out[..., j] = sum_k x[..., k] w[k, j] + b[j]
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d_in = x.last_dim()?;
    if weight.shape().len() != 2 || weight.shape()[0] != d_in {
        return Err(Error::dimension("linear weight", &[d_in, 0], weight.shape()));
    }
    let d_out = weight.shape()[1];
    if bias.shape() != [d_out] {
        return Err(Error::dimension("linear bias", &[d_out], bias.shape()));
    }
    let rows = x.numel() / d_in;
    let mut out = vec![T::ZERO; rows * d_out];
    for r in 0..rows {
        out[r * d_out..(r + 1) * d_out].copy_from_slice(bias.data());
    }
    matmul_acc(x.data(), weight.data(), rows, d_in, d_out, &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(&shape, out)
}

/// Normalize each trailing slice with the biased (divide-by-d) variance:
/// out = gamma (x - mean) / sqrt(var + eps) + beta.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.last_dim()?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dimension("layer_norm params", &[d], gamma.shape()));
    }
    let rows = x.numel() / d;
    let inv_d = T::ONE / T::from_f64(d as f64);
    let mut out = vec![T::ZERO; x.numel()];
    for r in 0..rows {
        let xs = &x.data()[r * d..(r + 1) * d];
        let mean = xs.iter().copied().sum::<T>() * inv_d;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let inv_std = T::ONE / (var + eps).sqrt();
        let os = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            os[j] = gamma.data()[j] * (xs[j] - mean) * inv_std + beta.data()[j];
        }
    }
    Tensor::new(x.shape(), out)
}

/// Max-shifted softmax over the trailing dimension; each slice sums to 1.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim()?;
    let rows = x.numel() / d;
    let mut out = vec![T::ZERO; x.numel()];
    for r in 0..rows {
        let xs = &x.data()[r * d..(r + 1) * d];
        let max = xs.iter().copied().fold(xs[0], T::max);
        let os = &mut out[r * d..(r + 1) * d];
        let mut total = T::ZERO;
        for j in 0..d {
            let e = (xs[j] - max).exp();
            os[j] = e;
            total += e;
        }
        let inv = T::ONE / total;
        for v in os.iter_mut() {
            *v = *v * inv;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Spatial mean of an [h, w, c] map, producing one value per channel.
pub fn global_average_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::dimension("global_average_pool", &[0, 0, 0], shape));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut out = vec![T::ZERO; c];
    for cell in 0..h * w {
        let src = &x.data()[cell * c..(cell + 1) * c];
        for (o, &v) in out.iter_mut().zip(src) {
            *o += v;
        }
    }
    let inv = T::ONE / T::from_f64((h * w) as f64);
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    Tensor::new(&[c], out)
}

/// (a . b) / (max(|a|, eps) max(|b|, eps)), clamped to [-1, 1].
pub fn cosine_similarity<T: Real>(a: &Tensor<T>, b: &Tensor<T>, eps: T) -> Result<T> {
    if a.shape() != b.shape() || a.shape().len() != 1 {
        return Err(Error::dimension("cosine_similarity", a.shape(), b.shape()));
    }
    let mut dot = T::ZERO;
    let mut na = T::ZERO;
    let mut nb = T::ZERO;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = na.sqrt().max(eps) * nb.sqrt().max(eps);
    Ok((dot / denom).min(T::ONE).max(-T::ONE))
}
