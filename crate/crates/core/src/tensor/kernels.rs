//! Forward and backward kernels on raw row-major buffers.

use super::Scalar;

pub(crate) const ROTARY_BASE: f64 = 10_000.0;

/// Strides of a logical `rows x cols` view, optionally transposed storage.
#[inline]
pub(crate) fn view(cols_stored: usize, transposed: bool) -> (usize, usize) {
    if transposed {
        (1, cols_stored)
    } else {
        (cols_stored, 1)
    }
}

/// `op(a)[m x k] * op(b)[k x n]`, accumulating into `out` when `beta == 1`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    out: &mut [T],
    beta: T,
) {
    // a is stored m x k (or k x m when transposed); b is k x n (or n x k).
    let a_strides = view(if ta { m } else { k }, ta);
    let b_strides = view(if tb { k } else { n }, tb);
    T::gemm(m, k, n, a, a_strides, b, b_strides, out, (n, 1), beta);
}

/// Row-wise numerically stable softmax over `(outer, n, inner)` layout.
pub(crate) fn softmax_axis<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(x[idx(j)].as_f64());
            }
            let mut sum = 0.0f64;
            for j in 0..n {
                sum += (x[idx(j)].as_f64() - mx).exp();
            }
            for j in 0..n {
                out[idx(j)] = T::from_f64((x[idx(j)].as_f64() - mx).exp() / sum);
            }
        }
    }
    out
}

/// Per-row `-log softmax(row)[target]`; returns losses and probabilities.
pub(crate) fn cross_entropy_rows<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[Option<usize>],
    keep_probs: bool,
) -> (Vec<T>, Vec<T>) {
    let rows = targets.len();
    let mut losses = vec![T::zero(); rows];
    let mut probs = if keep_probs {
        vec![T::zero(); logits.len()]
    } else {
        Vec::new()
    };
    for r in 0..rows {
        let Some(t) = targets[r] else { continue };
        let row = &logits[r * vocab..(r + 1) * vocab];
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let sum: f64 = row.iter().map(|v| (v.as_f64() - mx).exp()).sum();
        let lse = mx + sum.ln();
        losses[r] = T::from_f64((lse - row[t].as_f64()).max(0.0));
        if keep_probs {
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = T::from_f64((v.as_f64() - lse).exp());
            }
        }
    }
    (losses, probs)
}

/// RMS normalization per row followed by an elementwise gain.
pub(crate) fn rmsnorm_rows<T: Scalar>(x: &[T], gain: &[T], eps: f64) -> (Vec<T>, Vec<T>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + eps).sqrt();
        inv[r] = T::from_f64(s);
        for j in 0..d {
            out[r * d + j] = T::from_f64(row[j].as_f64() * s * gain[j].as_f64());
        }
    }
    (out, inv)
}

/// Cos/sin tables of shape `(positions, half)` for rotary embedding.
pub(crate) fn rotary_tables(positions: usize, head_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = vec![0.0; positions * half];
    let mut sin = vec![0.0; positions * half];
    for p in 0..positions {
        for i in 0..half {
            let freq = ROTARY_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = p as f64 * freq;
            cos[p * half + i] = angle.cos();
            sin[p * half + i] = angle.sin();
        }
    }
    (cos, sin)
}

/// Rotates pairs `(x[i], x[i + half])` of one head slice; `sign = -1` inverts.
#[inline]
pub(crate) fn rotate_head<T: Scalar>(src: &[T], dst: &mut [T], cos: &[f64], sin: &[f64], sign: f64) {
    let half = src.len() / 2;
    for i in 0..half {
        let (c, s) = (cos[i], sign * sin[i]);
        let x1 = src[i].as_f64();
        let x2 = src[i + half].as_f64();
        dst[i] = T::from_f64(x1 * c - x2 * s);
        dst[i + half] = T::from_f64(x1 * s + x2 * c);
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
