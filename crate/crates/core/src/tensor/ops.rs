//! Tape-free forms of the core operations, for inference paths and oracles.

use super::kernels;
use super::tape::conv_forward;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    None,
    Mean,
    Sum,
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    kernels::matmul_into(a.data(), b.data(), m, k, n, false, false, &mut out, T::zero());
    Tensor::new(vec![m, n], out)
}

pub fn softmax<T: Scalar>(v: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = v.shape();
    if axis >= shape.len() {
        return Err(Error::Index {
            what: "softmax axis",
            index: axis,
            extent: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Tensor::new(shape.to_vec(), kernels::softmax_axis(v.data(), outer, shape[axis], inner))
}

/// Cross-entropy in nats of rank-2 logits against per-row targets.
///
/// `None` targets are ignored. The unreduced form has one entry per
/// non-ignored row; reduced forms return a single value.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[Option<usize>], reduction: Reduction) -> Result<Vec<f64>> {
    let (rows, vocab) = logits.dims2()?;
    if targets.len() != rows {
        return Err(Error::shape("cross_entropy targets", &[targets.len()], &[rows]));
    }
    if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
        return Err(Error::Index {
            what: "cross_entropy target",
            index: bad,
            extent: vocab,
        });
    }
    let (losses, _) = kernels::cross_entropy_rows(logits.data(), vocab, targets, false);
    let kept: Vec<f64> = losses
        .iter()
        .zip(targets)
        .filter(|(_, t)| t.is_some())
        .map(|(l, _)| l.as_f64())
        .collect();
    Ok(match reduction {
        Reduction::None => kept,
        Reduction::Sum => vec![kept.iter().sum()],
        Reduction::Mean if kept.is_empty() => vec![0.0],
        Reduction::Mean => vec![kept.iter().sum::<f64>() / kept.len() as f64],
    })
}

pub const RMSNORM_EPS: f64 = 1e-5;

pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if d == 0 || gain.numel() != d {
        return Err(Error::shape("rmsnorm", x.shape(), gain.shape()));
    }
    let (out, _) = kernels::rmsnorm_rows(x.data(), gain.data(), RMSNORM_EPS);
    Tensor::new(x.shape().to_vec(), out)
}

/// Rotates a single feature vector as if it sat at `position`.
pub fn apply_rotary<T: Scalar>(x: &[T], position: usize) -> Result<Vec<T>> {
    if x.len() % 2 != 0 {
        return Err(Error::Config(format!("rotary needs an even feature extent, got {}", x.len())));
    }
    let half = x.len() / 2;
    let (cos, sin) = kernels::rotary_tables(position + 1, x.len());
    let mut out = vec![T::zero(); x.len()];
    let row = position * half..(position + 1) * half;
    kernels::rotate_head(x, &mut out, &cos[row.clone()], &sin[row], 1.0);
    Ok(out)
}

/// Sequence convolution of `x` `(seq, d)` with weights `(seq, seq, kernel)`.
///
/// With `causal` set the weights must already be lower triangular in the
/// sequence dimension.
pub fn masked_seq_conv<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, kernel: usize, causal: bool) -> Result<Tensor<T>> {
    let (t, d) = x.dims2()?;
    if weights.shape() != [t, t, kernel] || kernel == 0 {
        return Err(Error::shape("masked_seq_conv weights", weights.shape(), &[t, t, kernel]));
    }
    if causal {
        let w = weights.data();
        for i in 0..t {
            for j in i + 1..t {
                if (0..kernel).any(|k| w[(i * t + j) * kernel + k] != T::zero()) {
                    return Err(Error::Config(format!(
                        "causal convolution weights are not lower triangular (entry {i},{j})"
                    )));
                }
            }
        }
    }
    let out = conv_forward(x.data(), weights.data(), 1, t, d, 1, kernel, t, causal, None);
    Tensor::new(vec![t, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_times_a() {
        let a = t2(&[&[1.0, -2.0, 3.5], &[0.0, 4.0, 1.0], &[7.0, 8.0, -9.0]]);
        assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a);
    }

    #[test]
    fn small_hand_product() {
        let c = matmul(&t2(&[&[1.0, 2.0], &[3.0, 4.0]]), &t2(&[&[1.0], &[1.0]])).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor::<f32>::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let s = softmax(&Tensor::<f64>::zeros(vec![4]), 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = softmax(&Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12 && (s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = t2(&[&[1.0, 5.0], &[1.0, 2.0]]);
        let s = softmax(&x, 0).unwrap();
        assert!((s.get2(0, 0) - 0.5).abs() < 1e-12);
        assert!((s.get2(0, 1) + s.get2(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_and_near_delta_cross_entropy() {
        let u = Tensor::<f32>::zeros(vec![1, 8192]);
        let l = cross_entropy(&u, &[Some(17)], Reduction::None).unwrap();
        assert!((l[0] - 8192f64.ln()).abs() < 1e-4, "{}", l[0]);
        let mut d = Tensor::<f32>::zeros(vec![1, 8]);
        d.data_mut()[3] = 30.0;
        let l = cross_entropy(&d, &[Some(3)], Reduction::None).unwrap();
        assert!(l[0] < 1e-9);
    }

    #[test]
    fn cross_entropy_ignore_and_range() {
        let x = Tensor::<f32>::zeros(vec![3, 4]);
        let l = cross_entropy(&x, &[Some(0), None, Some(1)], Reduction::None).unwrap();
        assert_eq!(l.len(), 2);
        let s = cross_entropy(&x, &[Some(0), None, Some(1)], Reduction::Sum).unwrap();
        assert!((s[0] - 2.0 * 4f64.ln()).abs() < 1e-6);
        assert!(matches!(
            cross_entropy(&x, &[Some(4), None, None], Reduction::Mean),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn rmsnorm_examples() {
        let one = Tensor::<f64>::filled(vec![1, 4], 1.0);
        let y = rmsnorm(&one, &Tensor::filled(vec![4], 1.0)).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-5));
        let y = rmsnorm(&Tensor::<f64>::new(vec![2], vec![3.0, -3.0]).unwrap(), &Tensor::filled(vec![2], 1.0)).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn rotary_identity_at_zero_and_odd_error() {
        let x = vec![0.3f64, -1.2, 2.0, 0.7];
        assert_eq!(apply_rotary(&x, 0).unwrap(), x);
        assert!(apply_rotary(&[1.0f64, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn causal_conv_rejects_upper_weights() {
        let x = Tensor::<f64>::zeros(vec![3, 2]);
        let mut w = Tensor::<f64>::zeros(vec![3, 3, 1]);
        w.data_mut()[2] = 1.0;
        assert!(masked_seq_conv(&x, &w, 1, true).is_err());
        assert!(masked_seq_conv(&x, &w, 1, false).is_ok());
    }

    #[test]
    fn identity_conv_is_identity() {
        let x = t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let mut w = Tensor::<f64>::zeros(vec![3, 3, 1]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(masked_seq_conv(&x, &w, 1, true).unwrap(), x);
    }
}
