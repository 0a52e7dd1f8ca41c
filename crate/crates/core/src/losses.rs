//! Training objectives: perceptual (cross-entropy), reconstruction (half MSE
//! plus weight decay), representation (cosine distance), generation (smooth
//! L1) and their weighted joint combination.
//!
//! Losses are batch means of per-sample time means, so magnitudes do not
//! depend on the waveform length.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Floor applied inside the logarithm of the cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

/// Trade-off coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight decay of the separately trained audio autoencoder.
    pub lambda2: f64,
    /// Perceptual (classification) term.
    pub eta1: f64,
    /// Representation term.
    pub eta2: f64,
    /// Generation term.
    pub eta3: f64,
    /// Weight decay over the jointly trained parameters.
    pub eta4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda2: 5e-4,
            eta1: 0.5,
            eta2: 1.0,
            eta3: 1.0,
            eta4: 0.8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda2, self.eta1, self.eta2, self.eta3, self.eta4];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Param(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Data terms of the joint loss evaluated on one minibatch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub perceptual: f64,
    pub representation: f64,
    pub generation: f64,
}

/// `eta1*L_per + eta2*L_rep + eta3*L_gen + eta4*sum(W^2)`.
pub fn joint_loss(c: LossComponents, weight_sq_sum: f64, w: &LossWeights) -> f64 {
    w.eta1 * c.perceptual + w.eta2 * c.representation + w.eta3 * c.generation + w.eta4 * weight_sq_sum
}

fn rows<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    let n = t.shape()[0];
    (n, t.numel() / n)
}

/// Mean cross-entropy `-(1/N) sum_i y_i . ln(max(p_i, 1e-12))`. Rows of
/// `probs` must sum to one.
pub fn perceptual_loss<T: Scalar>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<T> {
    if probs.shape() != onehot.shape() {
        return Err(Error::shape("perceptual_loss", probs.shape(), onehot.shape()));
    }
    let (n, h) = rows(probs);
    let tol = (T::epsilon().as_f64() * 64.0 * h as f64).max(1e-12);
    let clamp = T::lit(LOG_CLAMP);
    let mut total = T::zero();
    for (i, (p, y)) in probs.data().chunks(h).zip(onehot.data().chunks(h)).enumerate() {
        let sum: T = p.iter().copied().sum();
        if (sum.as_f64() - 1.0).abs() > tol || p.iter().any(|&v| v < T::zero()) {
            return Err(Error::NotNormalized { row: i, sum: sum.as_f64() });
        }
        for (&pk, &yk) in p.iter().zip(y) {
            if yk != T::zero() {
                total = total - yk * pk.max(clamp).ln();
            }
        }
    }
    Ok(total / T::lit(n as f64))
}

pub(crate) fn perceptual_grad<T: Scalar>(probs: &Tensor<T>, onehot: &[T]) -> Vec<T> {
    let (n, _) = rows(probs);
    let inv_n = T::lit(1.0 / n as f64);
    let clamp = T::lit(LOG_CLAMP);
    probs
        .data()
        .iter()
        .zip(onehot)
        .map(|(&p, &y)| if p > clamp { -y / p * inv_n } else { T::zero() })
        .collect()
}

/// `1/(2N) sum_i mean_t (a_i - a_hat_i)^2`.
pub fn half_mse<T: Scalar>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<T> {
    if target.shape() != pred.shape() {
        return Err(Error::shape("reconstruction_loss", target.shape(), pred.shape()));
    }
    let s: T = target.data().iter().zip(pred.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s / T::lit(2.0 * target.numel() as f64))
}

/// Half MSE plus `lambda2 * sum(W^2)`.
pub fn reconstruction_loss<T: Scalar>(target: &Tensor<T>, pred: &Tensor<T>, weight_sq_sum: T, lambda2: f64) -> Result<T> {
    Ok(half_mse(target, pred)? + T::lit(lambda2) * weight_sq_sum)
}

/// Batch mean of `1 - cos(phi_a_i, phi_i)`, in `[0, 2]`.
pub fn representation_loss<T: Scalar>(phi_a: &Tensor<T>, phi: &Tensor<T>) -> Result<T> {
    if phi_a.shape() != phi.shape() {
        return Err(Error::shape("representation_loss", phi_a.shape(), phi.shape()));
    }
    let (n, d) = rows(phi);
    let mut total = 0.0f64;
    for i in 0..n {
        let (a, b) = (&phi_a.data()[i * d..(i + 1) * d], &phi.data()[i * d..(i + 1) * d]);
        let (dot, na, nb) = dot_norms(a, b);
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroNorm { index: i });
        }
        total += 1.0 - (dot / (na * nb)).clamp(-1.0, 1.0);
    }
    Ok(T::lit(total / n as f64))
}

fn dot_norms<T: Scalar>(a: &[T], b: &[T]) -> (f64, f64, f64) {
    let (mut dot, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    (dot, aa.sqrt(), bb.sqrt())
}

pub(crate) fn representation_grad<T: Scalar>(phi_a: &Tensor<T>, phi: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, d) = rows(phi);
    let mut ga = vec![T::zero(); n * d];
    let mut gb = vec![T::zero(); n * d];
    for i in 0..n {
        let r = i * d..(i + 1) * d;
        let (a, b) = (&phi_a.data()[r.clone()], &phi.data()[r.clone()]);
        let (dot, na, nb) = dot_norms(a, b);
        let inv = 1.0 / (na * nb * n as f64);
        let cos = dot / (na * nb);
        for k in 0..d {
            let (x, y) = (a[k].as_f64(), b[k].as_f64());
            // d(-cos)/da = -(b/(|a||b|) - cos * a/|a|^2)
            ga[i * d + k] = T::lit(-(y * inv - cos * x / (na * na * n as f64)));
            gb[i * d + k] = T::lit(-(x * inv - cos * y / (nb * nb * n as f64)));
        }
    }
    (ga, gb)
}

/// Smooth L1: `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`.
pub fn smooth_l1<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        T::lit(0.5) * x * x
    } else {
        x.abs() - T::lit(0.5)
    }
}

/// Derivative of [`smooth_l1`].
pub fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

/// Mean over batch and time of `smooth_l1(a_tr - a_gen)`.
pub fn generation_loss<T: Scalar>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<T> {
    if target.shape() != pred.shape() {
        return Err(Error::shape("generation_loss", target.shape(), pred.shape()));
    }
    let s: T = target.data().iter().zip(pred.data()).map(|(&a, &b)| smooth_l1(a - b)).sum();
    Ok(s / T::lit(target.numel() as f64))
}

pub(crate) fn generation_grad<T: Scalar>(target: &[T], pred: &[T]) -> Vec<T> {
    let inv = T::lit(1.0 / target.len() as f64);
    target.iter().zip(pred).map(|(&a, &b)| -smooth_l1_grad(a - b) * inv).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn onehot(n: usize, h: usize, labels: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(&[n, h], |i| if labels[i / h] == i % h { 1.0 } else { 0.0 })
    }

    #[test]
    fn perceptual_uniform_is_ln_h() {
        let p = Tensor::full(&[3, 10], 0.1);
        let l = perceptual_loss(&p, &onehot(3, 10, &[0, 4, 9])).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn perceptual_exact_prediction_is_zero() {
        let y = onehot(2, 3, &[1, 2]);
        assert_eq!(perceptual_loss(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn perceptual_scalar_case() {
        let l = perceptual_loss(&t(&[1, 3], &[0.7, 0.2, 0.1]), &onehot(1, 3, &[0])).unwrap();
        assert!((l - 0.356_674_943_938_732_4).abs() < 1e-12);
    }

    #[test]
    fn perceptual_rejects_unnormalized() {
        let err = perceptual_loss(&t(&[1, 2], &[0.7, 0.7]), &onehot(1, 2, &[0])).unwrap_err();
        assert!(matches!(err, Error::NotNormalized { row: 0, .. }));
    }

    #[test]
    fn perceptual_clamps_log() {
        let l = perceptual_loss(&t(&[1, 2], &[0.0, 1.0]), &onehot(1, 2, &[0])).unwrap();
        assert!((l - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn reconstruction_cases() {
        let a = t(&[2, 4], &[0.1, -0.2, 0.3, 0.0, 0.5, 0.5, -0.5, 0.25]);
        assert_eq!(reconstruction_loss(&a, &a, 0.0, 0.0).unwrap(), 0.0);
        let z = Tensor::<f64>::zeros(&[2, 4]);
        let c = Tensor::full(&[2, 4], 0.3);
        assert!((reconstruction_loss(&z, &c, 0.0, 0.0).unwrap() - 0.045).abs() < 1e-15);
        assert!((reconstruction_loss(&z, &c, 10.0, 5e-4).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn representation_identity_orthogonal_antipodal() {
        let a = t(&[1, 3], &[1.0, 2.0, -1.0]);
        let neg = t(&[1, 3], &[-1.0, -2.0, 1.0]);
        let orth = t(&[1, 3], &[2.0, -1.0, 0.0]);
        assert!(representation_loss(&a, &a).unwrap().abs() < 1e-12);
        assert!((representation_loss(&a, &orth).unwrap() - 1.0).abs() < 1e-12);
        assert!((representation_loss(&a, &neg).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn representation_zero_norm_names_sample() {
        let a = t(&[2, 2], &[1.0, 0.0, 1.0, 1.0]);
        let b = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(representation_loss(&a, &b), Err(Error::ZeroNorm { index: 1 })));
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0f64), 0.0);
        assert_eq!(smooth_l1(1.0f64), 0.5);
        assert_eq!(smooth_l1(-2.0f64), 1.5);
        let eps = 1e-4;
        assert!((smooth_l1(1.0 + eps) - 0.5f64).abs() <= 1.1 * eps);
        assert!((smooth_l1(1.0 - eps) - 0.5f64).abs() <= 1.1 * eps);
        assert!((smooth_l1_grad(1.0 - 1e-9f64) - 1.0).abs() < 1e-8);
        assert_eq!(smooth_l1_grad(1.0 + 1e-9f64), 1.0);
    }

    #[test]
    fn generation_cases() {
        let a = t(&[2, 3], &[0.1, 0.2, 0.3, -0.1, 0.0, 0.9]);
        assert_eq!(generation_loss(&a, &a).unwrap(), 0.0);
        let shifted = Tensor::from_fn(&[2, 3], |i| a.data()[i] + 0.5);
        assert!((generation_loss(&a, &shifted).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn joint_loss_combination() {
        let w = LossWeights::default();
        assert_eq!((w.eta1, w.eta2, w.eta3, w.eta4), (0.5, 1.0, 1.0, 0.8));
        assert_eq!(joint_loss(LossComponents::default(), 0.0, &w), 0.0);
        let c = LossComponents {
            perceptual: 2.0,
            representation: 1.0,
            generation: 4.0,
        };
        assert!((joint_loss(c, 10.0, &w) - 14.0).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            eta2: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
