//! Adversarial, masked-R1 and perceptual losses.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// `mean(softplus(fake)) + mean(softplus(-real))`.
pub fn d_loss<T: Scalar>(real_logits: &Var<T>, fake_logits: &Var<T>) -> Result<Var<T>> {
    fake_logits.softplus().mean()?.add(&real_logits.neg().softplus().mean()?)
}

/// `mean(softplus(-fake))`.
pub fn g_loss<T: Scalar>(fake_logits: &Var<T>) -> Result<Var<T>> {
    fake_logits.neg().softplus().mean()
}

/// Non-saturating logistic losses `(d_loss, g_loss)`.
pub fn adversarial_losses<T: Scalar>(real_logits: &Var<T>, fake_logits: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    Ok((d_loss(real_logits, fake_logits)?, g_loss(fake_logits)?))
}

/// Masked R1: `gamma / 2 * sum((m * grad_x D(x))^2) / B`.
///
/// `discriminator` maps an image variable to logits. The image is placed on
/// the tape of `mask` as a fresh leaf and the input gradient is taken with
/// the backward pass recorded, so the penalty is differentiable with
/// respect to whatever parameters `discriminator` has bound on that tape.
pub fn masked_r1<T: Scalar>(
    discriminator: impl FnOnce(&Var<T>) -> Result<Var<T>>,
    real: &Tensor<T>,
    mask: &Var<T>,
    gamma: f64,
) -> Result<Var<T>> {
    let tape = mask.tape();
    let x = tape.leaf(real.clone());
    let logits = discriminator(&x)?;
    masked_r1_from_logits(&x, &logits, mask, gamma)
}

/// Masked R1 from logits already computed on the leaf `x`.
pub fn masked_r1_from_logits<T: Scalar>(x: &Var<T>, logits: &Var<T>, mask: &Var<T>, gamma: f64) -> Result<Var<T>> {
    if !x.is_tracked() {
        return Err(Error::GraphNotRetained);
    }
    let batch = x.shape().first().copied().unwrap_or(1).max(1);
    let grad = x.tape().grad(&logits.sum()?, &[x], true)?.remove(0);
    let masked = grad.mul(mask)?;
    Ok(masked.square()?.sum()?.mul_scalar(gamma / 2.0 / batch as f64))
}

/// A frozen feature network for the perceptual loss.
pub trait FeatureExtractor<T: Scalar> {
    fn features(&self, x: &Var<T>) -> Result<Vec<Var<T>>>;
}

/// Returns the input itself as its only feature.
pub struct IdentityExtractor;

impl<T: Scalar> FeatureExtractor<T> for IdentityExtractor {
    fn features(&self, x: &Var<T>) -> Result<Vec<Var<T>>> {
        Ok(vec![x.clone()])
    }
}

/// A fixed random conv net: 3x3 stride-2 convs with leaky-ReLU, every
/// activation returned as a feature.
pub struct RandomConvExtractor<T> {
    kernels: Vec<Tensor<T>>,
}

impl<T: Scalar> RandomConvExtractor<T> {
    pub fn new(widths: &[usize], rng: &mut crate::Prng) -> Self {
        let mut cin = 3;
        let kernels = widths
            .iter()
            .map(|&w| {
                let k = Tensor::randn(&[w, cin, 3, 3], (2.0 / (9 * cin) as f64).sqrt(), rng);
                cin = w;
                k
            })
            .collect();
        RandomConvExtractor { kernels }
    }
}

impl<T: Scalar> FeatureExtractor<T> for RandomConvExtractor<T> {
    fn features(&self, x: &Var<T>) -> Result<Vec<Var<T>>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.kernels.len());
        for k in &self.kernels {
            h = h.conv2d(&x.tape().constant(k.clone()), 2, 1)?.leaky_relu(0.2);
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// `sum_l weights[l] * mean((phi_l(pred) - phi_l(target))^2)`.
pub fn perceptual_loss<T: Scalar>(
    pred: &Var<T>,
    target: &Var<T>,
    extractor: &dyn FeatureExtractor<T>,
    weights: &[f64],
) -> Result<Var<T>> {
    let fp = extractor.features(pred)?;
    let ft = extractor.features(target)?;
    if weights.len() != fp.len() {
        return Err(Error::InvalidArgument(format!(
            "{} perceptual weights for {} feature layers",
            weights.len(),
            fp.len()
        )));
    }
    let mut total = pred.tape().constant(Tensor::scalar(T::zero()));
    for ((a, b), &w) in fp.iter().zip(&ft).zip(weights) {
        if w != 0.0 {
            total = total.add(&a.sub(b)?.square()?.mean()?.mul_scalar(w))?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Prng, Tape};

    #[test]
    fn zero_logits() {
        let tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(&[4, 1]));
        let (d, g) = adversarial_losses(&z, &z).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((d.item().unwrap() - 2.0 * ln2).abs() < 1e-15);
        assert!((g.item().unwrap() - ln2).abs() < 1e-15);
    }

    #[test]
    fn saturation_limit() {
        let tape = Tape::<f64>::new();
        let real = tape.constant(Tensor::full(&[2, 1], 60.0));
        let fake = tape.constant(Tensor::full(&[2, 1], -60.0));
        assert!(d_loss(&real, &fake).unwrap().item().unwrap() < 1e-20);
    }

    #[test]
    fn g_loss_slope_at_zero() {
        let tape = Tape::<f64>::new();
        let f = tape.leaf(Tensor::zeros(&[1]));
        let g = tape.grad(&g_loss(&f).unwrap(), &[&f], false).unwrap();
        assert!((g[0].item().unwrap() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn quadratic_discriminator_penalty() {
        // D(x) = 0.5 |x|^2 -> grad = x, penalty = gamma/2 |m x|^2 / B
        let tape = Tape::<f64>::new();
        let mut rng = Prng::new(1);
        let real = Tensor::randn(&[1, 1, 2, 2], 1.0, &mut rng);
        let m = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap());
        let p = masked_r1(|x| x.square()?.sum()?.mul_scalar(0.5).reshape(&[1, 1]), &real, &m, 2.0).unwrap();
        let d = real.data();
        assert!((p.item().unwrap() - (d[0] * d[0] + d[2] * d[2])).abs() < 1e-14);
    }

    #[test]
    fn untracked_logits_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let m = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        assert!(matches!(masked_r1_from_logits(&x, &x, &m, 1.0), Err(Error::GraphNotRetained)));
    }

    #[test]
    fn perceptual_identity_is_mse() {
        let tape = Tape::<f64>::new();
        let mut rng = Prng::new(2);
        let a = tape.constant(Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng));
        let b = tape.constant(Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng));
        let l = perceptual_loss(&a, &b, &IdentityExtractor, &[1.0]).unwrap().item().unwrap();
        let mse = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / 48.0;
        assert!((l - mse).abs() < 1e-14);
        assert_eq!(perceptual_loss(&a, &a, &IdentityExtractor, &[1.0]).unwrap().item().unwrap(), 0.0);
        assert_eq!(perceptual_loss(&a, &b, &IdentityExtractor, &[0.0]).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn random_extractor_is_frozen_and_deterministic() {
        let ex = RandomConvExtractor::<f64>::new(&[4, 8], &mut Prng::new(3));
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[1, 3, 8, 8], 1.0, &mut Prng::new(4)));
        let f1 = ex.features(&x).unwrap();
        let f2 = ex.features(&x).unwrap();
        assert_eq!(f1[1].shape(), [1, 8, 2, 2]);
        assert_eq!(f1[1].value(), f2[1].value());
    }
}
