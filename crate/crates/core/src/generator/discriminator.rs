use crate::error::{Error, Result};
use crate::layers::{Conv, Linear, LRELU_GAIN};
use crate::params::{Bound, ParamSet};
use crate::tensor::{concat, Prng, Scalar, Var};

use super::GeneratorConfig;

const SLOPE: f64 = 0.2;

/// Conditional discriminator over `[image, mask]`: a 3x3 stem, one stride-2
/// 3x3 conv per scale (leaky-ReLU after each), then a linear logit.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub resolution: usize,
    pub convs: Vec<Conv>,
    pub out: Linear,
}

impl Discriminator {
    pub fn new(config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let w = &config.widths;
        let mut convs = vec![Conv::new("disc.stem", 4, w[0], 3)];
        for i in 1..w.len() {
            convs.push(Conv::new(format!("disc.conv{i}"), w[i - 1], w[i], 3).stride(2));
        }
        let side = config.resolution >> config.num_scales();
        let out = Linear::new("disc.out", w[w.len() - 1] * side * side, 1);
        Ok(Discriminator {
            resolution: config.resolution,
            convs,
            out,
        })
    }

    pub fn init<T: Scalar>(&self, rng: &mut Prng) -> ParamSet<T> {
        let mut params = ParamSet::new();
        for c in &self.convs {
            c.init(&mut params, rng, LRELU_GAIN);
        }
        self.out.init(&mut params, rng, 1.0, 0.0);
        params
    }

    /// Logits `[B, 1]` for `image [B, 3, H, W]` and `mask [B, 1, H, W]`.
    pub fn forward<T: Scalar>(&self, p: &Bound<T>, image: &Var<T>, mask: &Var<T>) -> Result<Var<T>> {
        let [_, _, h, w] = image.value().dims4("discriminate")?;
        if h != self.resolution || w != self.resolution {
            return Err(Error::shape(
                "discriminate",
                format!("discriminator is configured for {0}x{0}, got {h}x{w}", self.resolution),
            ));
        }
        let mut x = concat(&[image, mask], 1)?;
        for c in &self.convs {
            x = c.forward(p, &x)?.leaky_relu(SLOPE);
        }
        self.out.forward(p, &x.flatten2()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn config() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 16,
            widths: vec![3, 4, 5],
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn one_logit_per_sample_and_batch_equivariant() {
        let d = Discriminator::new(&config()).unwrap();
        let mut rng = Prng::new(1);
        let params = d.init::<f64>(&mut rng);
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let img = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut rng);
        let mask = Tensor::<f64>::zeros(&[2, 1, 16, 16]);
        let logits = d.forward(&p, &tape.constant(img.clone()), &tape.constant(mask.clone())).unwrap();
        assert_eq!(logits.shape(), [2, 1]);

        let half = 3 * 16 * 16;
        let mut swapped = img.data()[half..].to_vec();
        swapped.extend_from_slice(&img.data()[..half]);
        let img2 = Tensor::new(&[2, 3, 16, 16], swapped).unwrap();
        let l2 = d.forward(&p, &tape.constant(img2), &tape.constant(mask)).unwrap();
        assert_eq!(l2.value().data()[0], logits.value().data()[1]);
        assert_eq!(l2.value().data()[1], logits.value().data()[0]);
    }

    #[test]
    fn image_gradient_is_finite() {
        let d = Discriminator::new(&config()).unwrap();
        let mut rng = Prng::new(2);
        let params = d.init::<f64>(&mut rng);
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let x = tape.leaf(Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng));
        let m = tape.constant(Tensor::ones(&[1, 1, 16, 16]));
        let out = d.forward(&p, &x, &m).unwrap().sum().unwrap();
        let g = tape.grad(&out, &[&x], false).unwrap();
        assert!(g[0].value().is_finite());
        assert!(g[0].value().data().iter().any(|&v| v != 0.0));
    }
}
