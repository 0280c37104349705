//! The inpainting generator: FFC encoder, mapping network, cascaded
//! GB/SB decoder and image head; plus the conditional discriminator and
//! feature visualisation.

mod discriminator;
mod features;

pub use discriminator::Discriminator;
pub use features::{feature_magnitude, normalize_to_u8, FeatureScale};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffc::{Encoder, EncoderConfig, EncoderFeatures};
use crate::layers::{Conv, Linear, LRELU_GAIN};
use crate::modulation::{sample_noise, CascadeStage, CascadeStageIo};
use crate::params::{Bound, ParamSet};
use crate::tensor::{concat, Prng, Scalar, Tape, Var};

/// Floor inside the noise normalisation `z / sqrt(mean(z^2) + eps)`.
pub const Z_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub resolution: usize,
    /// Channel width per scale, finest first; `widths.len() - 1` scales.
    pub widths: Vec<usize>,
    pub style_dim: usize,
    pub w_dim: usize,
    pub z_dim: usize,
    pub mapping_depth: usize,
    pub global_ratio: f64,
    /// Inject broadcast noise in the spatial blocks.
    pub noise: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            resolution: 64,
            widths: vec![64, 128, 256, 256, 256],
            style_dim: 128,
            w_dim: 128,
            z_dim: 128,
            mapping_depth: 8,
            global_ratio: 0.5,
            noise: true,
        }
    }
}

impl GeneratorConfig {
    /// Number of scales L.
    pub fn num_scales(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn g_dim(&self) -> usize {
        self.style_dim + self.w_dim
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            resolution: self.resolution,
            in_channels: 4,
            widths: self.widths.clone(),
            global_ratio: self.global_ratio,
            style_dim: self.style_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        if self.style_dim == 0 || self.w_dim == 0 || self.z_dim == 0 {
            return Err(Error::Config("style_dim, w_dim and z_dim must be positive".into()));
        }
        if self.mapping_depth == 0 && self.w_dim != self.z_dim {
            return Err(Error::Config("a zero-depth mapping needs w_dim == z_dim".into()));
        }
        Ok(())
    }
}

/// MLP mapping `z -> w` on the second-moment normalised noise.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    pub layers: Vec<Linear>,
}

impl MappingNetwork {
    pub fn new(name: &str, z_dim: usize, w_dim: usize, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|i| Linear::new(format!("{name}.fc{i}"), if i == 0 { z_dim } else { w_dim }, w_dim))
            .collect();
        MappingNetwork { layers }
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut Prng) {
        for l in &self.layers {
            l.init(params, rng, LRELU_GAIN, 0.0);
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, z: &Var<T>) -> Result<Var<T>> {
        let ms = z.square()?.mean_axes(&[1])?.add_scalar(Z_NORM_EPS).pow_scalar(-0.5);
        let mut w = z.mul(&ms)?;
        for l in &self.layers {
            w = l.forward(p, &w)?.leaky_relu(0.2);
        }
        Ok(w)
    }
}

/// Everything one generator pass produces.
pub struct GeneratorOutput<T> {
    /// Head output before compositing, in `[-1, 1]`.
    pub raw: Var<T>,
    /// `raw * m + x * (1 - m)`.
    pub composite: Var<T>,
    pub encoder: EncoderFeatures<T>,
    /// Global code `g = [s; w]`.
    pub g: Var<T>,
    /// Decoder features after each stage, coarse to fine.
    pub stages: Vec<CascadeStageIo<T>>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub encoder: Encoder,
    pub mapping: MappingNetwork,
    /// `fusions[j]` merges the encoder skip into F_g before stage `j + 1`.
    pub fusions: Vec<Conv>,
    pub stages: Vec<CascadeStage>,
    pub head: Conv,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let l = config.num_scales();
        let w = &config.widths;
        let encoder = Encoder::new("enc", config.encoder_config())?;
        let mapping = MappingNetwork::new("map", config.z_dim, config.w_dim, config.mapping_depth);
        let mut stages = Vec::with_capacity(l);
        let mut fusions = Vec::with_capacity(l - 1);
        for j in 0..l {
            // stage j runs from scale l - j to scale l - j - 1
            let (cin, cout) = (w[l - j], w[l - j - 1]);
            if j > 0 {
                fusions.push(Conv::new(format!("dec.fuse{j}"), 2 * cin, cin, 1));
            }
            stages.push(CascadeStage::new(&format!("dec.stage{j}"), cin, cout, config.g_dim()));
        }
        let head = Conv::new("head", w[0], 3, 1);
        Ok(Generator {
            config,
            encoder,
            mapping,
            fusions,
            stages,
            head,
        })
    }

    pub fn init<T: Scalar>(&self, rng: &mut Prng) -> ParamSet<T> {
        let mut params = ParamSet::new();
        self.encoder.init(&mut params, &mut rng.substream("encoder"));
        self.mapping.init(&mut params, &mut rng.substream("mapping"));
        let mut dec = rng.substream("decoder");
        for f in &self.fusions {
            f.init(&mut params, &mut dec, 1.0);
        }
        for s in &self.stages {
            s.init(&mut params, &mut dec);
        }
        self.head.init(&mut params, &mut rng.substream("head"), 1.0);
        params
    }

    /// Standard normal noise vectors `[batch, z_dim]`.
    pub fn sample_z<T: Scalar>(&self, batch: usize, rng: &mut Prng) -> crate::Tensor<T> {
        crate::Tensor::randn(&[batch, self.config.z_dim], 1.0, rng)
    }

    /// Runs the generator. `image` is `[B, 3, H, W]` in `[-1, 1]`, `mask` is
    /// `[B, 1, H, W]` with 1 in the hole, `z` is `[B, z_dim]`. Broadcast noise
    /// is drawn from `noise_rng` when the config enables it and a stream is given.
    pub fn forward<T: Scalar>(
        &self,
        p: &Bound<T>,
        image: &Var<T>,
        mask: &Var<T>,
        z: &Var<T>,
        mut noise_rng: Option<&mut Prng>,
    ) -> Result<GeneratorOutput<T>> {
        let [b, _, h, w] = image.value().dims4("generate")?;
        if h != self.config.resolution || w != self.config.resolution {
            return Err(Error::shape(
                "generate",
                format!("generator is configured for {0}x{0}, got {h}x{w}", self.config.resolution),
            ));
        }
        if z.shape() != [b, self.config.z_dim] {
            return Err(Error::shape(
                "generate",
                format!("z must be [{b}, {}], got {:?}", self.config.z_dim, z.shape()),
            ));
        }
        let encoder = self.encoder.encode(p, image, mask)?;
        let wcode = self.mapping.forward(p, z)?;
        let g = concat(&[&encoder.style, &wcode], 1)?;

        let l = self.config.num_scales();
        let seed = encoder.features[l - 1].clone();
        let (mut f_g, mut f_s) = (seed.clone(), seed);
        let mut stages = Vec::with_capacity(l);
        for (j, stage) in self.stages.iter().enumerate() {
            if j > 0 {
                let skip = &encoder.features[l - 1 - j];
                f_g = self.fusions[j - 1].forward(p, &concat(&[&f_g, skip], 1)?)?;
            }
            let noise = match (self.config.noise, noise_rng.as_deref_mut()) {
                (true, Some(rng)) => {
                    let side = h >> (l - 1 - j);
                    Some(image.tape().constant(sample_noise(b, side, side, rng)))
                }
                _ => None,
            };
            let io = stage.forward(p, &f_g, &f_s, &g, noise.as_ref())?;
            f_g = io.f_g.clone();
            f_s = io.f_s.clone();
            stages.push(io);
        }
        let raw = self.head.forward(p, &f_s)?.tanh();
        let known = mask.neg().add_scalar(1.0);
        let composite = raw.mul(mask)?.add(&image.mul(&known)?)?;
        Ok(GeneratorOutput {
            raw,
            composite,
            encoder,
            g,
            stages,
        })
    }

    /// Convenience forward with constant parameters and no recording.
    pub fn inpaint<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        image: &crate::Tensor<T>,
        mask: &crate::Tensor<T>,
        z: &crate::Tensor<T>,
        noise_rng: Option<&mut Prng>,
    ) -> Result<crate::Tensor<T>> {
        let tape = Tape::new();
        tape.no_grad(|| {
            let p = params.bind(&tape, false);
            let out = self.forward(
                &p,
                &tape.constant(image.clone()),
                &tape.constant(mask.clone()),
                &tape.constant(z.clone()),
                noise_rng,
            )?;
            Ok(out.composite.value().clone())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    pub(crate) fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 16,
            widths: vec![4, 4, 6],
            style_dim: 4,
            w_dim: 4,
            z_dim: 4,
            mapping_depth: 2,
            global_ratio: 0.5,
            noise: true,
        }
    }

    #[test]
    fn default_config_is_valid() {
        let g = Generator::new(GeneratorConfig::default()).unwrap();
        assert_eq!(g.stages.len(), 4);
        assert_eq!(g.fusions.len(), 3);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny_config();
        c.widths = vec![4];
        assert!(Generator::new(c).is_err());
        let mut c = tiny_config();
        c.resolution = 24;
        assert!(Generator::new(c).is_err());
        let mut c = tiny_config();
        c.mapping_depth = 0;
        c.w_dim = 3;
        assert!(Generator::new(c).is_err());
    }

    #[test]
    fn zero_mask_returns_input_exactly() {
        let gen = Generator::new(tiny_config()).unwrap();
        let mut rng = Prng::new(1);
        let params = gen.init::<f64>(&mut rng);
        let img = Tensor::rand_uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng);
        let mask = Tensor::zeros(&[2, 1, 16, 16]);
        let z = gen.sample_z(2, &mut rng);
        let out = gen.inpaint(&params, &img, &mask, &z, Some(&mut rng)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn output_shapes_and_range() {
        let gen = Generator::new(tiny_config()).unwrap();
        let mut rng = Prng::new(2);
        let params = gen.init::<f64>(&mut rng);
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let img = tape.constant(Tensor::rand_uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng));
        let mask = tape.constant(Tensor::ones(&[1, 1, 16, 16]));
        let z = tape.constant(gen.sample_z(1, &mut rng));
        let out = gen.forward(&p, &img, &mask, &z, None).unwrap();
        assert_eq!(out.raw.shape(), [1, 3, 16, 16]);
        assert_eq!(out.g.shape(), [1, 8]);
        let sides: Vec<usize> = out.stages.iter().map(|s| s.f_s.shape()[2]).collect();
        assert_eq!(sides, vec![8, 16]);
        assert!(out.raw.value().data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn zero_depth_mapping_normalizes() {
        let m = MappingNetwork::new("m", 3, 3, 0);
        let params = ParamSet::<f64>::new();
        let tape = Tape::new();
        let z = tape.constant(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 2.0]).unwrap());
        let w = m.forward(&params.bind(&tape, false), &z).unwrap();
        // mean(z^2) = 3
        let scale = 1.0 / (3.0 + Z_NORM_EPS).sqrt();
        for (a, b) in w.value().data().iter().zip([1.0, 2.0, 2.0]) {
            assert!((a - b * scale).abs() < 1e-15);
        }
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let gen = Generator::new(tiny_config()).unwrap();
        let mut rng = Prng::new(3);
        let params = gen.init::<f64>(&mut rng);
        let img = Tensor::zeros(&[1, 3, 32, 32]);
        let mask = Tensor::zeros(&[1, 1, 32, 32]);
        let z = gen.sample_z(1, &mut rng);
        assert!(gen.inpaint(&params, &img, &mask, &z, None).is_err());
    }
}
