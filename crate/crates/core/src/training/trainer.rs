//! Alternating discriminator/generator training with lazy masked R1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Discriminator, Generator, GeneratorConfig};
use crate::imageio::{batch_tensor, load_generator_config, store_generator_config, Dataset};
use crate::maskgen::{sample_object_aware_mask, MaskConfig, SilhouetteLibrary};
use crate::params::ParamSet;
use crate::tensor::{concat, Prng, Scalar, Tape, Tensor};

use super::adam::{AdamConfig, AdamState};
use super::losses::{d_loss, g_loss, masked_r1_from_logits, perceptual_loss, FeatureExtractor, RandomConvExtractor};

pub const CSV_HEADER: &str = "step,d_loss,g_loss,r1_penalty,perc_loss";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    None,
    RandomConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Masked-R1 weight.
    pub gamma: f64,
    /// The penalty runs every `r1_interval` discriminator steps, scaled by the interval.
    pub r1_interval: u64,
    pub perceptual_weight: f64,
    pub extractor: ExtractorKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 10.0,
            r1_interval: 16,
            perceptual_weight: 0.0,
            extractor: ExtractorKind::None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || self.r1_interval == 0 || !(self.perceptual_weight >= 0.0) {
            return Err(Error::Config("need gamma >= 0, r1_interval >= 1, perceptual_weight >= 0".into()));
        }
        if self.perceptual_weight > 0.0 && self.extractor == ExtractorKind::None {
            return Err(Error::Config("perceptual_weight > 0 needs an extractor".into()));
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Most recently computed penalty (unscaled by the interval).
    pub r1_penalty: f64,
    pub perc_loss: f64,
}

impl StepMetrics {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.d_loss, self.g_loss, self.r1_penalty, self.perc_loss
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.d_loss, self.g_loss, self.r1_penalty, self.perc_loss]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// A training batch with its masks.
pub struct Batch<T> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

pub struct Trainer<T: Scalar> {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub gen_params: ParamSet<T>,
    pub disc_params: ParamSet<T>,
    pub g_opt: AdamState<T>,
    pub d_opt: AdamState<T>,
    pub loss: LossConfig,
    pub masks: MaskConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Number of completed steps.
    pub step: u64,
    pub last_r1: f64,
    dataset: Dataset,
    library: SilhouetteLibrary,
    extractor: Option<Box<dyn FeatureExtractor<T>>>,
}

fn finite_or<T: Scalar>(v: T, what: &str, step: u64) -> Result<f64> {
    let v = v.as_f64();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            step: step as usize,
        })
    }
}

fn all_finite<T: Scalar>(p: &ParamSet<T>, what: &str, step: u64) -> Result<()> {
    match p.iter().find(|(_, t)| !t.is_finite()) {
        None => Ok(()),
        Some((name, _)) => Err(Error::NonFinite {
            what: format!("{what} {name}"),
            step: step as usize,
        }),
    }
}

impl<T: Scalar> Trainer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: GeneratorConfig,
        masks: MaskConfig,
        loss: LossConfig,
        adam: AdamConfig,
        batch_size: usize,
        dataset: Dataset,
        library: SilhouetteLibrary,
        seed: u64,
    ) -> Result<Self> {
        masks.validate()?;
        loss.validate()?;
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if dataset.spec().resolution != config.resolution {
            return Err(Error::Config(format!(
                "dataset resolution {} differs from generator resolution {}",
                dataset.spec().resolution,
                config.resolution
            )));
        }
        let root = Prng::new(seed);
        let generator = Generator::new(config.clone())?;
        let discriminator = Discriminator::new(&config)?;
        let gen_params = generator.init(&mut root.substream("gen_init"));
        let disc_params = discriminator.init(&mut root.substream("disc_init"));
        let extractor: Option<Box<dyn FeatureExtractor<T>>> = match loss.extractor {
            ExtractorKind::None => None,
            ExtractorKind::RandomConv => Some(Box::new(RandomConvExtractor::new(
                &[16, 32, 64],
                &mut root.substream("extractor"),
            ))),
        };
        Ok(Trainer {
            g_opt: AdamState::new(adam, &gen_params),
            d_opt: AdamState::new(adam, &disc_params),
            generator,
            discriminator,
            gen_params,
            disc_params,
            loss,
            masks,
            batch_size,
            seed,
            step: 0,
            last_r1: 0.0,
            dataset,
            library,
            extractor,
        })
    }

    fn root(&self) -> Prng {
        Prng::new(self.seed)
    }

    /// Images and object-aware masks for `step`; a pure function of the seed.
    pub fn batch(&self, step: u64) -> Result<Batch<T>> {
        let root = self.root();
        let mut images = Vec::with_capacity(self.batch_size);
        let mut masks = Vec::with_capacity(self.batch_size);
        for i in 0..self.batch_size as u64 {
            let index = step * self.batch_size as u64 + i;
            let sample = self.dataset.sample(index)?;
            let mut rng = root.substream_indexed("mask", index);
            let m = sample_object_aware_mask(&sample.instances, &mut rng, &self.masks, &self.library)?;
            masks.extend(m.mask.to_tensor::<T>().into_data());
            images.push(sample.image);
        }
        let r = self.generator.config.resolution;
        Ok(Batch {
            image: batch_tensor(&images.iter().collect::<Vec<_>>())?,
            mask: Tensor::new(&[self.batch_size, 1, r, r], masks)?,
        })
    }

    /// One discriminator step followed by one generator step.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let root = self.root();
        let batch = self.batch(step)?;
        let b = self.batch_size;

        // discriminator
        let tape = Tape::new();
        let fake = tape.no_grad(|| -> Result<Tensor<T>> {
            let gp = self.gen_params.bind(&tape, false);
            let z = tape.constant(self.generator.sample_z(b, &mut root.substream_indexed("z_d", step)));
            let out = self.generator.forward(
                &gp,
                &tape.constant(batch.image.clone()),
                &tape.constant(batch.mask.clone()),
                &z,
                Some(&mut root.substream_indexed("noise_d", step)),
            )?;
            Ok(out.composite.value().clone())
        })?;
        let dp = self.disc_params.bind(&tape, true);
        let mask = tape.constant(batch.mask.clone());
        let r1_step = self.loss.gamma > 0.0 && step % self.loss.r1_interval == 0;
        let real = if r1_step {
            tape.leaf(batch.image.clone())
        } else {
            tape.constant(batch.image.clone())
        };
        // one pass over [real; fake] keeps both halves on identical weights
        let both = concat(&[&real, &tape.constant(fake)], 0)?;
        let both_mask = concat(&[&mask, &mask], 0)?;
        let logits = self.discriminator.forward(&dp, &both, &both_mask)?;
        let (real_logits, fake_logits) = (logits.narrow(0, 0, b)?, logits.narrow(0, b, b)?);
        let dl = d_loss(&real_logits, &fake_logits)?;
        let d_value = finite_or(dl.item()?, "d_loss", step)?;
        let mut d_total = dl;
        if r1_step {
            let penalty = masked_r1_from_logits(&real, &real_logits, &mask, self.loss.gamma)?;
            self.last_r1 = finite_or(penalty.item()?, "r1_penalty", step)?;
            d_total = d_total.add(&penalty.mul_scalar(self.loss.r1_interval as f64))?;
        }
        let grads = tape.backward(&d_total)?;
        let d_grads = dp.gradients(&grads);
        all_finite(&d_grads, "discriminator gradient", step)?;
        drop(dp);
        drop(tape);

        // generator
        let tape = Tape::new();
        let gp = self.gen_params.bind(&tape, true);
        let dp = self.disc_params.bind(&tape, false);
        let image = tape.constant(batch.image.clone());
        let mask = tape.constant(batch.mask.clone());
        let z = tape.constant(self.generator.sample_z(b, &mut root.substream_indexed("z_g", step)));
        let out = self.generator.forward(
            &gp,
            &image,
            &mask,
            &z,
            Some(&mut root.substream_indexed("noise_g", step)),
        )?;
        let gl = g_loss(&self.discriminator.forward(&dp, &out.composite, &mask)?)?;
        let g_value = finite_or(gl.item()?, "g_loss", step)?;
        let mut g_total = gl;
        let mut perc_value = 0.0;
        if let (Some(ex), true) = (&self.extractor, self.loss.perceptual_weight > 0.0) {
            let weights = vec![1.0; ex.features(&image)?.len()];
            let pl = perceptual_loss(&out.composite, &image, ex.as_ref(), &weights)?;
            perc_value = finite_or(pl.item()?, "perc_loss", step)?;
            g_total = g_total.add(&pl.mul_scalar(self.loss.perceptual_weight))?;
        }
        let grads = tape.backward(&g_total)?;
        let g_grads = gp.gradients(&grads);
        all_finite(&g_grads, "generator gradient", step)?;

        self.d_opt.update(&mut self.disc_params, &d_grads)?;
        self.g_opt.update(&mut self.gen_params, &g_grads)?;
        self.step += 1;
        Ok(StepMetrics {
            step,
            d_loss: d_value,
            g_loss: g_value,
            r1_penalty: self.last_r1,
            perc_loss: perc_value,
        })
    }

    /// Runs `steps` steps, calling `on_step` after each.
    pub fn run(
        &mut self,
        steps: u64,
        mut on_step: impl FnMut(&StepMetrics, &Self) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let m = self.train_step()?;
            on_step(&m, self)?;
            log.push(m);
        }
        Ok(log)
    }

    /// Full training state as 32-bit named tensors.
    pub fn to_checkpoint(&self) -> ParamSet<f32> {
        let mut ck = ParamSet::new();
        store_generator_config(&mut ck, &self.generator.config);
        ck.extend_prefixed("gen.", &self.gen_params.cast());
        ck.extend_prefixed("", &self.disc_params.cast());
        ck.extend_prefixed("opt.g.m.", &self.g_opt.m.cast());
        ck.extend_prefixed("opt.g.v.", &self.g_opt.v.cast());
        ck.extend_prefixed("opt.d.m.", &self.d_opt.m.cast());
        ck.extend_prefixed("opt.d.v.", &self.d_opt.v.cast());
        let scalar = |v: f64| Tensor::new(&[1], vec![v as f32]).expect("one value");
        ck.insert("opt.g.step", scalar(self.g_opt.step as f64));
        ck.insert("opt.d.step", scalar(self.d_opt.step as f64));
        ck.insert("train.step", scalar(self.step as f64));
        ck.insert("train.last_r1", scalar(self.last_r1));
        ck
    }

    /// Restores parameters, optimiser moments and the step counter.
    pub fn restore(&mut self, ck: &ParamSet<f32>) -> Result<()> {
        let config = load_generator_config(ck)?;
        if config != self.generator.config {
            return Err(Error::Config("checkpoint generator config differs from the run config".into()));
        }
        let take = |prefix: &str, like: &ParamSet<T>| -> Result<ParamSet<T>> {
            let got = ck.with_prefix_stripped(prefix).cast::<T>();
            let mut out = ParamSet::new();
            for (name, t) in like.iter() {
                let v = got.get(name)?;
                if v.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("{prefix}{name} has shape {:?}", v.shape())));
                }
                out.insert(name.clone(), v.clone());
            }
            Ok(out)
        };
        let gen = take("gen.", &self.gen_params)?;
        let disc_full = take("", &self.disc_params)?;
        let gm = take("opt.g.m.", &self.gen_params)?;
        let gv = take("opt.g.v.", &self.gen_params)?;
        let dm = take("opt.d.m.", &self.disc_params)?;
        let dv = take("opt.d.v.", &self.disc_params)?;
        let int = |n: &str| -> Result<u64> { Ok(ck.get(n)?.item()? as u64) };
        self.gen_params = gen;
        self.disc_params = disc_full;
        self.g_opt.m = gm;
        self.g_opt.v = gv;
        self.d_opt.m = dm;
        self.d_opt.v = dv;
        self.g_opt.step = int("opt.g.step")?;
        self.d_opt.step = int("opt.d.step")?;
        self.step = int("train.step")?;
        self.last_r1 = ck.get("train.last_r1")?.item()? as f64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::DatasetSpec;

    fn tiny(seed: u64, loss: LossConfig) -> Trainer<f32> {
        let config = GeneratorConfig {
            resolution: 16,
            widths: vec![4, 4, 6],
            style_dim: 4,
            w_dim: 4,
            z_dim: 4,
            mapping_depth: 2,
            global_ratio: 0.5,
            noise: true,
        };
        let dataset = Dataset::new(DatasetSpec {
            resolution: 16,
            max_objects: 2,
            seed,
            ..DatasetSpec::default()
        })
        .unwrap();
        Trainer::new(
            config,
            MaskConfig::default(),
            loss,
            AdamConfig::default(),
            2,
            dataset,
            SilhouetteLibrary::procedural(seed, 4, 8),
            seed,
        )
        .unwrap()
    }

    fn r1_every_step() -> LossConfig {
        LossConfig {
            r1_interval: 1,
            ..LossConfig::default()
        }
    }

    #[test]
    fn steps_are_finite_and_deterministic() {
        let mut a = tiny(3, r1_every_step());
        let mut b = tiny(3, r1_every_step());
        let la = a.run(2, |_, _| Ok(())).unwrap();
        let lb = b.run(2, |_, _| Ok(())).unwrap();
        assert!(la.iter().all(StepMetrics::is_finite));
        assert!(la[0].r1_penalty > 0.0);
        assert_eq!(la, lb);
        assert_eq!(a.gen_params, b.gen_params);
        assert_eq!(a.step, 2);
    }

    #[test]
    fn checkpoint_restore_resumes_identically() {
        let mut a = tiny(5, LossConfig::default());
        a.run(1, |_, _| Ok(())).unwrap();
        let ck = a.to_checkpoint();
        let next_a = a.train_step().unwrap();

        let mut b = tiny(5, LossConfig::default());
        b.restore(&ck).unwrap();
        assert_eq!(b.step, 1);
        let next_b = b.train_step().unwrap();
        assert_eq!(next_a, next_b);
        assert_eq!(a.disc_params, b.disc_params);
    }

    #[test]
    fn perceptual_term_is_reported() {
        let mut t = tiny(
            7,
            LossConfig {
                perceptual_weight: 1.0,
                extractor: ExtractorKind::RandomConv,
                ..LossConfig::default()
            },
        );
        let m = t.train_step().unwrap();
        assert!(m.perc_loss > 0.0);
    }

    #[test]
    fn rejects_perceptual_weight_without_extractor() {
        let loss = LossConfig {
            perceptual_weight: 1.0,
            ..LossConfig::default()
        };
        assert!(loss.validate().is_err());
    }

    #[test]
    fn csv_line_matches_header() {
        let m = StepMetrics {
            step: 4,
            d_loss: 1.5,
            g_loss: 0.25,
            r1_penalty: 0.0,
            perc_loss: 0.0,
        };
        assert_eq!(m.csv_line().split(',').count(), CSV_HEADER.split(',').count());
    }
}
