//! `cmgan inpaint` and `cmgan dump-features`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cmgan::generator::{FeatureScale, Generator};
use cmgan::imageio::{
    load_checkpoint, load_generator_config, load_mask, load_rgb, rgb_to_tensor, save_gray8, save_rgb, tensor_to_rgb,
};
use cmgan::maskgen::Mask;
use cmgan::params::ParamSet;
use cmgan::{Prng, Tensor};
use serde::Serialize;

pub struct InferArgs {
    pub ckpt: PathBuf,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
}

/// A generator and its parameters read from a training checkpoint.
pub struct Model {
    pub generator: Generator,
    pub params: ParamSet<f32>,
}

impl Model {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let generator = Generator::new(load_generator_config(&ck)?)?;
        let stored = ck.with_prefix_stripped("gen.");
        let mut params = ParamSet::new();
        for (name, like) in generator.init::<f32>(&mut Prng::new(0)).iter() {
            let t = stored.get(name).with_context(|| format!("{} is not a generator checkpoint", path.display()))?;
            if t.shape() != like.shape() {
                anyhow::bail!(cmgan::Error::Checkpoint(format!(
                    "gen.{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            params.insert(name.clone(), t.clone());
        }
        Ok(Model { generator, params })
    }

    /// Image and mask tensors, checked against the configured resolution.
    fn inputs(&self, image: &Path, mask: &Path) -> Result<(Tensor<f32>, Tensor<f32>, Mask)> {
        let r = self.generator.config.resolution;
        let rgb = load_rgb(image)?;
        let m = load_mask(mask)?;
        for (path, w, h) in [(image, rgb.width, rgb.height), (mask, m.width(), m.height())] {
            if w != r || h != r {
                anyhow::bail!(cmgan::Error::Config(format!(
                    "{} is {w}x{h} but the checkpoint was trained at {r}x{r}",
                    path.display()
                )));
            }
        }
        Ok((rgb_to_tensor(&rgb), m.to_tensor(), m))
    }
}

/// Latent and noise streams for a seed; shared by both commands.
fn streams(generator: &Generator, seed: u64) -> (Tensor<f32>, Prng) {
    let root = Prng::new(seed);
    (generator.sample_z(1, &mut root.substream("z")), root.substream("noise"))
}

pub fn inpaint(args: &InferArgs) -> Result<()> {
    let model = Model::load(&args.ckpt)?;
    let (image, mask, _) = model.inputs(&args.image, &args.mask)?;
    let (z, mut noise) = streams(&model.generator, args.seed);
    let out = model.generator.inpaint(&model.params, &image, &mask, &z, Some(&mut noise))?;
    if !out.is_finite() {
        anyhow::bail!(cmgan::Error::NonFinite {
            what: "inpainted image".into(),
            step: 0,
        });
    }
    save_rgb(&args.out, &tensor_to_rgb(&out, 0)?)?;
    Ok(())
}

/// Mean magnitude inside and outside the hole.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionMeans {
    pub hole: Option<f64>,
    pub visible: Option<f64>,
    /// `|hole - visible| / visible`.
    pub relative_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleReport {
    pub scale: usize,
    pub width: usize,
    pub height: usize,
    /// Feature pixels whose whole footprint lies in the hole; mixed pixels are skipped.
    pub hole_pixels: usize,
    pub visible_pixels: usize,
    pub encoder: RegionMeans,
    pub global: RegionMeans,
    pub spatial: RegionMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeatureReport {
    pub seed: u64,
    pub scales: Vec<ScaleReport>,
}

/// Per feature pixel at `scale`: `Some(true)` fully in the hole, `Some(false)`
/// fully visible, `None` when its footprint straddles the boundary.
pub fn classify(mask: &Mask, scale: usize) -> Vec<Option<bool>> {
    let f = 1 << scale;
    let (w, h) = (mask.width() / f, mask.height() / f);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let set = (0..f * f).filter(|&i| mask.get(x * f + i % f, y * f + i / f)).count();
            out.push(match set {
                0 => Some(false),
                s if s == f * f => Some(true),
                _ => None,
            });
        }
    }
    out
}

pub fn region_means(values: &[f64], classes: &[Option<bool>]) -> RegionMeans {
    let mean = |want: bool| {
        let v: Vec<f64> = values
            .iter()
            .zip(classes)
            .filter(|(_, c)| **c == Some(want))
            .map(|(v, _)| *v)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let (hole, visible) = (mean(true), mean(false));
    let relative_gap = match (hole, visible) {
        (Some(h), Some(v)) if v > 0.0 => Some((h - v).abs() / v),
        _ => None,
    };
    RegionMeans {
        hole,
        visible,
        relative_gap,
    }
}

fn scale_report(f: &FeatureScale, mask: &Mask) -> ScaleReport {
    let classes = classify(mask, f.scale);
    ScaleReport {
        scale: f.scale,
        width: f.width,
        height: f.height,
        hole_pixels: classes.iter().filter(|c| **c == Some(true)).count(),
        visible_pixels: classes.iter().filter(|c| **c == Some(false)).count(),
        encoder: region_means(&f.encoder, &classes),
        global: region_means(&f.global, &classes),
        spatial: region_means(&f.spatial, &classes),
    }
}

/// Writes `scale{s}_{encoder,global,spatial}.png` per scale and `features.json`.
pub fn dump_features(args: &InferArgs) -> Result<FeatureReport> {
    let model = Model::load(&args.ckpt)?;
    let (image, mask, m) = model.inputs(&args.image, &args.mask)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut scales = Vec::new();
    for scale in model.generator.feature_scales() {
        let (z, mut noise) = streams(&model.generator, args.seed);
        let f = model
            .generator
            .dump_features(&model.params, &image, &mask, &z, scale, Some(&mut noise))?;
        for (branch, img) in f.images() {
            save_gray8(&args.out.join(format!("scale{scale}_{branch}.png")), &img)?;
        }
        scales.push(scale_report(&f, &m));
    }
    let report = FeatureReport { seed: args.seed, scales };
    fs::write(args.out.join("features.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_pure_and_mixed_blocks() {
        let mut m = Mask::new(4, 4);
        for y in 0..2 {
            for x in 0..2 {
                m.set(x, y, true);
            }
        }
        m.set(2, 2, true);
        assert_eq!(classify(&m, 1), vec![Some(true), Some(false), Some(false), None]);
        assert_eq!(classify(&m, 0)[0], Some(true));
    }

    #[test]
    fn gap_relative_to_visible() {
        let r = region_means(&[3.0, 1.0, 2.0, 9.0], &[Some(true), Some(false), Some(false), None]);
        assert_eq!(r.hole, Some(3.0));
        assert_eq!(r.visible, Some(1.5));
        assert_eq!(r.relative_gap, Some(1.0));
        let none = region_means(&[1.0], &[Some(false)]);
        assert_eq!(none.hole, None);
        assert_eq!(none.relative_gap, None);
    }
}
