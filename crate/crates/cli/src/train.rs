//! `cmgan train`: metrics CSV, checkpoints and triptych previews.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cmgan::imageio::{load_checkpoint, save_checkpoint, save_rgb, tensor_to_rgb, Dataset, RgbImage};
use cmgan::training::{Trainer, CSV_HEADER};
use cmgan::Prng;

use crate::config::RunConfig;

pub struct TrainArgs {
    pub config: PathBuf,
    pub steps: Option<u64>,
    pub resume: Option<PathBuf>,
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    let out = config.out_dir.clone();
    fs::create_dir_all(out.join("checkpoints")).with_context(|| format!("creating {}", out.display()))?;
    fs::create_dir_all(out.join("samples")).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&config)? + "\n")?;

    let mut trainer = Trainer::<f32>::new(
        config.generator.clone(),
        config.masks.clone(),
        config.loss.clone(),
        config.adam,
        config.batch_size,
        Dataset::new(config.dataset.clone())?,
        config.silhouette_library()?,
        config.seed,
    )?;
    if let Some(ck) = &args.resume {
        trainer.restore(&load_checkpoint(ck)?)?;
    }

    let metrics_path = out.join("metrics.csv");
    let kept = if args.resume.is_some() {
        previous_rows(&metrics_path, trainer.step)?
    } else {
        Vec::new()
    };
    let mut log = BufWriter::new(
        File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?,
    );
    writeln!(log, "{CSV_HEADER}")?;
    for row in kept {
        writeln!(log, "{row}")?;
    }
    log.flush()?;

    let preview = Preview::new(&trainer, config.seed)?;
    if trainer.step == 0 {
        checkpoint(&trainer, &out)?;
        preview.write(&trainer, &out)?;
    }
    let remaining = config.steps.saturating_sub(trainer.step);
    let every = |period: u64, step: u64| period > 0 && step % period == 0;
    let result = trainer.run(remaining, |m, t| {
        writeln!(log, "{}", m.csv_line()).map_err(|e| cmgan::Error::Io {
            path: metrics_path.clone(),
            source: e,
        })?;
        let done = t.step;
        if every(config.checkpoint_every, done) && done < config.steps {
            log.flush().map_err(|e| cmgan::Error::Io {
                path: metrics_path.clone(),
                source: e,
            })?;
            checkpoint(t, &out).map_err(to_core)?;
        }
        if every(config.sample_every, done) && done < config.steps {
            preview.write(t, &out).map_err(to_core)?;
        }
        if done % 100 == 0 {
            eprintln!(
                "step {done}/{}: d_loss {:.4} g_loss {:.4} r1 {:.4}",
                config.steps, m.d_loss, m.g_loss, m.r1_penalty
            );
        }
        Ok(())
    });
    log.flush()?;
    result?;
    if trainer.step > 0 && remaining > 0 {
        checkpoint(&trainer, &out)?;
        preview.write(&trainer, &out)?;
    }
    eprintln!("finished at step {}; outputs in {}", trainer.step, out.display());
    Ok(())
}

fn to_core(e: anyhow::Error) -> cmgan::Error {
    match e.downcast::<cmgan::Error>() {
        Ok(e) => e,
        Err(e) => cmgan::Error::InvalidArgument(format!("{e:#}")),
    }
}

/// Rows of an earlier log with step below `upto`.
fn previous_rows(path: &Path, upto: u64) -> Result<Vec<String>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < upto)
        })
        .map(str::to_string)
        .collect())
}

/// Writes `checkpoints/step_NNNNNN.cmgn` and refreshes `latest.cmgn`.
fn checkpoint(trainer: &Trainer<f32>, out: &Path) -> Result<()> {
    let ck = trainer.to_checkpoint();
    save_checkpoint(&out.join("checkpoints").join(format!("step_{:06}.cmgn", trainer.step)), &ck)?;
    save_checkpoint(&out.join("latest.cmgn"), &ck)?;
    Ok(())
}

/// A fixed image, mask and latent rendered as input | mask | output.
struct Preview {
    image: cmgan::Tensor<f32>,
    mask: cmgan::Tensor<f32>,
    z: cmgan::Tensor<f32>,
    seed: u64,
}

impl Preview {
    fn new(trainer: &Trainer<f32>, seed: u64) -> Result<Self> {
        let batch = trainer.batch(0)?;
        let r = trainer.generator.config.resolution;
        let image = first_item(&batch.image, &[1, 3, r, r])?;
        let mask = first_item(&batch.mask, &[1, 1, r, r])?;
        let z = trainer.generator.sample_z(1, &mut Prng::new(seed).substream("preview_z"));
        Ok(Preview { image, mask, z, seed })
    }

    fn write(&self, trainer: &Trainer<f32>, out: &Path) -> Result<()> {
        let result = trainer.generator.inpaint(
            &trainer.gen_params,
            &self.image,
            &self.mask,
            &self.z,
            Some(&mut Prng::new(self.seed).substream("preview_noise")),
        )?;
        let input = tensor_to_rgb(&self.image, 0)?;
        let output = tensor_to_rgb(&result, 0)?;
        let strip = triptych(&input, self.mask.data(), &output);
        save_rgb(&out.join("samples").join(format!("step_{:06}.png", trainer.step)), &strip)?;
        Ok(())
    }
}

fn first_item(t: &cmgan::Tensor<f32>, shape: &[usize]) -> Result<cmgan::Tensor<f32>> {
    let n = shape.iter().product();
    Ok(cmgan::Tensor::new(shape, t.data()[..n].to_vec())?)
}

/// Side-by-side input (hole shown mid-gray), mask (white hole) and output.
pub fn triptych(input: &RgbImage, mask: &[f32], output: &RgbImage) -> RgbImage {
    let (w, h) = (input.width, input.height);
    let mut pixels = Vec::with_capacity(9 * w * h);
    for y in 0..h {
        for panel in 0..3 {
            for x in 0..w {
                let i = y * w + x;
                let hole = mask[i] != 0.0;
                let px = match panel {
                    0 if hole => [128; 3],
                    0 => [input.pixels[3 * i], input.pixels[3 * i + 1], input.pixels[3 * i + 2]],
                    1 => [if hole { 255 } else { 0 }; 3],
                    _ => [output.pixels[3 * i], output.pixels[3 * i + 1], output.pixels[3 * i + 2]],
                };
                pixels.extend_from_slice(&px);
            }
        }
    }
    RgbImage {
        width: 3 * w,
        height: h,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triptych_layout() {
        let input = RgbImage {
            width: 2,
            height: 1,
            pixels: vec![10, 20, 30, 40, 50, 60],
        };
        let output = RgbImage {
            width: 2,
            height: 1,
            pixels: vec![1, 2, 3, 4, 5, 6],
        };
        let t = triptych(&input, &[0.0, 1.0], &output);
        assert_eq!((t.width, t.height), (6, 1));
        assert_eq!(
            t.pixels,
            vec![10, 20, 30, 128, 128, 128, 0, 0, 0, 255, 255, 255, 1, 2, 3, 4, 5, 6]
        );
    }

    #[test]
    fn previous_rows_keeps_earlier_steps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, format!("{CSV_HEADER}\n0,1,1,0,0\n1,1,1,0,0\n2,1,1,0,0\n")).unwrap();
        assert_eq!(previous_rows(&p, 2).unwrap(), vec!["0,1,1,0,0", "1,1,1,0,0"]);
        assert!(previous_rows(&dir.path().join("none.csv"), 5).unwrap().is_empty());
    }
}
