//! Loss, optimizer and I/O checks.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::generator::{Discriminator, GeneratorConfig};
use crate::imageio::{
    byte_to_unit, decode_checkpoint, encode_checkpoint, load_instance_map, load_mask, load_rgb, procedural_sample,
    save_instance_map, save_mask, save_rgb, unit_to_byte, RgbImage,
};
use crate::maskgen::Mask;
use crate::params::ParamSet;
use crate::tensor::{Prng, Tape, Tensor};
use crate::training::{
    d_loss, g_loss, masked_r1, masked_r1_from_logits, perceptual_loss, AdamConfig, AdamState, IdentityExtractor,
};

use super::support::*;
use super::{Bound, Check, Measurement};

pub(super) const CHECKS: &[Check] = &[
    Check::new("masked_r1.zero_mask", "masked R1 with an empty mask is exactly zero", r1_zero_mask),
    Check::new(
        "masked_r1.full_mask_equals_r1",
        "masked R1 with a full mask equals the standard R1 penalty",
        r1_full_mask,
    ),
    Check::new(
        "masked_r1.linear_closed_form",
        "for D(x) = <w, x> the penalty is gamma/2 ||m*w||^2 with parameter gradient gamma (m*w)",
        r1_linear,
    ),
    Check::new("masked_r1.monotone", "with the discriminator fixed, the penalty never decreases as the mask grows", r1_monotone),
    Check::new(
        "autodiff.second_order.masked_r1_discriminator",
        "parameter gradient of masked R1 on a small discriminator vs finite differences",
        r1_discriminator_fd,
    ),
    Check::new(
        "training.adversarial_at_zero",
        "zero logits: d_loss = 2 ln 2, g_loss = ln 2, dg_loss/dlogit = -0.5",
        adversarial_at_zero,
    ),
    Check::new(
        "training.perceptual_identity_mse",
        "perceptual loss with the identity extractor equals the mean squared error",
        perceptual_identity,
    ),
    Check::new("training.adam_first_step", "first Adam step with unit gradient moves by -lr / (1 + eps)", adam_first_step),
    Check::new(
        "training.adam_reference_trace",
        "two Adam steps match a straight-line reimplementation",
        adam_reference_trace,
    ),
    Check::new("imageio.unit_map", "bytes map to [-1, 1] affinely and quantize back exactly", unit_map),
    Check::new(
        "imageio.procedural_instances",
        "procedural instance maps have contiguous ids, non-empty disjoint instances, and are seeded",
        procedural_instances,
    ),
    Check::new(
        "imageio.checkpoint_missing_name",
        "checkpoints round-trip bit-exactly and a missing name lists the available ones",
        checkpoint_roundtrip,
    ),
    Check::new("imageio.png_roundtrip", "RGB, mask and 16-bit label PNGs round-trip exactly", png_roundtrip),
];

fn tiny_discriminator() -> Result<(Discriminator, ParamSet<f64>)> {
    let config = GeneratorConfig {
        resolution: 8,
        widths: vec![3, 4, 4],
        ..GeneratorConfig::default()
    };
    let d = Discriminator::new(&config)?;
    let params = d.init(&mut Prng::new(1));
    Ok((d, params))
}

/// Masked R1 of the tiny discriminator on `real` with a per-pixel `mask [B,1,H,W]`
/// broadcast over channels.
fn disc_penalty(mask: &Tensor<f64>, gamma: f64) -> Result<f64> {
    disc_penalty_with(mask, mask, gamma)
}

/// Penalty with the discriminator conditioned on `cond` and the gradient masked by `mask`.
fn disc_penalty_with(cond: &Tensor<f64>, mask: &Tensor<f64>, gamma: f64) -> Result<f64> {
    let (d, params) = tiny_discriminator()?;
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let real = uniform(&[2, 3, 8, 8], -1.0, 1.0, 2);
    let cond = tape.constant(cond.clone());
    let m = tape.constant(mask.clone());
    masked_r1(|x| d.forward(&p, x, &cond), &real, &m, gamma)?.item()
}

fn r1_zero_mask() -> Result<Vec<Measurement>> {
    Ok(vec![Measurement::new(
        "penalty",
        disc_penalty(&Tensor::zeros(&[2, 1, 8, 8]), 10.0)?,
        Bound::equals(0.0),
    )])
}

fn r1_full_mask() -> Result<Vec<Measurement>> {
    let gamma = 10.0;
    let masked = disc_penalty(&Tensor::ones(&[2, 1, 8, 8]), gamma)?;
    // standard R1: gamma / 2 * E_b ||grad_x D||^2, without any mask
    let (d, params) = tiny_discriminator()?;
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let x = tape.leaf(uniform(&[2, 3, 8, 8], -1.0, 1.0, 2));
    let logits = d.forward(&p, &x, &tape.constant(Tensor::ones(&[2, 1, 8, 8])))?;
    let g = tape.grad(&logits.sum()?, &[&x], false)?.remove(0);
    let standard = gamma / 2.0 * g.value().data().iter().map(|v| v * v).sum::<f64>() / 2.0;
    Ok(vec![Measurement::new(
        "relative difference from standard R1",
        (masked - standard).abs() / standard,
        Bound::below(1e-10),
    )])
}

fn r1_linear() -> Result<Vec<Measurement>> {
    let (b, n, gamma) = (3, 10, 10.0);
    let w = randn(&[n], 3);
    let m: Vec<f64> = (0..n).map(|i| ((i * 5 + 1) % 3 != 0) as u8 as f64).collect();
    let tape = Tape::new();
    let wv = tape.leaf(w.clone());
    let x = tape.leaf(randn(&[b, n], 4));
    let logits = x.mul(&wv)?.sum_axes(&[1])?;
    let mask = tape.constant(Tensor::new(&[1, n], m.clone())?);
    let penalty = masked_r1_from_logits(&x, &logits, &mask, gamma)?;
    let grad = tape.grad(&penalty, &[&wv], false)?.remove(0);
    let mw: Vec<f64> = w.data().iter().zip(&m).map(|(a, b)| a * b).collect();
    let closed = gamma / 2.0 * mw.iter().map(|v| v * v).sum::<f64>();
    let closed_grad: Vec<f64> = mw.iter().map(|v| gamma * v).collect();
    Ok(vec![
        Measurement::new(
            "penalty relative error",
            (penalty.item()? - closed).abs() / closed,
            Bound::below(1e-8),
        ),
        Measurement::new(
            "gradient max relative error",
            max_rel(grad.value().data(), &closed_grad),
            Bound::below(1e-8),
        ),
    ])
}

fn r1_monotone() -> Result<Vec<Measurement>> {
    let mut rng = Prng::new(5);
    let cond = uniform(&[2, 1, 8, 8], 0.0, 1.0, 9).map(|u| (u < 0.5) as u8 as f64);
    let mut mask = Tensor::zeros(&[2, 1, 8, 8]);
    let mut order: Vec<usize> = (0..128).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.int_inclusive(0, i));
    }
    let (mut prev, mut decreases) = (0.0, 0usize);
    for chunk in order.chunks(16) {
        for &i in chunk {
            mask.data_mut()[i] = 1.0;
        }
        let p = disc_penalty_with(&cond, &mask, 10.0)?;
        decreases += (p < prev) as usize;
        prev = p;
    }
    Ok(vec![Measurement::new("decreases over 8 nested masks", decreases as f64, Bound::equals(0.0))])
}

fn r1_discriminator_fd() -> Result<Vec<Measurement>> {
    let (d, params) = tiny_discriminator()?;
    let real = uniform(&[2, 3, 8, 8], -1.0, 1.0, 6);
    let mask = uniform(&[2, 1, 8, 8], 0.0, 1.0, 7).map(|u| (u < 0.5) as u8 as f64);
    let e = grad_check(&params, Sampling::All, 0, &|tape: &Tape<f64>, b| {
        let m = tape.constant(mask.clone());
        let x = tape.leaf(real.clone());
        let logits = d.forward(b, &x, &m)?;
        masked_r1_from_logits(&x, &logits, &m, 10.0)
    })?;
    Ok(vec![Measurement::new(
        format!("relative error over {} coordinates (worst {})", e.coords, e.worst),
        e.rel,
        Bound::below(1e-3),
    )])
}

fn adversarial_at_zero() -> Result<Vec<Measurement>> {
    let tape = Tape::new();
    let fake = tape.leaf(Tensor::zeros(&[1, 1]));
    let real = tape.constant(Tensor::zeros(&[1, 1]));
    let ln2 = std::f64::consts::LN_2;
    let d: f64 = d_loss(&real, &fake)?.item()?;
    let g = g_loss(&fake)?;
    let grad = tape.grad(&g, &[&fake], false)?.remove(0).item()?;
    Ok(vec![
        Measurement::new("|d_loss - 2 ln 2|", (d - 2.0 * ln2).abs(), Bound::below(1e-15)),
        Measurement::new("|g_loss - ln 2|", (g.item()? - ln2).abs(), Bound::below(1e-15)),
        Measurement::new("dg_loss/dlogit", grad, Bound::equals(-0.5)),
    ])
}

fn perceptual_identity() -> Result<Vec<Measurement>> {
    let (a, b) = (randn(&[2, 3, 4, 4], 8), randn(&[2, 3, 4, 4], 9));
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
    let tape = Tape::new();
    let loss = perceptual_loss(&tape.constant(a), &tape.constant(b), &IdentityExtractor, &[1.0])?.item()?;
    Ok(vec![Measurement::new("relative error vs MSE", (loss - mse).abs() / mse, Bound::below(1e-12))])
}

fn scalar_params(v: f64) -> Result<ParamSet<f64>> {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::new(&[1], vec![v])?);
    Ok(p)
}

fn adam_first_step() -> Result<Vec<Measurement>> {
    let config = AdamConfig::default();
    let mut p = scalar_params(0.25)?;
    let mut state = AdamState::new(config, &p);
    state.update(&mut p, &scalar_params(1.0)?)?;
    let delta = p.get("x")?.data()[0] - 0.25;
    let want = -config.lr / (1.0 + config.eps);
    Ok(vec![Measurement::new(
        "relative error of the step",
        (delta - want).abs() / want.abs(),
        Bound::below(1e-10),
    )])
}

fn adam_reference_trace() -> Result<Vec<Measurement>> {
    let config = AdamConfig {
        lr: 0.01,
        beta1: 0.9,
        beta2: 0.99,
        eps: 1e-8,
    };
    let x0 = randn(&[5], 10);
    let grads = [randn(&[5], 11), randn(&[5], 12)];
    let mut params = ParamSet::new();
    params.insert("w", x0.clone());
    let mut state = AdamState::new(config, &params);
    let mut trace = Vec::new();
    for g in &grads {
        let mut gs = ParamSet::new();
        gs.insert("w", g.clone());
        state.update(&mut params, &gs)?;
        trace.push(params.get("w")?.clone());
    }
    // straight-line reference
    let mut worst: f64 = 0.0;
    for i in 0..5 {
        let (g1, g2) = (grads[0].data()[i], grads[1].data()[i]);
        let m1 = 0.1 * g1;
        let v1 = 0.01 * g1 * g1;
        let x1 = x0.data()[i] - 0.01 * (m1 / 0.1) / ((v1 / 0.01).sqrt() + 1e-8);
        let m2 = 0.9 * m1 + 0.1 * g2;
        let v2 = 0.99 * v1 + 0.01 * g2 * g2;
        let x2 = x1 - 0.01 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.9801)).sqrt() + 1e-8);
        worst = worst.max((trace[0].data()[i] - x1).abs()).max((trace[1].data()[i] - x2).abs());
    }
    Ok(vec![Measurement::new("max abs deviation over two steps", worst, Bound::below(1e-12))])
}

fn unit_map() -> Result<Vec<Measurement>> {
    let roundtrip_errors = (0..=255u8).filter(|&v| unit_to_byte(byte_to_unit(v)) != v).count();
    Ok(vec![
        Measurement::new("byte 0", byte_to_unit(0), Bound::equals(-1.0)),
        Measurement::new("byte 255", byte_to_unit(255), Bound::equals(1.0)),
        Measurement::new("|byte 128 - 1/255|", (byte_to_unit(128) - 1.0 / 255.0).abs(), Bound::below(1e-15)),
        Measurement::new("bytes not recovered", roundtrip_errors as f64, Bound::equals(0.0)),
    ])
}

fn procedural_instances() -> Result<Vec<Measurement>> {
    let root = Prng::new(13);
    let (mut bad, mut objects) = (0usize, 0usize);
    for i in 0..500 {
        let s = procedural_sample(&mut root.substream_indexed("image", i), 64, 4);
        let again = procedural_sample(&mut root.substream_indexed("image", i), 64, 4);
        bad += (s != again) as usize;
        let inst = &s.instances;
        let n = inst.num_instances();
        objects += n;
        let labels = inst.labels();
        bad += labels.iter().any(|&l| l as usize > n) as usize;
        let masks: Vec<Mask> = (1..=n).map(|id| inst.instance(id)).collect();
        bad += masks.iter().any(|m| m.area() == 0) as usize;
        for a in 0..n {
            for b in a + 1..n {
                bad += (masks[a].intersection_area(&masks[b]) != 0) as usize;
            }
        }
        let covered: usize = masks.iter().map(Mask::area).sum();
        bad += (covered != labels.iter().filter(|&&l| l != 0).count()) as usize;
    }
    Ok(vec![
        Measurement::new("instances generated", objects as f64, Bound::above(0.0)),
        Measurement::new("failed audits", bad as f64, Bound::equals(0.0)),
    ])
}

fn checkpoint_roundtrip() -> Result<Vec<Measurement>> {
    let mut params: ParamSet<f32> = ParamSet::new();
    params.insert("a.weight", randn(&[3, 2, 3, 3], 14).cast());
    params.insert("b", randn(&[7], 15).cast());
    params.insert("scalar", Tensor::scalar(f32::NAN));
    let back = decode_checkpoint(&encode_checkpoint(&params))?;
    let mut diff = (back.len() != params.len()) as usize;
    for (name, t) in params.iter() {
        let u = back.get(name)?;
        diff += (u.shape() != t.shape()) as usize;
        diff += t.data().iter().zip(u.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    }
    let listed = match back.get("missing.weight") {
        Err(Error::MissingTensor { name, available }) => {
            name == "missing.weight" && available == ["a.weight", "b", "scalar"]
        }
        _ => false,
    };
    Ok(vec![
        Measurement::new("values or shapes changed", diff as f64, Bound::equals(0.0)),
        Measurement::new("missing-name error lists all names", listed as u8 as f64, Bound::equals(1.0)),
    ])
}

struct TempDir(PathBuf);

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn png_roundtrip() -> Result<Vec<Measurement>> {
    let dir = TempDir(std::env::temp_dir().join(format!("cmgan-verify-{}", std::process::id())));
    std::fs::create_dir_all(&dir.0).map_err(|e| Error::io(&dir.0, e))?;
    let sample = procedural_sample(&mut Prng::new(16), 32, 4);
    let mut rng = Prng::new(17);
    let rgb = RgbImage {
        width: 7,
        height: 5,
        pixels: (0..105).map(|_| rng.int_inclusive(0, 255) as u8).collect(),
    };
    let mask = Mask::from_vec(9, 4, (0..36).map(|_| rng.bernoulli(0.4) as u8).collect())?;
    let (pi, pm, pl) = (dir.0.join("rgb.png"), dir.0.join("mask.png"), dir.0.join("labels.png"));
    save_rgb(&pi, &rgb)?;
    save_mask(&pm, &mask)?;
    save_instance_map(&pl, &sample.instances)?;
    let failures = (load_rgb(&pi)? != rgb) as usize
        + (load_mask(&pm)? != mask) as usize
        + (load_instance_map(&pl)? != sample.instances) as usize;
    Ok(vec![Measurement::new("files not recovered", failures as f64, Bound::equals(0.0))])
}
