//! Shared tools for the checks: finite-difference gradient comparison and
//! plain-loop reference implementations that share no code with the tape.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::Result;
use crate::params::{Bound as Bindings, ParamSet};
use crate::tensor::{Prng, Tape, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut Prng::new(seed))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, &mut Prng::new(seed))
}

/// `sum(v * R)` for a fixed random `R`, turning any output into a scalar
/// whose gradient exercises every element.
pub fn project(v: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let r = v.tape().constant(randn(v.shape(), seed));
    v.mul(&r)?.sum()
}

/// `max|a - b| / max|b|`.
pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    max_abs(a, b) / scale.max(f64::MIN_POSITIVE)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared vectors differ in length");
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Which coordinates a gradient check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Sampling {
    /// Every coordinate of every input.
    All,
    /// Up to `n` random coordinates per tensor.
    PerTensor(usize),
    /// Up to `n` random coordinates per layer class (see [`layer_class`]).
    PerClass(usize),
}

/// Parameter name with indices and the owning module stripped:
/// `dec.stage1.gb.up.affine.weight` -> `up.affine.weight`.
pub fn layer_class(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let keep = parts.len().min(3);
    parts[parts.len() - keep..]
        .iter()
        .map(|p| p.trim_end_matches(|c: char| c.is_ascii_digit()))
        .collect::<Vec<_>>()
        .join(".")
}

/// Worst group error of a gradient check.
#[derive(Clone, Debug)]
pub struct GradError {
    pub rel: f64,
    pub worst: String,
    pub coords: usize,
}

fn eval(inputs: &ParamSet<f64>, f: &dyn Fn(&Tape<f64>, &Bindings<f64>) -> Result<Var<f64>>) -> Result<f64> {
    let tape = Tape::new();
    let b = inputs.bind(&tape, false);
    f(&tape, &b)?.item()
}

/// Compares the tape gradient of the scalar `f` with central differences.
///
/// Coordinates are grouped (per tensor or per layer class); each group's
/// error is `||analytic - numeric|| / max(||analytic||, ||numeric||)` and
/// the worst group is reported.
pub fn grad_check(
    inputs: &ParamSet<f64>,
    sampling: Sampling,
    seed: u64,
    f: &dyn Fn(&Tape<f64>, &Bindings<f64>) -> Result<Var<f64>>,
) -> Result<GradError> {
    let tape = Tape::new();
    let bound = inputs.bind(&tape, true);
    let loss = f(&tape, &bound)?;
    let analytic = bound.gradients(&tape.backward(&loss)?);

    let mut rng = Prng::new(seed);
    let mut coords: Vec<(String, String, usize)> = Vec::new();
    match sampling {
        Sampling::All => {
            for (name, t) in inputs.iter() {
                coords.extend((0..t.numel()).map(|i| (name.clone(), name.clone(), i)));
            }
        }
        Sampling::PerTensor(n) => {
            for (name, t) in inputs.iter() {
                for i in pick(t.numel(), n, &mut rng) {
                    coords.push((name.clone(), name.clone(), i));
                }
            }
        }
        Sampling::PerClass(n) => {
            let mut classes: BTreeMap<String, Vec<(String, usize)>> = BTreeMap::new();
            for (name, t) in inputs.iter() {
                classes.entry(layer_class(name)).or_default().push((name.clone(), t.numel()));
            }
            for (class, members) in classes {
                for _ in 0..n {
                    let (name, numel) = &members[rng.int_inclusive(0, members.len() - 1)];
                    let i = rng.int_inclusive(0, numel - 1);
                    coords.push((class.clone(), name.clone(), i));
                }
            }
        }
    }

    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut work = inputs.clone();
    for (group, name, i) in &coords {
        let orig = work.get(name)?.data()[*i];
        work.get_mut(name)?.data_mut()[*i] = orig + FD_STEP;
        let up = eval(&work, f)?;
        work.get_mut(name)?.data_mut()[*i] = orig - FD_STEP;
        let down = eval(&work, f)?;
        work.get_mut(name)?.data_mut()[*i] = orig;
        let entry = groups.entry(group.clone()).or_default();
        entry.0.push(analytic.get(name)?.data()[*i]);
        entry.1.push((up - down) / (2.0 * FD_STEP));
    }
    let mut worst = GradError {
        rel: 0.0,
        worst: String::new(),
        coords: coords.len(),
    };
    for (group, (a, n)) in groups {
        let e = rel_l2(&a, &n);
        if e >= worst.rel {
            worst.rel = e;
            worst.worst = group;
        }
    }
    Ok(worst)
}

/// Directional derivative check along `count` random unit directions.
pub fn direction_check(
    inputs: &ParamSet<f64>,
    count: usize,
    seed: u64,
    f: &dyn Fn(&Tape<f64>, &Bindings<f64>) -> Result<Var<f64>>,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = inputs.bind(&tape, true);
    let loss = f(&tape, &bound)?;
    let analytic = bound.gradients(&tape.backward(&loss)?);
    let mut rng = Prng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let mut dir = ParamSet::new();
        for (name, t) in inputs.iter() {
            dir.insert(name.clone(), Tensor::<f64>::randn(t.shape(), 1.0, &mut rng));
        }
        let norm = dir.iter().flat_map(|(_, t)| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
        let shifted = |sign: f64| -> ParamSet<f64> {
            let mut p = inputs.clone();
            for (name, t) in p.iter_mut() {
                let d = dir.get(name).expect("same names");
                *t = t.zip_map(d, |a, b| a + sign * FD_STEP * b / norm).expect("same shapes");
            }
            p
        };
        let numeric = (eval(&shifted(1.0), f)? - eval(&shifted(-1.0), f)?) / (2.0 * FD_STEP);
        let a: f64 = analytic
            .iter()
            .map(|(name, g)| {
                let d = dir.get(name).expect("same names");
                g.data().iter().zip(d.data()).map(|(x, y)| x * y).sum::<f64>()
            })
            .sum::<f64>()
            / norm;
        worst = worst.max(rel_l2(&[a], &[numeric]));
    }
    Ok(worst)
}

fn pick(numel: usize, n: usize, rng: &mut Prng) -> Vec<usize> {
    if numel <= n {
        return (0..numel).collect();
    }
    let mut chosen = Vec::with_capacity(n);
    while chosen.len() < n {
        let i = rng.int_inclusive(0, numel - 1);
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    chosen
}

/// Direct cross-correlation with zero padding.
pub fn conv2d_ref(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, ci, h, w) = dims(x);
    let (co, _, kh, kw) = dims(k);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * co * ho * wo];
    for n in 0..b {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.at(&[n, i, iy as usize, ix as usize]) * k.at(&[o, i, ky, kx]);
                            }
                        }
                    }
                    out[((n * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, co, ho, wo], out).expect("consistent shape")
}

/// `x W^T + b`.
pub fn fc_ref(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> Tensor<f64> {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let mut out = vec![0.0; n * dout];
    for r in 0..n {
        for o in 0..dout {
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for i in 0..din {
                acc += x.at(&[r, i]) * w.at(&[o, i]);
            }
            out[r * dout + o] = acc;
        }
    }
    Tensor::new(&[n, dout], out).expect("consistent shape")
}

pub fn dims(t: &Tensor<f64>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

pub fn map(t: &Tensor<f64>, f: impl Fn(f64) -> f64) -> Tensor<f64> {
    t.map(f)
}

pub fn zip(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    a.zip_map(b, f).expect("same shapes")
}

pub fn lrelu(t: &Tensor<f64>, slope: f64) -> Tensor<f64> {
    t.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// Multiplies `[B, C, H, W]` by a per-(batch, channel) factor `[B, C]`.
pub fn scale_channels(t: &Tensor<f64>, s: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, h, w) = dims(t);
    let mut out = t.clone();
    for n in 0..b {
        for ch in 0..c {
            let f = s.at(&[n, ch]);
            for v in &mut out.data_mut()[(n * c + ch) * h * w..][..h * w] {
                *v *= f;
            }
        }
    }
    out
}

/// Adds a per-channel bias `[C]`.
pub fn add_bias(t: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, h, w) = dims(t);
    let mut out = t.clone();
    for n in 0..b {
        for ch in 0..c {
            for v in &mut out.data_mut()[(n * c + ch) * h * w..][..h * w] {
                *v += bias.data()[ch];
            }
        }
    }
    out
}

pub fn upsample_ref(t: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, h, w) = dims(t);
    let mut out = vec![0.0; b * c * 4 * h * w];
    for p in 0..b * c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                out[(p * 2 * h + y) * 2 * w + x] = t.data()[(p * h + y / 2) * w + x / 2];
            }
        }
    }
    Tensor::new(&[b, c, 2 * h, 2 * w], out).expect("consistent shape")
}

pub fn avg_pool_ref(t: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, h, w) = dims(t);
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * h2 * w2];
    for p in 0..b * c {
        for y in 0..h2 {
            for x in 0..w2 {
                let at = |yy: usize, xx: usize| t.data()[(p * h + yy) * w + xx];
                out[(p * h2 + y) * w2 + x] =
                    (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)) / 4.0;
            }
        }
    }
    Tensor::new(&[b, c, h2, w2], out).expect("consistent shape")
}

/// Naive DFT of `[B, C, H, W]` into stacked half spectra `[B, 2C, H, W/2+1]`.
pub fn rfft2_ref(t: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, h, w) = dims(t);
    let wh = w / 2 + 1;
    let mut out = vec![0.0; b * 2 * c * h * wh];
    for n in 0..b {
        for ch in 0..c {
            for k in 0..h {
                for l in 0..wh {
                    let (mut re, mut im) = (0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let theta = -2.0 * PI * ((k * y) as f64 / h as f64 + (l * x) as f64 / w as f64);
                            let v = t.at(&[n, ch, y, x]);
                            re += v * theta.cos();
                            im += v * theta.sin();
                        }
                    }
                    out[((n * 2 * c + ch) * h + k) * wh + l] = re;
                    out[((n * 2 * c + c + ch) * h + k) * wh + l] = im;
                }
            }
        }
    }
    Tensor::new(&[b, 2 * c, h, wh], out).expect("consistent shape")
}

/// Naive inverse of a stacked half spectrum:
/// `x = 1/(HW) sum_k sum_{l <= W/2} c_l Re(Z[k,l] e^{+i theta})`, `c_l = 1`
/// on the DC and Nyquist columns and 2 elsewhere.
pub fn irfft2_ref(z: &Tensor<f64>, w: usize) -> Tensor<f64> {
    let (b, c2, h, wh) = dims(z);
    let c = c2 / 2;
    let mut out = vec![0.0; b * c * h * w];
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for k in 0..h {
                        for l in 0..wh {
                            let weight = if l == 0 || 2 * l == w { 1.0 } else { 2.0 };
                            let theta = 2.0 * PI * ((k * y) as f64 / h as f64 + (l * x) as f64 / w as f64);
                            let re = z.at(&[n, ch, k, l]);
                            let im = z.at(&[n, c + ch, k, l]);
                            acc += weight * (re * theta.cos() - im * theta.sin());
                        }
                    }
                    out[((n * c + ch) * h + y) * w + x] = acc / (h * w) as f64;
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], out).expect("consistent shape")
}

/// `y[i,j] = sum_{a,b} x[(i-a) mod H, (j-b) mod W] k[a,b]`, per channel.
pub fn circular_conv_ref(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, h, w) = dims(x);
    let mut out = vec![0.0; b * c * h * w];
    for n in 0..b {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for a in 0..h {
                        for bb in 0..w {
                            acc += x.at(&[n, ch, (i + h - a) % h, (j + w - bb) % w]) * k.at(&[0, ch, a, bb]);
                        }
                    }
                    out[((n * c + ch) * h + i) * w + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], out).expect("consistent shape")
}

/// Per-channel sample variance of `[B, C, H, W]` over batch and space.
pub fn channel_variances(t: &Tensor<f64>) -> Vec<f64> {
    let (b, c, h, w) = dims(t);
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..b)
                .flat_map(|n| t.data()[(n * c + ch) * h * w..][..h * w].iter().copied())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_dft_roundtrips() {
        let x = randn(&[1, 2, 4, 8], 1);
        let back = irfft2_ref(&rfft2_ref(&x), 8);
        assert!(max_abs(back.data(), x.data()) < 1e-12);
    }

    #[test]
    fn layer_class_strips_indices() {
        assert_eq!(layer_class("dec.stage1.gb.up.affine.weight"), "up.affine.weight");
        assert_eq!(layer_class("enc.block2.l2l.weight"), "block.l2l.weight");
        assert_eq!(layer_class("head.bias"), "head.bias");
    }

    #[test]
    fn grad_check_accepts_exact_gradient() {
        let mut p = ParamSet::new();
        p.insert("x", randn(&[3, 4], 2));
        let e = grad_check(&p, Sampling::All, 0, &|_, b| b.get("x")?.square()?.sum()).unwrap();
        assert!(e.rel < 1e-8, "{e:?}");
    }
}
