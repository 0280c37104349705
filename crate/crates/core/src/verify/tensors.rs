//! Tensor primitives, FFT identities and autodiff soundness.

use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::{concat, Tape, Tensor, Var};

use super::support::*;
use super::{Bound, Check, Measurement};

pub(super) const CHECKS: &[Check] = &[
    Check::new("conv.direct_oracle", "conv2d matches a nested-loop oracle (64-bit)", conv_direct_oracle),
    Check::new("fc.matmul_oracle", "fc matches a direct matrix-multiply oracle", fc_matmul_oracle),
    Check::new("spectral.fft_roundtrip", "irfft2(rfft2(x)) reconstructs a random 1x1x8x8 input", fft_roundtrip),
    Check::new("spectral.parseval", "sum x^2 equals sum |X|^2 / (HW) with Hermitian bins doubled", fft_parseval),
    Check::new("spectral.fft_linearity", "rfft2 is linear", fft_linearity),
    Check::new("spectral.dft_oracle", "rfft2 and irfft2 match naive DFT sums", fft_dft_oracle),
    Check::new("autodiff.primitive.add", "broadcasting add vs finite differences", p_add),
    Check::new("autodiff.primitive.sub", "broadcasting sub vs finite differences", p_sub),
    Check::new("autodiff.primitive.mul", "broadcasting mul vs finite differences", p_mul),
    Check::new("autodiff.primitive.scalar_ops", "mul_scalar, add_scalar, neg vs finite differences", p_scalar_ops),
    Check::new("autodiff.primitive.square", "square vs finite differences", p_square),
    Check::new("autodiff.primitive.pow_scalar", "pow_scalar vs finite differences", p_pow),
    Check::new("autodiff.primitive.tanh", "tanh vs finite differences", p_tanh),
    Check::new("autodiff.primitive.sigmoid", "sigmoid vs finite differences", p_sigmoid),
    Check::new("autodiff.primitive.softplus", "softplus vs finite differences", p_softplus),
    Check::new("autodiff.primitive.leaky_relu", "leaky_relu vs finite differences", p_leaky_relu),
    Check::new("autodiff.primitive.clamp_min", "clamp_min vs finite differences", p_clamp_min),
    Check::new("autodiff.primitive.broadcast_to", "broadcast_to vs finite differences", p_broadcast_to),
    Check::new("autodiff.primitive.sum_to", "sum_to vs finite differences", p_sum_to),
    Check::new("autodiff.primitive.reductions", "sum, mean, sum_axes, mean_axes vs finite differences", p_reductions),
    Check::new("autodiff.primitive.reshape_transpose", "reshape, flatten2, transpose vs finite differences", p_reshape),
    Check::new("autodiff.primitive.matmul", "matmul vs finite differences", p_matmul),
    Check::new("autodiff.primitive.fc", "fc vs finite differences", p_fc),
    Check::new("autodiff.primitive.conv2d", "conv2d (3x3 pad 1) vs finite differences", p_conv),
    Check::new("autodiff.primitive.conv2d_strided", "conv2d (stride 2) vs finite differences", p_conv_strided),
    Check::new("autodiff.primitive.conv2d_1x1", "conv2d (1x1) vs finite differences", p_conv_1x1),
    Check::new("autodiff.primitive.upsample_nearest2x", "upsample_nearest2x vs finite differences", p_upsample),
    Check::new("autodiff.primitive.pooling", "sum_pool2x and avg_pool2x vs finite differences", p_pool),
    Check::new("autodiff.primitive.narrow_pad_concat", "narrow, pad_axis, concat vs finite differences", p_narrow),
    Check::new("autodiff.primitive.rfft2", "rfft2 vs finite differences", p_rfft2),
    Check::new("autodiff.primitive.irfft2", "irfft2 vs finite differences", p_irfft2),
    Check::new("autodiff.primitive.l2_normalize", "l2_normalize vs finite differences", p_l2_normalize),
    Check::new("autodiff.composite.conv_fc_lrelu_fft", "conv -> leaky-relu -> rfft2 -> fc vs finite differences", composite_ops),
    Check::new(
        "autodiff.second_order.linear_closed_form",
        "d/dw of 0.5 ||m * grad_x <w,x>||^2 equals m * w",
        second_order_linear,
    ),
    Check::new(
        "autodiff.second_order.mlp",
        "parameter gradient of an input-gradient penalty on a 2-layer perceptron vs finite differences",
        second_order_mlp,
    ),
];

fn conv_direct_oracle() -> Result<Vec<Measurement>> {
    let x = randn(&[1, 3, 5, 5], 1);
    let k = randn(&[2, 3, 3, 3], 2);
    let tape = Tape::new();
    let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let mut out = Vec::new();
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let got = xv.conv2d(&kv, stride, pad)?;
        let want = conv2d_ref(&x, &k, stride, pad);
        out.push(Measurement::new(
            format!("stride {stride} pad {pad}: max relative error"),
            max_rel(got.value().data(), want.data()),
            Bound::below(1e-6),
        ));
    }
    Ok(out)
}

fn fc_matmul_oracle() -> Result<Vec<Measurement>> {
    let (x, w, b) = (randn(&[4, 5], 3), randn(&[3, 5], 4), randn(&[3], 5));
    let tape = Tape::new();
    let got = tape.constant(x.clone()).fc(&tape.constant(w.clone()), Some(&tape.constant(b.clone())))?;
    let want = fc_ref(&x, &w, Some(&b));
    Ok(vec![Measurement::new(
        "max relative error",
        max_rel(got.value().data(), want.data()),
        Bound::below(1e-10),
    )])
}

fn fft_roundtrip() -> Result<Vec<Measurement>> {
    let x = randn(&[1, 1, 8, 8], 6);
    let tape = Tape::new();
    let back = tape.constant(x.clone()).rfft2()?.irfft2(8)?;
    Ok(vec![Measurement::new(
        "max abs error",
        max_abs(back.value().data(), x.data()),
        Bound::below(1e-10),
    )])
}

fn fft_parseval() -> Result<Vec<Measurement>> {
    let (h, w) = (8, 8);
    let x = randn(&[1, 1, h, w], 7);
    let tape = Tape::new();
    let z = tape.constant(x.clone()).rfft2()?;
    let z = z.value();
    let wh = w / 2 + 1;
    let mut spectral = 0.0;
    for k in 0..h {
        for l in 0..wh {
            let (re, im) = (z.at(&[0, 0, k, l]), z.at(&[0, 1, k, l]));
            let count = if l == 0 || 2 * l == w { 1.0 } else { 2.0 };
            spectral += count * (re * re + im * im);
        }
    }
    spectral /= (h * w) as f64;
    let energy: f64 = x.data().iter().map(|v| v * v).sum();
    Ok(vec![Measurement::new(
        "relative difference",
        (energy - spectral).abs() / energy,
        Bound::below(1e-8),
    )])
}

fn fft_linearity() -> Result<Vec<Measurement>> {
    let (x, y) = (randn(&[2, 3, 8, 16], 8), randn(&[2, 3, 8, 16], 9));
    let (a, b) = (1.7, -0.4);
    let tape = Tape::new();
    let (xv, yv) = (tape.constant(x), tape.constant(y));
    let lhs = xv.mul_scalar(a).add(&yv.mul_scalar(b))?.rfft2()?;
    let rhs = xv.rfft2()?.mul_scalar(a).add(&yv.rfft2()?.mul_scalar(b))?;
    Ok(vec![Measurement::new(
        "max relative error",
        max_rel(lhs.value().data(), rhs.value().data()),
        Bound::below(1e-10),
    )])
}

fn fft_dft_oracle() -> Result<Vec<Measurement>> {
    let x = randn(&[1, 2, 4, 8], 10);
    let z = randn(&[1, 4, 8, 3], 11);
    let tape = Tape::new();
    let fwd = tape.constant(x.clone()).rfft2()?;
    let inv = tape.constant(z.clone()).irfft2(4)?;
    Ok(vec![
        Measurement::new(
            "rfft2 max relative error",
            max_rel(fwd.value().data(), rfft2_ref(&x).data()),
            Bound::below(1e-10),
        ),
        Measurement::new(
            "irfft2 max relative error",
            max_rel(inv.value().data(), irfft2_ref(&z, 4).data()),
            Bound::below(1e-10),
        ),
    ])
}

type Body = dyn Fn(&crate::params::Bound<f64>) -> Result<Var<f64>>;

/// Finite-difference check of every coordinate of every input of `body`.
fn primitive(inputs: Vec<(&str, Tensor<f64>)>, body: &Body) -> Result<Vec<Measurement>> {
    let mut p = ParamSet::new();
    for (n, t) in inputs {
        p.insert(n, t);
    }
    let e = grad_check(&p, Sampling::All, 0, &|_, b| project(&body(b)?, 77))?;
    Ok(vec![Measurement::new(
        format!("relative error (worst input {})", e.worst),
        e.rel,
        Bound::below(1e-4),
    )])
}

fn p_add() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[2, 3, 4], 1)), ("y", randn(&[3, 1], 2))], &|b| {
        b.get("x")?.add(b.get("y")?)
    })
}

fn p_sub() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[2, 3, 4], 3)), ("y", randn(&[1, 3, 1], 4))], &|b| {
        b.get("y")?.sub(b.get("x")?)
    })
}

fn p_mul() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[2, 3, 4], 5)), ("y", randn(&[2, 1, 4], 6))], &|b| {
        b.get("x")?.mul(b.get("y")?)
    })
}

fn p_scalar_ops() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[3, 4], 7))], &|b| {
        Ok(b.get("x")?.mul_scalar(-2.5).add_scalar(0.3).neg())
    })
}

fn p_square() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[3, 4], 8))], &|b| b.get("x")?.square())
}

fn p_pow() -> Result<Vec<Measurement>> {
    primitive(vec![("x", uniform(&[3, 4], 0.5, 2.0, 9))], &|b| {
        let x = b.get("x")?;
        x.pow_scalar(1.7).add(&x.pow_scalar(-0.5))
    })
}

fn p_tanh() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[3, 4], 10))], &|b| Ok(b.get("x")?.tanh()))
}

fn p_sigmoid() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[3, 4], 11).map(|v| 4.0 * v))], &|b| Ok(b.get("x")?.sigmoid()))
}

fn p_softplus() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[3, 4], 12).map(|v| 4.0 * v))], &|b| Ok(b.get("x")?.softplus()))
}

fn p_leaky_relu() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[3, 4], 13))], &|b| Ok(b.get("x")?.leaky_relu(0.2)))
}

fn p_clamp_min() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[3, 4], 14))], &|b| Ok(b.get("x")?.clamp_min(0.1)))
}

fn p_broadcast_to() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[3, 1], 15))], &|b| b.get("x")?.broadcast_to(&[2, 3, 4]))
}

fn p_sum_to() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[2, 3, 4], 16))], &|b| b.get("x")?.sum_to(&[3, 1]))
}

fn p_reductions() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[2, 3, 4], 17))], &|b| {
        let x = b.get("x")?;
        let axes = x.sum_axes(&[0, 2])?.mul(&x.mean_axes(&[1])?)?;
        axes.add(&x.sum()?.mul(&x.mean()?)?)
    })
}

fn p_reshape() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[2, 3, 4], 18))], &|b| {
        let x = b.get("x")?;
        x.reshape(&[6, 4])?.transpose()?.mul(&x.flatten2()?.reshape(&[4, 6])?)
    })
}

fn p_matmul() -> Result<Vec<Measurement>> {
    primitive(vec![("a", randn(&[3, 4], 19)), ("b", randn(&[4, 5], 20))], &|b| {
        b.get("a")?.matmul(b.get("b")?)
    })
}

fn p_fc() -> Result<Vec<Measurement>> {
    primitive(
        vec![("x", randn(&[3, 4], 21)), ("w", randn(&[5, 4], 22)), ("b", randn(&[5], 23))],
        &|b| b.get("x")?.fc(b.get("w")?, Some(b.get("b")?)),
    )
}

fn p_conv() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[2, 3, 5, 5], 24)), ("k", randn(&[2, 3, 3, 3], 25))], &|b| {
        b.get("x")?.conv2d(b.get("k")?, 1, 1)
    })
}

fn p_conv_strided() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[2, 2, 6, 6], 26)), ("k", randn(&[3, 2, 3, 3], 27))], &|b| {
        b.get("x")?.conv2d(b.get("k")?, 2, 1)
    })
}

fn p_conv_1x1() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[2, 3, 4, 4], 28)), ("k", randn(&[2, 3, 1, 1], 29))], &|b| {
        b.get("x")?.conv2d(b.get("k")?, 1, 0)
    })
}

fn p_upsample() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[2, 2, 3, 3], 30))], &|b| b.get("x")?.upsample_nearest2x())
}

fn p_pool() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[2, 2, 4, 4], 31))], &|b| {
        let x = b.get("x")?;
        x.sum_pool2x()?.mul(&x.avg_pool2x()?)
    })
}

fn p_narrow() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[2, 5, 3], 32)), ("y", randn(&[2, 2, 3], 33))], &|b| {
        let (x, y) = (b.get("x")?, b.get("y")?);
        let joined = concat(&[&x.narrow(1, 1, 3)?, y], 1)?;
        joined.add(&y.pad_axis(1, 2, 5)?)
    })
}

fn p_rfft2() -> Result<Vec<Measurement>> {
    primitive(vec![("x", randn(&[2, 2, 4, 8], 34))], &|b| b.get("x")?.rfft2())
}

fn p_irfft2() -> Result<Vec<Measurement>> {
    primitive(vec![("z", randn(&[2, 4, 4, 5], 35))], &|b| b.get("z")?.irfft2(8))
}

fn p_l2_normalize() -> Result<Vec<Measurement>> {
    primitive(vec![("v", randn(&[3, 5], 36))], &|b| b.get("v")?.l2_normalize(1e-12))
}

fn composite_ops() -> Result<Vec<Measurement>> {
    primitive(
        vec![
            ("x", randn(&[2, 2, 8, 8], 40)),
            ("k", randn(&[3, 2, 3, 3], 41)),
            ("w", randn(&[4, 3 * 2 * 8 * 5], 42).map(|v| v * 0.05)),
            ("b", randn(&[4], 43)),
        ],
        &|b| {
            let h = b.get("x")?.conv2d(b.get("k")?, 1, 1)?.leaky_relu(0.2).rfft2()?;
            h.flatten2()?.fc(b.get("w")?, Some(b.get("b")?))
        },
    )
}

fn second_order_linear() -> Result<Vec<Measurement>> {
    let n = 12;
    let w = randn(&[1, n], 50);
    let mask = Tensor::new(&[1, n], (0..n).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect())?;
    let tape = Tape::new();
    let wv = tape.leaf(w.clone());
    let x = tape.leaf(randn(&[1, n], 51));
    let d = x.mul(&wv)?.sum()?;
    let gx = tape.grad(&d, &[&x], true)?.remove(0);
    let penalty = gx.mul(&tape.constant(mask.clone()))?.square()?.sum()?.mul_scalar(0.5);
    let gw = tape.grad(&penalty, &[&wv], false)?.remove(0);
    let want = zip(&w, &mask, |a, m| a * m);
    Ok(vec![Measurement::new(
        "max abs error vs m*w",
        max_abs(gw.value().data(), want.data()),
        Bound::below(1e-10),
    )])
}

/// `0.5 * mean_b ||m * grad_x D||^2` with `D(x) = v . tanh(W x + b)`.
fn mlp_penalty(tape: &Tape<f64>, p: &crate::params::Bound<f64>) -> Result<Var<f64>> {
    let x = tape.leaf(randn(&[3, 5], 60));
    let mask = tape.constant(Tensor::new(&[3, 5], (0..15).map(|i| (i % 4 != 1) as u8 as f64).collect())?);
    let h = x.fc(p.get("w1")?, Some(p.get("b1")?))?.tanh();
    let d = h.fc(p.get("w2")?, Some(p.get("b2")?))?.sum()?;
    let gx = tape.grad(&d, &[&x], true)?.remove(0);
    Ok(gx.mul(&mask)?.square()?.sum()?.mul_scalar(0.5 / 3.0))
}

fn second_order_mlp() -> Result<Vec<Measurement>> {
    let mut p = ParamSet::new();
    p.insert("w1", randn(&[6, 5], 61));
    p.insert("b1", randn(&[6], 62));
    p.insert("w2", randn(&[1, 6], 63));
    p.insert("b2", randn(&[1], 64));
    let coords = grad_check(&p, Sampling::All, 0, &mlp_penalty)?;
    let dirs = direction_check(&p, 10, 65, &mlp_penalty)?;
    Ok(vec![
        Measurement::new(
            format!("per-coordinate relative error (worst {})", coords.worst),
            coords.rel,
            Bound::below(1e-3),
        ),
        Measurement::new("10 random directions: relative error", dirs, Bound::below(1e-3)),
    ])
}
