//! Differentiable primitives and their backward rules.
//!
//! Binary elementwise operations broadcast numpy-style: shapes are
//! left-padded with ones to a common rank, then every axis must match or be 1.

use rustfft::num_complex::Complex;

use super::fft::{self, is_pow2};
use super::kernels::{self, ConvGeom};
use super::tape::Op;
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

fn padded(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1; rank - shape.len()];
    out.extend_from_slice(shape);
    out
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (padded(a, rank), padded(b, rank));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// `(in + 2*pad - k) / stride + 1`
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::Axis { op, axis, rank });
    }
    Ok(())
}

impl<T: Scalar> Var<T> {
    fn binary(&self, other: &Var<T>, op: Op, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var<T>> {
        let out_shape = broadcast_shape(name, self.shape(), other.shape())?;
        let rank = out_shape.len();
        let data = kernels::broadcast_binary(
            self.value().data(),
            &padded(self.shape(), rank),
            other.value().data(),
            &padded(other.shape(), rank),
            &out_shape,
            f,
        );
        Ok(self
            .tape()
            .record(op, &[self, other], Tensor::from_parts(out_shape, data)))
    }

    fn unary(&self, op: Op, f: impl Fn(T) -> T) -> Var<T> {
        let value = self.value().map(f);
        self.tape().record(op, &[self], value)
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn mul_scalar(&self, c: f64) -> Var<T> {
        let cv = T::lit(c);
        self.unary(Op::MulScalar(c), |v| v * cv)
    }

    pub fn add_scalar(&self, c: f64) -> Var<T> {
        let cv = T::lit(c);
        self.unary(Op::AddScalar, |v| v + cv)
    }

    pub fn neg(&self) -> Var<T> {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Result<Var<T>> {
        self.mul(self)
    }

    pub fn pow_scalar(&self, p: f64) -> Var<T> {
        let pv = T::lit(p);
        self.unary(Op::PowScalar(p), |v| v.powf(pv))
    }

    pub fn tanh(&self) -> Var<T> {
        self.unary(Op::Tanh, |v| v.tanh())
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Var<T> {
        self.unary(Op::Softplus, |v| v.max(T::zero()) + (-v.abs()).exp().ln_1p())
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let s = T::lit(slope);
        self.unary(Op::LeakyRelu(slope), |v| if v > T::zero() { v } else { v * s })
    }

    pub fn clamp_min(&self, floor: f64) -> Var<T> {
        let f = T::lit(floor);
        self.unary(Op::ClampMin(floor), |v| v.max(f))
    }

    /// Sums down to `shape`, which must broadcast to this variable's shape.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var<T>> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let out = broadcast_shape("sum_to", shape, self.shape())?;
        if out != self.shape() || shape.len() > self.shape().len() {
            return Err(Error::shape(
                "sum_to",
                format!("{:?} does not reduce to {shape:?}", self.shape()),
            ));
        }
        let rank = self.shape().len();
        let data = kernels::sum_to(self.value().data(), self.shape(), &padded(shape, rank));
        Ok(self
            .tape()
            .record(Op::SumTo, &[self], Tensor::from_parts(shape.to_vec(), data)))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<T>> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let out = broadcast_shape("broadcast_to", self.shape(), shape)?;
        if out != shape {
            return Err(Error::shape(
                "broadcast_to",
                format!("{:?} does not broadcast to {shape:?}", self.shape()),
            ));
        }
        let data = kernels::broadcast_to(self.value().data(), &padded(self.shape(), shape.len()), shape);
        Ok(self
            .tape()
            .record(Op::BroadcastTo, &[self], Tensor::from_parts(shape.to_vec(), data)))
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum(&self) -> Result<Var<T>> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Result<Var<T>> {
        let n = self.value().numel().max(1);
        Ok(self.sum()?.mul_scalar(1.0 / n as f64))
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<T>> {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            check_axis("sum_axes", a, shape.len())?;
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<T>> {
        let mut n = 1;
        for &a in axes {
            check_axis("mean_axes", a, self.shape().len())?;
            n *= self.shape()[a];
        }
        Ok(self.sum_axes(axes)?.mul_scalar(1.0 / n.max(1) as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape().record(Op::Reshape, &[self], value))
    }

    pub fn flatten2(&self) -> Result<Var<T>> {
        let b = *self.shape().first().unwrap_or(&1);
        let rest = self.value().numel() / b.max(1);
        self.reshape(&[b, rest])
    }

    pub fn transpose(&self) -> Result<Var<T>> {
        let [r, c] = self.shape()[..] else {
            return Err(Error::shape("transpose", format!("needs rank 2, got {:?}", self.shape())));
        };
        let data = kernels::transpose2(self.value().data(), r, c);
        Ok(self
            .tape()
            .record(Op::Transpose, &[self], Tensor::from_parts(vec![c, r], data)))
    }

    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(Error::shape("matmul", "operands must be rank 2"));
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let data = kernels::matmul(self.value().data(), other.value().data(), m, k, n);
        Ok(self
            .tape()
            .record(Op::Matmul, &[self, other], Tensor::from_parts(vec![m, n], data)))
    }

    /// `x [B, In] -> x W^T + b` with `W [Out, In]`, `b [Out]`.
    pub fn fc(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        if self.shape().len() != 2 || weight.shape().len() != 2 || self.shape()[1] != weight.shape()[1] {
            return Err(Error::shape(
                "fc",
                format!("input {:?} vs weight {:?}", self.shape(), weight.shape()),
            ));
        }
        let y = self.matmul(&weight.transpose()?)?;
        match bias {
            Some(b) => y.add(&b.reshape(&[1, weight.shape()[0]])?),
            None => Ok(y),
        }
    }

    /// Cross-correlation of `[B, Ci, H, W]` with `[Co, Ci, kh, kw]`.
    pub fn conv2d(&self, kernel: &Var<T>, stride: usize, pad: usize) -> Result<Var<T>> {
        let geom = conv_geom(self.shape(), kernel.shape(), stride, pad)?;
        if geom.kh % 2 == 0 || geom.kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel size must be odd, got {}x{}", geom.kh, geom.kw),
            ));
        }
        self.conv2d_unchecked(kernel, geom)
    }

    fn conv2d_unchecked(&self, kernel: &Var<T>, geom: ConvGeom) -> Result<Var<T>> {
        let data = kernels::conv2d(self.value().data(), kernel.value().data(), geom);
        Ok(self.tape().record(
            Op::Conv2d {
                stride: geom.stride,
                pad: geom.pad,
            },
            &[self, kernel],
            Tensor::from_parts(vec![geom.batch, geom.cout, geom.ho, geom.wo], data),
        ))
    }

    /// Transposed convolution: gradient of `conv2d` w.r.t. an input of `input_shape`.
    pub(crate) fn conv2d_input_grad(
        &self,
        kernel: &Var<T>,
        stride: usize,
        pad: usize,
        input_shape: &[usize],
    ) -> Result<Var<T>> {
        let geom = conv_geom(input_shape, kernel.shape(), stride, pad)?;
        if self.shape() != [geom.batch, geom.cout, geom.ho, geom.wo] {
            return Err(Error::shape("conv2d_input_grad", format!("{:?}", self.shape())));
        }
        let data = kernels::conv2d_input_grad(self.value().data(), kernel.value().data(), geom);
        Ok(self.tape().record(
            Op::Conv2dInputGrad { stride, pad },
            &[self, kernel],
            Tensor::from_parts(input_shape.to_vec(), data),
        ))
    }

    /// Gradient of `conv2d(self, K)` w.r.t. `K` given output gradient `grad_out`.
    pub(crate) fn conv2d_kernel_grad(
        &self,
        grad_out: &Var<T>,
        stride: usize,
        pad: usize,
        kernel_shape: &[usize],
    ) -> Result<Var<T>> {
        let geom = conv_geom(self.shape(), kernel_shape, stride, pad)?;
        if grad_out.shape() != [geom.batch, geom.cout, geom.ho, geom.wo] {
            return Err(Error::shape("conv2d_kernel_grad", format!("{:?}", grad_out.shape())));
        }
        let data = kernels::conv2d_kernel_grad(self.value().data(), grad_out.value().data(), geom);
        Ok(self.tape().record(
            Op::Conv2dKernelGrad { stride, pad },
            &[self, grad_out],
            Tensor::from_parts(kernel_shape.to_vec(), data),
        ))
    }

    pub fn upsample_nearest2x(&self) -> Result<Var<T>> {
        let [b, c, h, w] = self.value().dims4("upsample_nearest2x")?;
        let data = kernels::upsample_nearest2x(self.value().data(), b * c, h, w);
        Ok(self
            .tape()
            .record(Op::Upsample2x, &[self], Tensor::from_parts(vec![b, c, 2 * h, 2 * w], data)))
    }

    /// Sum over 2x2 windows; needs even height and width.
    pub fn sum_pool2x(&self) -> Result<Var<T>> {
        let [b, c, h, w] = self.value().dims4("sum_pool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("sum_pool2x", format!("odd spatial size {h}x{w}")));
        }
        let data = kernels::sum_pool2x(self.value().data(), b * c, h, w);
        Ok(self
            .tape()
            .record(Op::SumPool2x, &[self], Tensor::from_parts(vec![b, c, h / 2, w / 2], data)))
    }

    pub fn avg_pool2x(&self) -> Result<Var<T>> {
        Ok(self.sum_pool2x()?.mul_scalar(0.25))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        check_axis("narrow", axis, self.shape().len())?;
        if start + len > self.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} exceeds axis length {}", start + len, self.shape()[axis]),
            ));
        }
        let data = kernels::narrow(self.value().data(), self.shape(), axis, start, len);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(self
            .tape()
            .record(Op::Narrow { axis, start }, &[self], Tensor::from_parts(shape, data)))
    }

    /// Places this value at `start` along `axis` inside zeros of length `total`.
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Result<Var<T>> {
        check_axis("pad_axis", axis, self.shape().len())?;
        if start + self.shape()[axis] > total {
            return Err(Error::shape("pad_axis", "padded length too small"));
        }
        let data = kernels::pad_axis(self.value().data(), self.shape(), axis, start, total);
        let mut shape = self.shape().to_vec();
        shape[axis] = total;
        Ok(self
            .tape()
            .record(Op::PadAxis { axis, start }, &[self], Tensor::from_parts(shape, data)))
    }

    /// Real 2-D FFT: `[B, C, H, W] -> [B, 2C, H, W/2+1]`, real parts in
    /// channels `0..C` and imaginary parts in `C..2C`.
    pub fn rfft2(&self) -> Result<Var<T>> {
        let [b, c, h, w] = self.value().dims4("rfft2")?;
        check_pow2("rfft2", h, w)?;
        let wh = w / 2 + 1;
        let x = self.value().data();
        let mut out = vec![T::zero(); b * 2 * c * h * wh];
        for bi in 0..b {
            for ci in 0..c {
                let spec = fft::rfft2_plane(&x[(bi * c + ci) * h * w..][..h * w], h, w);
                store_spectrum(&mut out, &spec, bi, ci, c, h * wh);
            }
        }
        Ok(self
            .tape()
            .record(Op::Rfft2, &[self], Tensor::from_parts(vec![b, 2 * c, h, wh], out)))
    }

    /// Inverse of [`Var::rfft2`] producing width `width`.
    pub fn irfft2(&self, width: usize) -> Result<Var<T>> {
        let (b, c, h) = spectrum_dims("irfft2", self.shape(), width)?;
        let wh = width / 2 + 1;
        let mut out = vec![T::zero(); b * c * h * width];
        for bi in 0..b {
            for ci in 0..c {
                let spec = load_spectrum(self.value().data(), bi, ci, c, h * wh);
                let plane = fft::irfft2_plane(&spec, h, width);
                out[(bi * c + ci) * h * width..][..h * width].copy_from_slice(&plane);
            }
        }
        Ok(self
            .tape()
            .record(Op::Irfft2, &[self], Tensor::from_parts(vec![b, c, h, width], out)))
    }

    pub(crate) fn rfft2_adjoint(&self, width: usize) -> Result<Var<T>> {
        let (b, c, h) = spectrum_dims("rfft2_adjoint", self.shape(), width)?;
        let wh = width / 2 + 1;
        let mut out = vec![T::zero(); b * c * h * width];
        for bi in 0..b {
            for ci in 0..c {
                let spec = load_spectrum(self.value().data(), bi, ci, c, h * wh);
                let plane = fft::rfft2_adjoint_plane(&spec, h, width);
                out[(bi * c + ci) * h * width..][..h * width].copy_from_slice(&plane);
            }
        }
        Ok(self
            .tape()
            .record(Op::Rfft2Adjoint, &[self], Tensor::from_parts(vec![b, c, h, width], out)))
    }

    pub(crate) fn irfft2_adjoint(&self) -> Result<Var<T>> {
        let [b, c, h, w] = self.value().dims4("irfft2_adjoint")?;
        check_pow2("irfft2_adjoint", h, w)?;
        let wh = w / 2 + 1;
        let x = self.value().data();
        let mut out = vec![T::zero(); b * 2 * c * h * wh];
        for bi in 0..b {
            for ci in 0..c {
                let spec = fft::irfft2_adjoint_plane(&x[(bi * c + ci) * h * w..][..h * w], h, w);
                store_spectrum(&mut out, &spec, bi, ci, c, h * wh);
            }
        }
        Ok(self
            .tape()
            .record(Op::Irfft2Adjoint, &[self], Tensor::from_parts(vec![b, 2 * c, h, wh], out)))
    }

    /// `v / max(||v||_2, eps)` along the last axis of a `[B, D]` variable.
    pub fn l2_normalize(&self, eps: f64) -> Result<Var<T>> {
        if self.shape().len() != 2 {
            return Err(Error::shape("l2_normalize", format!("needs [B, D], got {:?}", self.shape())));
        }
        let norm = self.square()?.sum_axes(&[1])?.pow_scalar(0.5).clamp_min(eps);
        self.mul(&norm.pow_scalar(-1.0))
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn check_pow2(op: &'static str, h: usize, w: usize) -> Result<()> {
    if !is_pow2(h) || !is_pow2(w) {
        return Err(Error::NotPowerOfTwo {
            op,
            height: h,
            width: w,
        });
    }
    Ok(())
}

fn spectrum_dims(op: &'static str, shape: &[usize], width: usize) -> Result<(usize, usize, usize)> {
    let [b, c2, h, wh] = shape[..] else {
        return Err(Error::shape(op, format!("expected a rank-4 spectrum, got {shape:?}")));
    };
    check_pow2(op, h, width)?;
    if c2 % 2 != 0 || wh != width / 2 + 1 {
        return Err(Error::shape(op, format!("spectrum {shape:?} does not match width {width}")));
    }
    Ok((b, c2 / 2, h))
}

fn store_spectrum<T: Scalar>(out: &mut [T], spec: &[Complex<T>], b: usize, c: usize, channels: usize, plane: usize) {
    let re = (b * 2 * channels + c) * plane;
    let im = (b * 2 * channels + channels + c) * plane;
    for (j, z) in spec.iter().enumerate() {
        out[re + j] = z.re;
        out[im + j] = z.im;
    }
}

fn load_spectrum<T: Scalar>(x: &[T], b: usize, c: usize, channels: usize, plane: usize) -> Vec<Complex<T>> {
    let re = &x[(b * 2 * channels + c) * plane..][..plane];
    let im = &x[(b * 2 * channels + channels + c) * plane..][..plane];
    re.iter().zip(im).map(|(&r, &i)| Complex::new(r, i)).collect()
}

fn conv_geom(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let ([batch, cin, h, w], [cout, kcin, kh, kw]) = (
        <[usize; 4]>::try_from(x).map_err(|_| Error::shape("conv2d", format!("input must be rank 4, got {x:?}")))?,
        <[usize; 4]>::try_from(k).map_err(|_| Error::shape("conv2d", format!("kernel must be rank 4, got {k:?}")))?,
    );
    if cin != kcin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but kernel expects {kcin} (input {x:?}, kernel {k:?})"),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be at least 1".into()));
    }
    let (Some(ho), Some(wo)) = (conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)) else {
        return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
    };
    Ok(ConvGeom {
        batch,
        cin,
        cout,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        stride,
        pad,
    })
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<T: Scalar>(parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    check_axis("concat", axis, first.shape().len())?;
    let mut total = 0;
    for p in parts {
        let ok = p.shape().len() == first.shape().len()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()),
            ));
        }
        total += p.shape()[axis];
    }
    let slices: Vec<(&[T], &[usize])> = parts.iter().map(|p| (p.value().data(), p.shape())).collect();
    let data = kernels::concat(&slices, axis, total);
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(first
        .tape()
        .record(Op::Concat { axis }, parts, Tensor::from_parts(shape, data)))
}

/// Vector-Jacobian products: gradient for each input given the output gradient `g`.
pub(crate) fn vjp<T: Scalar>(
    op: &Op,
    inputs: &[Var<T>],
    out_shape: &[usize],
    g: &Var<T>,
    need: &[bool],
) -> Result<Vec<Option<Var<T>>>> {
    let tape = g.tape();
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    let a = inputs.first();
    let shape_of = |i: usize| inputs[i].shape().to_vec();

    let single = |v: Result<Var<T>>| -> Result<Vec<Option<Var<T>>>> { Ok(vec![Some(v?)]) };
    let mask_grad = |f: &dyn Fn(T) -> T| -> Result<Vec<Option<Var<T>>>> {
        let mask = tape.constant(inputs[0].value().map(f));
        single(g.mul(&mask))
    };

    match op {
        Op::Leaf => Ok(vec![]),
        Op::Add => Ok(vec![
            want(0).then(|| g.sum_to(&shape_of(0))).transpose()?,
            want(1).then(|| g.sum_to(&shape_of(1))).transpose()?,
        ]),
        Op::Sub => Ok(vec![
            want(0).then(|| g.sum_to(&shape_of(0))).transpose()?,
            want(1).then(|| g.neg().sum_to(&shape_of(1))).transpose()?,
        ]),
        Op::Mul => {
            let (x, y) = (&inputs[0], &inputs[1]);
            Ok(vec![
                want(0).then(|| g.mul(y)?.sum_to(x.shape())).transpose()?,
                want(1).then(|| g.mul(x)?.sum_to(y.shape())).transpose()?,
            ])
        }
        Op::MulScalar(c) => single(Ok(g.mul_scalar(*c))),
        Op::AddScalar => single(Ok(g.clone())),
        Op::PowScalar(p) => {
            let d = a.unwrap().pow_scalar(p - 1.0).mul_scalar(*p);
            single(g.mul(&d))
        }
        Op::Tanh => {
            let t = a.unwrap().tanh();
            let d = t.square()?.neg().add_scalar(1.0);
            single(g.mul(&d))
        }
        Op::Sigmoid => {
            let s = a.unwrap().sigmoid();
            let d = s.mul(&s.neg().add_scalar(1.0))?;
            single(g.mul(&d))
        }
        Op::Softplus => single(g.mul(&a.unwrap().sigmoid())),
        Op::LeakyRelu(slope) => {
            let s = T::lit(*slope);
            mask_grad(&|v| if v > T::zero() { T::one() } else { s })
        }
        Op::ClampMin(floor) => {
            let f = T::lit(*floor);
            mask_grad(&|v| if v > f { T::one() } else { T::zero() })
        }
        Op::SumTo => single(g.broadcast_to(&shape_of(0))),
        Op::BroadcastTo => single(g.sum_to(&shape_of(0))),
        Op::Reshape => single(g.reshape(&shape_of(0))),
        Op::Transpose => single(g.transpose()),
        Op::Matmul => {
            let (x, y) = (&inputs[0], &inputs[1]);
            Ok(vec![
                want(0).then(|| g.matmul(&y.transpose()?)).transpose()?,
                want(1).then(|| x.transpose()?.matmul(g)).transpose()?,
            ])
        }
        Op::Conv2d { stride, pad } => {
            let (x, k) = (&inputs[0], &inputs[1]);
            Ok(vec![
                want(0)
                    .then(|| g.conv2d_input_grad(k, *stride, *pad, x.shape()))
                    .transpose()?,
                want(1)
                    .then(|| x.conv2d_kernel_grad(g, *stride, *pad, k.shape()))
                    .transpose()?,
            ])
        }
        Op::Conv2dInputGrad { stride, pad } => {
            // out = T(gy, k); g has the shape of the original conv input.
            let (gy, k) = (&inputs[0], &inputs[1]);
            let geom = conv_geom(out_shape, k.shape(), *stride, *pad)?;
            Ok(vec![
                want(0).then(|| g.conv2d_unchecked(k, geom)).transpose()?,
                want(1)
                    .then(|| g.conv2d_kernel_grad(gy, *stride, *pad, k.shape()))
                    .transpose()?,
            ])
        }
        Op::Conv2dKernelGrad { stride, pad } => {
            // out = U(x, gy); g has kernel shape.
            let (x, gy) = (&inputs[0], &inputs[1]);
            let geom = conv_geom(x.shape(), g.shape(), *stride, *pad)?;
            Ok(vec![
                want(0)
                    .then(|| gy.conv2d_input_grad(g, *stride, *pad, x.shape()))
                    .transpose()?,
                want(1).then(|| x.conv2d_unchecked(g, geom)).transpose()?,
            ])
        }
        Op::Upsample2x => single(g.sum_pool2x()),
        Op::SumPool2x => single(g.upsample_nearest2x()),
        Op::Concat { axis } => {
            let mut start = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for (i, inp) in inputs.iter().enumerate() {
                let len = inp.shape()[*axis];
                out.push(want(i).then(|| g.narrow(*axis, start, len)).transpose()?);
                start += len;
            }
            Ok(out)
        }
        Op::Narrow { axis, start } => single(g.pad_axis(*axis, *start, shape_of(0)[*axis])),
        Op::PadAxis { axis, start } => single(g.narrow(*axis, *start, shape_of(0)[*axis])),
        Op::Rfft2 => single(g.rfft2_adjoint(shape_of(0)[3])),
        Op::Rfft2Adjoint => single(g.rfft2()),
        Op::Irfft2 => single(g.irfft2_adjoint()),
        Op::Irfft2Adjoint => single(g.irfft2(shape_of(0)[3])),
    }
}
