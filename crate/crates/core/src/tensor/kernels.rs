//! Raw loops behind the differentiable primitives.
//!
//! Every parallel loop writes disjoint output chunks and sums in a fixed
//! order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        // smallest ox with ox*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ox with ox*s + off <= w-1
        let max_in = self.w as isize - 1 - off;
        let hi = if max_in < 0 { -1 } else { max_in / s };
        let hi = hi.min(self.wo as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// A 1x1 unpadded unit-stride convolution needs no patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Patch matrix `[cin*kh*kw, ho*wo]` of one image `[cin, h, w]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plane_out = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.patch_len() * plane_out];
    for i in 0..g.cin {
        let xin = &x[i * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((i * g.kh + ky) * g.kw + kx) * plane_out..][..plane_out];
                let (lo, hi) = g.col_range(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let dst = &mut row[oy * g.wo..][lo..hi];
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst.copy_from_slice(&xin[iy * g.w + ix0..][..hi - lo]);
                    } else {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = xin[iy * g.w + ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatters a patch matrix back onto `[cin, h, w]`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let plane_out = g.ho * g.wo;
    for i in 0..g.cin {
        let xin = &mut x[i * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((i * g.kh + ky) * g.kw + kx) * plane_out..][..plane_out];
                let (lo, hi) = g.col_range(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let src = &row[oy * g.wo..][lo..hi];
                    let ix0 = lo * g.stride + kx - g.pad;
                    for (j, &v) in src.iter().enumerate() {
                        let d = &mut xin[iy * g.w + ix0 + j * g.stride];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d<T: Scalar>(x: &[T], k: &[T], g: ConvGeom) -> Vec<T> {
    let plane_in = g.h * g.w * g.cin;
    let plane_out = g.ho * g.wo;
    let ck = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.cout * plane_out];
    if plane_out == 0 || ck == 0 {
        return out;
    }
    out.par_chunks_mut(g.cout * plane_out)
        .enumerate()
        .for_each(|(b, ob)| {
            let xb = &x[b * plane_in..][..plane_in];
            let cols;
            let cols_ref = if g.is_pointwise() {
                xb
            } else {
                cols = im2col(xb, &g);
                &cols
            };
            T::gemm(
                g.cout,
                ck,
                plane_out,
                (k, ck as isize, 1),
                (cols_ref, plane_out as isize, 1),
                T::zero(),
                ob,
            );
        });
    out
}

/// Gradient of `conv2d` with respect to its input, i.e. the transposed convolution.
pub(crate) fn conv2d_input_grad<T: Scalar>(gy: &[T], k: &[T], g: ConvGeom) -> Vec<T> {
    let plane_in = g.h * g.w * g.cin;
    let plane_out = g.ho * g.wo;
    let ck = g.patch_len();
    let mut gx = vec![T::zero(); g.batch * plane_in];
    if plane_in == 0 || plane_out == 0 {
        return gx;
    }
    gx.par_chunks_mut(plane_in).enumerate().for_each(|(b, xb)| {
        let gyb = &gy[b * g.cout * plane_out..][..g.cout * plane_out];
        let kt = (k, 1, ck as isize);
        let gyv = (gyb, plane_out as isize, 1);
        if g.is_pointwise() {
            T::gemm(ck, g.cout, plane_out, kt, gyv, T::zero(), xb);
        } else {
            let mut cols = vec![T::zero(); ck * plane_out];
            T::gemm(ck, g.cout, plane_out, kt, gyv, T::zero(), &mut cols);
            col2im(&cols, &g, xb);
        }
    });
    gx
}

/// Gradient of `conv2d` with respect to its kernel; batch terms are summed in order.
pub(crate) fn conv2d_kernel_grad<T: Scalar>(x: &[T], gy: &[T], g: ConvGeom) -> Vec<T> {
    let plane_in = g.h * g.w * g.cin;
    let plane_out = g.ho * g.wo;
    let ck = g.patch_len();
    let mut gk = vec![T::zero(); g.cout * ck];
    if plane_out == 0 || ck == 0 {
        return gk;
    }
    for b in 0..g.batch {
        let xb = &x[b * plane_in..][..plane_in];
        let gyb = &gy[b * g.cout * plane_out..][..g.cout * plane_out];
        let cols;
        let cols_ref = if g.is_pointwise() {
            xb
        } else {
            cols = im2col(xb, &g);
            &cols
        };
        T::gemm(
            g.cout,
            plane_out,
            ck,
            (gyb, plane_out as isize, 1),
            (cols_ref, 1, plane_out as isize),
            T::one(),
            &mut gk,
        );
    }
    gk
}

/// `[m, k] x [k, n] -> [m, n]`
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    T::gemm(m, k, n, (a, k as isize, 1), (b, n as isize, 1), T::zero(), &mut out);
    out
}

pub(crate) fn transpose2<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Strides of `shape` viewed inside `out_shape` (same rank), zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    strides(shape)
        .into_iter()
        .zip(shape.iter().zip(out_shape))
        .map(|(s, (&d, &o))| if d == 1 && o != 1 { 0 } else { s })
        .collect()
}

/// Visits every element of `out_shape`, passing the flat offsets into each operand.
fn for_each_broadcast(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let sa = a_strides[rank - 1];
    let sb = b_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut flat = 0;
    while flat < total {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank - 1 {
            oa += idx[d] * a_strides[d];
            ob += idx[d] * b_strides[d];
        }
        for j in 0..inner {
            f(flat + j, oa + j * sa, ob + j * sb);
        }
        flat += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    op: impl Fn(T, T) -> T,
) -> Vec<T> {
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| op(x, y)).collect();
    }
    let total: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); total];
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
        out[o] = op(a[ia], b[ib]);
    });
    out
}

/// Sums `x` (shape `from`) down to the broadcast-compatible shape `to`.
pub(crate) fn sum_to<T: Scalar>(x: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return x.to_vec();
    }
    let total: usize = to.iter().product();
    let mut out = vec![T::zero(); total];
    let s_to = broadcast_strides(to, from);
    let s_from = strides(from);
    for_each_broadcast(from, &s_from, &s_to, |_, ix, io| {
        out[io] = out[io] + x[ix];
    });
    out
}

pub(crate) fn broadcast_to<T: Scalar>(x: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    broadcast_binary(x, from, x, from, to, |a, _| a)
}

pub(crate) fn upsample_nearest2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * h2 * w2..][..h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Sum over non-overlapping 2x2 windows; the adjoint of nearest upsampling.
pub(crate) fn sum_pool2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * h2 * w2..][..h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                let a = src[2 * y * w + 2 * xx];
                let b = src[2 * y * w + 2 * xx + 1];
                let c = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * w2 + xx] = (a + b) + (c + d);
            }
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat<T: Scalar>(parts: &[(&[T], &[usize])], axis: usize, out_len: usize) -> Vec<T> {
    let (outer, _, inner) = axis_split(parts[0].1, axis);
    let mut out = Vec::with_capacity(outer * out_len * inner);
    for o in 0..outer {
        for (data, shape) in parts {
            let n = shape[axis] * inner;
            out.extend_from_slice(&data[o * n..][..n]);
        }
    }
    out
}

pub(crate) fn narrow<T: Scalar>(x: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&x[(o * n + start) * inner..][..len * inner]);
    }
    out
}

/// Embeds `x` at `start` along `axis` inside zeros of length `total`.
pub(crate) fn pad_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize, start: usize, total: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); outer * total * inner];
    for o in 0..outer {
        out[(o * total + start) * inner..][..n * inner].copy_from_slice(&x[o * n * inner..][..n * inner]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_to_and_broadcast_are_adjoint() {
        let from = [2, 3, 1, 4];
        let to = [2, 3, 5, 4];
        let x: Vec<f64> = (0..24).map(|v| v as f64 * 0.5 - 3.0).collect();
        let y: Vec<f64> = (0..120).map(|v| (v as f64).sin()).collect();
        let bx = broadcast_to(&x, &from, &to);
        let sy = sum_to(&y, &to, &from);
        let lhs: f64 = bx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&sy).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn col_range_handles_stride_and_padding() {
        let g = ConvGeom {
            batch: 1,
            cin: 1,
            cout: 1,
            h: 5,
            w: 5,
            kh: 3,
            kw: 3,
            ho: 3,
            wo: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!(g.col_range(0), (1, 3));
        assert_eq!(g.col_range(1), (0, 3));
        assert_eq!(g.col_range(2), (0, 2));
    }
}
