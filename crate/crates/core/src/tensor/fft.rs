//! 2-D real FFT planes on top of `rustfft`.
//!
//! Convention (used everywhere in the crate): the forward transform is
//! unnormalized, `X[k,l] = sum_{h,w} x[h,w] exp(-2*pi*i*(k*h/H + l*w/W))`, and
//! the inverse carries the full `1/(H*W)` factor. Only the `W/2 + 1`
//! non-negative column frequencies are stored.

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use super::Scalar;

pub(crate) fn is_pow2(n: usize) -> bool {
    n > 0 && n & (n - 1) == 0
}

/// In-place unnormalized 2-D complex FFT over an `h x w` row-major plane.
fn fft2_inplace<T: Scalar>(buf: &mut [Complex<T>], h: usize, w: usize, dir: FftDirection) {
    let mut planner = FftPlanner::<T>::new();
    let row = planner.plan_fft(w, dir);
    row.process(buf);
    let col = planner.plan_fft(h, dir);
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for c in 0..w {
        for r in 0..h {
            column[r] = buf[r * w + c];
        }
        col.process(&mut column);
        for r in 0..h {
            buf[r * w + c] = column[r];
        }
    }
}

fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Forward real 2-D FFT of one plane; returns `h x (w/2+1)` bins.
pub fn rfft2_plane<T: Scalar>(x: &[T], h: usize, w: usize) -> Vec<Complex<T>> {
    let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft2_inplace(&mut buf, h, w, FftDirection::Forward);
    let wh = half_width(w);
    let mut out = Vec::with_capacity(h * wh);
    for r in 0..h {
        out.extend_from_slice(&buf[r * w..][..wh]);
    }
    out
}

/// Adjoint of [`rfft2_plane`] under the real inner product on (re, im):
/// `Re(sum_{k,l in half} G[k,l] exp(+i*theta))`.
pub(crate) fn rfft2_adjoint_plane<T: Scalar>(g: &[Complex<T>], h: usize, w: usize) -> Vec<T> {
    let wh = half_width(w);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
    for r in 0..h {
        buf[r * w..][..wh].copy_from_slice(&g[r * wh..][..wh]);
    }
    fft2_inplace(&mut buf, h, w, FftDirection::Inverse);
    buf.iter().map(|c| c.re).collect()
}

/// Inverse real 2-D FFT (`1/(h*w)` normalization) from `h x (w/2+1)` bins.
///
/// Imaginary parts that Hermitian symmetry forces to zero (DC and Nyquist
/// columns) are ignored, matching the usual C2R semantics.
pub fn irfft2_plane<T: Scalar>(z: &[Complex<T>], h: usize, w: usize) -> Vec<T> {
    let wh = half_width(w);
    let mut planner = FftPlanner::<T>::new();
    // Inverse along columns of the half spectrum.
    let col = planner.plan_fft(h, FftDirection::Inverse);
    let mut half = z.to_vec();
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for c in 0..wh {
        for r in 0..h {
            column[r] = half[r * wh + c];
        }
        col.process(&mut column);
        for r in 0..h {
            half[r * wh + c] = column[r];
        }
    }
    // Complex-to-real along rows through the Hermitian completion.
    let row = planner.plan_fft(w, FftDirection::Inverse);
    let scale = T::one() / T::lit((h * w) as f64);
    let mut full = vec![Complex::new(T::zero(), T::zero()); w];
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let src = &half[r * wh..][..wh];
        for l in 0..w {
            full[l] = if l < wh { src[l] } else { src[w - l].conj() };
        }
        row.process(&mut full);
        out.extend(full.iter().map(|c| c.re * scale));
    }
    out
}

/// Adjoint of [`irfft2_plane`]: `c_l / (h*w) * rfft2(g)`, with `c_l = 1` on
/// the DC and Nyquist columns and 2 elsewhere.
pub(crate) fn irfft2_adjoint_plane<T: Scalar>(g: &[T], h: usize, w: usize) -> Vec<Complex<T>> {
    let wh = half_width(w);
    let mut spec = rfft2_plane(g, h, w);
    let base = T::one() / T::lit((h * w) as f64);
    for r in 0..h {
        for l in 0..wh {
            let c = if l == 0 || 2 * l == w { base } else { base + base };
            spec[r * wh + l] = spec[r * wh + l] * c;
        }
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Prng;

    fn dot_c(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
    }

    fn dot_r(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn rand_vec(n: usize, rng: &mut Prng) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    fn rand_spec(n: usize, rng: &mut Prng) -> Vec<Complex<f64>> {
        (0..n).map(|_| Complex::new(rng.normal(), rng.normal())).collect()
    }

    #[test]
    fn adjoint_identities_hold() {
        let mut rng = Prng::new(3);
        for &(h, w) in &[(4, 8), (8, 4), (2, 2), (8, 8)] {
            let x = rand_vec(h * w, &mut rng);
            let g = rand_spec(h * (w / 2 + 1), &mut rng);
            let lhs = dot_c(&rfft2_plane(&x, h, w), &g);
            let rhs = dot_r(&x, &rfft2_adjoint_plane(&g, h, w));
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{h}x{w}");

            let y = rand_vec(h * w, &mut rng);
            let lhs = dot_r(&irfft2_plane(&g, h, w), &y);
            let rhs = dot_c(&g, &irfft2_adjoint_plane(&y, h, w));
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{h}x{w}");
        }
    }

    #[test]
    fn constant_plane_has_only_dc() {
        let (h, w) = (4, 8);
        let spec = rfft2_plane(&vec![2.5f64; h * w], h, w);
        assert!((spec[0].re - 2.5 * 32.0).abs() < 1e-12);
        assert!(spec[1..].iter().all(|c| c.norm() < 1e-12));
    }
}
