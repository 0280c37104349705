//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Moment buffers keyed like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = |p: &ParamSet<T>| {
            let mut z = ParamSet::new();
            for (k, t) in p.iter() {
                z.insert(k.clone(), Tensor::zeros(t.shape()));
            }
            z
        };
        AdamState {
            config,
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }

    /// One update of every parameter in `params` using `grads`.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() || self.m.get(name)?.shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let m = self.m.get_mut(name)?;
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            }
            let v = self.v.get_mut(name)?;
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let (m, v) = (self.m.get(name)?, self.v.get(name)?);
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pi = *pi - lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_f64(&[1], &[v]).unwrap());
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.0);
        let mut opt = AdamState::new(AdamConfig::default(), &p);
        opt.update(&mut p, &single(1.0)).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = single(3.0);
        let mut opt = AdamState::new(
            AdamConfig {
                beta1: 0.9,
                ..AdamConfig::default()
            },
            &p,
        );
        opt.update(&mut p, &single(2.0)).unwrap();
        let (m1, v1) = (opt.m.get("x").unwrap().data()[0], opt.v.get("x").unwrap().data()[0]);
        opt.update(&mut p, &single(0.0)).unwrap();
        assert!((opt.m.get("x").unwrap().data()[0] - 0.9 * m1).abs() < 1e-15);
        assert!((opt.v.get("x").unwrap().data()[0] - 0.99 * v1).abs() < 1e-15);

        let mut q = single(3.0);
        let mut fresh = AdamState::new(AdamConfig::default(), &q);
        fresh.update(&mut q, &single(0.0)).unwrap();
        assert_eq!(q, single(3.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(0.0);
        let mut opt = AdamState::new(AdamConfig::default(), &p);
        let mut g = ParamSet::new();
        g.insert("x", Tensor::zeros(&[2]));
        assert!(opt.update(&mut p, &g).is_err());
        assert_eq!(opt.step, 0);
    }
}
