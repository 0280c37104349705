//! Plain convolution and fully connected layers.

use crate::error::Result;
use crate::params::{init, Bound, ParamSet};
use crate::tensor::{Prng, Scalar, Tensor, Var};

/// Gain for weights feeding a leaky-ReLU with slope 0.2.
pub const LRELU_GAIN: f64 = 1.386_750_490_563_072_9; // sqrt(2 / (1 + 0.2^2))

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut Prng, gain: f64) {
        let shape = [self.cout, self.cin, self.kernel, self.kernel];
        params.insert(self.weight_name(), init::fan_in_normal(&shape, gain, rng));
        if self.bias {
            params.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = x.conv2d(p.get(&self.weight_name())?, self.stride, self.kernel / 2)?;
        if self.bias {
            y.add(&p.get(&self.bias_name())?.reshape(&[1, self.cout, 1, 1])?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut Prng, gain: f64, bias: f64) {
        params.insert(
            self.weight_name(),
            init::fan_in_normal(&[self.dout, self.din], gain, rng),
        );
        params.insert(self.bias_name(), Tensor::full(&[self.dout], T::lit(bias)));
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.fc(p.get(&self.weight_name())?, Some(p.get(&self.bias_name())?))
    }
}
