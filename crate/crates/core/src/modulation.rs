//! Cascaded modulation: globally modulated convolution, the affine parameter
//! network (APN), spatial modulation and the per-scale GB/SB stage.

use crate::error::{Error, Result};
use crate::layers::{Conv, Linear};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Prng, Scalar, Tensor, Var};

/// Demodulation epsilon.
pub const DEMOD_EPS: f64 = 1e-8;
pub const MOD_SLOPE: f64 = 0.2;
const ACT_GAIN: f64 = std::f64::consts::SQRT_2;

/// `(style^2 @ sum_k(K^2)^T + eps)^(-1/2)`, shape `[B, Co]`.
///
/// `stat` is `[B, Ci]`: the squared style for global modulation, or the
/// spatial mean of `A^2` for spatial modulation.
fn demod_coefficients<T: Scalar>(kernel: &Var<T>, stat: &Var<T>, eps: f64) -> Result<Var<T>> {
    let [co, ci, _, _] = kernel.value().dims4("demodulate")?;
    let ksq = kernel.square()?.sum_axes(&[2, 3])?.reshape(&[co, ci])?;
    Ok(stat.matmul(&ksq.transpose()?)?.add_scalar(eps).pow_scalar(-0.5))
}

/// Modulated convolution with "same" padding.
///
/// Equivalent to convolving with `K'[b,o,i] = style[b,i] * K[o,i]` and,
/// with `demodulate`, dividing output channel `o` by
/// `sqrt(sum_{i,kh,kw} K'^2 + eps)`. `style` is `[B, Ci]`.
pub fn mod_conv2d<T: Scalar>(
    x: &Var<T>,
    kernel: &Var<T>,
    style: &Var<T>,
    demodulate: bool,
    eps: f64,
) -> Result<Var<T>> {
    let [b, ci, _, _] = x.value().dims4("mod_conv2d")?;
    let [co, kci, kh, _] = kernel.value().dims4("mod_conv2d")?;
    if style.shape() != [b, ci] || kci != ci {
        return Err(Error::shape(
            "mod_conv2d",
            format!(
                "input {:?}, kernel {:?}, style {:?}: style must be [batch, Ci]",
                x.shape(),
                kernel.shape(),
                style.shape()
            ),
        ));
    }
    let y = x.mul(&style.reshape(&[b, ci, 1, 1])?)?.conv2d(kernel, 1, kh / 2)?;
    if !demodulate {
        return Ok(y);
    }
    let d = demod_coefficients(kernel, &style.square()?, eps)?;
    y.mul(&d.reshape(&[b, co, 1, 1])?)
}

/// A globally modulated convolution layer: `style = affine(g)`, optional
/// nearest 2x upsampling, `mod_conv2d`, bias, optional leaky-ReLU.
#[derive(Clone, Debug)]
pub struct ModConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub g_dim: usize,
    pub upsample: bool,
    pub demodulate: bool,
    /// Leaky-ReLU slope, with output gain sqrt(2); `None` is linear.
    pub activation: Option<f64>,
}

impl ModConv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, g_dim: usize) -> Self {
        ModConv {
            name: name.into(),
            cin,
            cout,
            kernel: 3,
            g_dim,
            upsample: false,
            demodulate: true,
            activation: Some(MOD_SLOPE),
        }
    }

    pub fn upsampling(mut self) -> Self {
        self.upsample = true;
        self
    }

    pub fn affine(&self) -> Linear {
        Linear::new(format!("{}.affine", self.name), self.g_dim, self.cin)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut Prng) {
        self.affine().init(params, rng, 1.0, 1.0);
        let k = self.kernel;
        params.insert(
            self.weight_name(),
            Tensor::randn(&[self.cout, self.cin, k, k], 1.0, rng),
        );
        params.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
    }

    /// Parameters that make the layer an identity map: unit style, impulse
    /// kernel, zero bias. Combine with `demodulate = false` and no activation.
    pub fn identity_params<T: Scalar>(&self) -> ParamSet<T> {
        let mut p = ParamSet::new();
        p.insert(self.affine().weight_name(), Tensor::zeros(&[self.cin, self.g_dim]));
        p.insert(self.affine().bias_name(), Tensor::ones(&[self.cin]));
        p.insert(self.weight_name(), impulse_kernel(self.cout, self.cin, self.kernel));
        p.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
        p
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>, g: &Var<T>) -> Result<Var<T>> {
        let style = self.affine().forward(p, g)?;
        let x = if self.upsample { x.upsample_nearest2x()? } else { x.clone() };
        let y = mod_conv2d(&x, p.get(&self.weight_name())?, &style, self.demodulate, DEMOD_EPS)?;
        let y = y.add(&p.get(&self.bias_name())?.reshape(&[1, self.cout, 1, 1])?)?;
        Ok(match self.activation {
            Some(s) => y.leaky_relu(s).mul_scalar(ACT_GAIN),
            None => y,
        })
    }
}

/// `[Co, Ci, k, k]` kernel with a centred unit impulse on the channel diagonal.
pub fn impulse_kernel<T: Scalar>(cout: usize, cin: usize, k: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[cout, cin, k, k]);
    let c = k / 2;
    for i in 0..cout.min(cin) {
        let off = t.offset(&[i, i, c, c]);
        t.data_mut()[off] = T::one();
    }
    t
}

/// Affine parameter network: `t1 = conv1x1(X)`, `t2 = conv3x3(t1) + conv1x1(t1)`,
/// `A0 = convA(t2)`, `B = convB(t2)`. Linear, with biases.
#[derive(Clone, Debug)]
pub struct Apn {
    pub name: String,
    pub cin: usize,
    pub hidden: usize,
    pub scale_channels: usize,
    pub shift_channels: usize,
}

impl Apn {
    pub fn conv1(&self) -> Conv {
        Conv::new(format!("{}.conv1", self.name), self.cin, self.hidden, 1)
    }
    pub fn conv2_3x3(&self) -> Conv {
        Conv::new(format!("{}.conv2_3x3", self.name), self.hidden, self.hidden, 3)
    }
    pub fn conv2_1x1(&self) -> Conv {
        Conv::new(format!("{}.conv2_1x1", self.name), self.hidden, self.hidden, 1)
    }
    pub fn conv_a(&self) -> Conv {
        Conv::new(format!("{}.conv_a", self.name), self.hidden, self.scale_channels, 1)
    }
    pub fn conv_b(&self) -> Conv {
        Conv::new(format!("{}.conv_b", self.name), self.hidden, self.shift_channels, 1)
    }

    pub fn convs(&self) -> [Conv; 5] {
        [self.conv1(), self.conv2_3x3(), self.conv2_1x1(), self.conv_a(), self.conv_b()]
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut Prng) {
        self.conv1().init(params, rng, 1.0);
        self.conv2_3x3().init(params, rng, std::f64::consts::FRAC_1_SQRT_2);
        self.conv2_1x1().init(params, rng, std::f64::consts::FRAC_1_SQRT_2);
        // small heads: A starts near the global scale, B near zero
        self.conv_a().init(params, rng, 0.1);
        self.conv_b().init(params, rng, 0.1);
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let t1 = self.conv1().forward(p, x)?;
        let t2 = self.conv2_3x3().forward(p, &t1)?.add(&self.conv2_1x1().forward(p, &t1)?)?;
        Ok((self.conv_a().forward(p, &t2)?, self.conv_b().forward(p, &t2)?))
    }
}

/// Intermediate values of one spatial modulation.
pub struct SpatialModulationTrace<T> {
    pub a0: Var<T>,
    pub alpha: Var<T>,
    pub a: Var<T>,
    pub y_bar: Var<T>,
    pub y_hat: Var<T>,
    pub d: Var<T>,
    pub y_tilde: Var<T>,
    pub b: Var<T>,
    pub output: Var<T>,
}

/// `A = APN_scale(X) + fc(g)`, `Y_hat = (Y * A) conv K`,
/// `D[b,o] = (sum_i sum_k K[o,i]^2 * mean_hw(A[b,i]^2) + eps)^(-1/2)`,
/// `out = Y_hat * D + APN_shift(X) + n * strength`.
#[derive(Clone, Debug)]
pub struct SpatialModulation {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub x_channels: usize,
    pub g_dim: usize,
    pub eps: f64,
}

impl SpatialModulation {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, x_channels: usize, g_dim: usize) -> Self {
        SpatialModulation {
            name: name.into(),
            cin,
            cout,
            x_channels,
            g_dim,
            eps: DEMOD_EPS,
        }
    }

    pub fn apn(&self) -> Apn {
        Apn {
            name: format!("{}.apn", self.name),
            cin: self.x_channels,
            hidden: self.x_channels,
            scale_channels: self.cin,
            shift_channels: self.cout,
        }
    }

    pub fn fc(&self) -> Linear {
        Linear::new(format!("{}.fc", self.name), self.g_dim, self.cin)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn noise_name(&self) -> String {
        format!("{}.noise_strength", self.name)
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut Prng) {
        self.apn().init(params, rng);
        let fc = self.fc();
        params.insert(fc.weight_name(), Tensor::zeros(&[self.cin, self.g_dim]));
        params.insert(fc.bias_name(), Tensor::ones(&[self.cin]));
        params.insert(self.weight_name(), Tensor::randn(&[self.cout, self.cin, 3, 3], 1.0, rng));
        params.insert(self.noise_name(), Tensor::zeros(&[self.cout]));
    }

    /// `noise` is `[B, 1, H, W]`; `None` means no noise.
    pub fn forward<T: Scalar>(
        &self,
        p: &Bound<T>,
        y: &Var<T>,
        x: &Var<T>,
        g: &Var<T>,
        noise: Option<&Var<T>>,
    ) -> Result<SpatialModulationTrace<T>> {
        let [b, c, h, w] = y.value().dims4("spatial_modulation")?;
        let [bx, _, hx, wx] = x.value().dims4("spatial_modulation")?;
        if (bx, hx, wx) != (b, h, w) || c != self.cin {
            return Err(Error::shape(
                "spatial_modulation",
                format!("Y {:?} and X {:?} must agree in batch and spatial size", y.shape(), x.shape()),
            ));
        }
        let (a0, shift) = self.apn().forward(p, x)?;
        let alpha = self.fc().forward(p, g)?;
        let a = a0.add(&alpha.reshape(&[b, self.cin, 1, 1])?)?;
        let y_bar = y.mul(&a)?;
        let kernel = p.get(&self.weight_name())?;
        let y_hat = y_bar.conv2d(kernel, 1, 1)?;
        let stat = a.square()?.mean_axes(&[2, 3])?.reshape(&[b, self.cin])?;
        let d = demod_coefficients(kernel, &stat, self.eps)?;
        let y_tilde = y_hat.mul(&d.reshape(&[b, self.cout, 1, 1])?)?;
        let mut output = y_tilde.add(&shift)?;
        if let Some(n) = noise {
            if n.shape() != [b, 1, h, w] {
                return Err(Error::shape(
                    "spatial_modulation",
                    format!("noise must be [{b}, 1, {h}, {w}], got {:?}", n.shape()),
                ));
            }
            let strength = p.get(&self.noise_name())?.reshape(&[1, self.cout, 1, 1])?;
            output = output.add(&n.mul(&strength)?)?;
        }
        Ok(SpatialModulationTrace {
            a0,
            alpha,
            a,
            y_bar,
            y_hat,
            d,
            y_tilde,
            b: shift,
            output,
        })
    }
}

/// Global block: `X = modconv(up(F_g))`, `F_g_out = modconv(X)`. No noise.
#[derive(Clone, Debug)]
pub struct GlobalBlock {
    pub up: ModConv,
    pub conv: ModConv,
}

impl GlobalBlock {
    pub fn new(name: &str, cin: usize, cout: usize, g_dim: usize) -> Self {
        GlobalBlock {
            up: ModConv::new(format!("{name}.up"), cin, cout, g_dim).upsampling(),
            conv: ModConv::new(format!("{name}.conv"), cout, cout, g_dim),
        }
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut Prng) {
        self.up.init(params, rng);
        self.conv.init(params, rng);
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, f_g: &Var<T>, g: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let x = self.up.forward(p, f_g, g)?;
        let out = self.conv.forward(p, &x, g)?;
        Ok((x, out))
    }
}

/// Spatial block: `Y = modconv(up(F_s))`, `F_s_out = spatial_modulation(Y, X, g)`.
#[derive(Clone, Debug)]
pub struct SpatialBlock {
    pub up: ModConv,
    pub smod: SpatialModulation,
}

impl SpatialBlock {
    pub fn new(name: &str, cin: usize, cout: usize, g_dim: usize) -> Self {
        SpatialBlock {
            up: ModConv::new(format!("{name}.up"), cin, cout, g_dim).upsampling(),
            smod: SpatialModulation::new(format!("{name}.smod"), cout, cout, cout, g_dim),
        }
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut Prng) {
        self.up.init(params, rng);
        self.smod.init(params, rng);
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &Bound<T>,
        f_s: &Var<T>,
        x: &Var<T>,
        g: &Var<T>,
        noise: Option<&Var<T>>,
    ) -> Result<SpatialModulationTrace<T>> {
        let [_, _, h, w] = f_s.value().dims4("spatial_block")?;
        if x.shape().len() != 4 || x.shape()[2..] != [2 * h, 2 * w] {
            return Err(Error::shape(
                "spatial_block",
                format!("X {:?} does not match upsampled F_s {:?}", x.shape(), f_s.shape()),
            ));
        }
        let y = self.up.forward(p, f_s, g)?;
        self.smod.forward(p, &y, x, g, noise)
    }
}

/// Features leaving one cascade stage.
pub struct CascadeStageIo<T> {
    pub x: Var<T>,
    pub f_g: Var<T>,
    pub f_s: Var<T>,
}

/// One decoder scale: GB and SB in parallel, bridged by X.
#[derive(Clone, Debug)]
pub struct CascadeStage {
    pub gb: GlobalBlock,
    pub sb: SpatialBlock,
}

impl CascadeStage {
    pub fn new(name: &str, cin: usize, cout: usize, g_dim: usize) -> Self {
        CascadeStage {
            gb: GlobalBlock::new(&format!("{name}.gb"), cin, cout, g_dim),
            sb: SpatialBlock::new(&format!("{name}.sb"), cin, cout, g_dim),
        }
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut Prng) {
        self.gb.init(params, rng);
        self.sb.init(params, rng);
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &Bound<T>,
        f_g: &Var<T>,
        f_s: &Var<T>,
        g: &Var<T>,
        noise: Option<&Var<T>>,
    ) -> Result<CascadeStageIo<T>> {
        let (x, f_g) = self.gb.forward(p, f_g, g)?;
        let f_s = self.sb.forward(p, f_s, &x, g, noise)?.output;
        Ok(CascadeStageIo { x, f_g, f_s })
    }
}

/// Gaussian broadcast noise `[B, 1, H, W]` drawn from `rng`.
pub fn sample_noise<T: Scalar>(batch: usize, h: usize, w: usize, rng: &mut Prng) -> Tensor<T> {
    Tensor::randn(&[batch, 1, h, w], 1.0, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn rand(shape: &[usize], rng: &mut Prng, tape: &Tape<f64>) -> Var<f64> {
        tape.constant(Tensor::randn(shape, 1.0, rng))
    }

    #[test]
    fn unit_style_without_demod_is_plain_conv() {
        let tape = Tape::new();
        let mut rng = Prng::new(1);
        let x = rand(&[2, 3, 6, 6], &mut rng, &tape);
        let k = rand(&[4, 3, 3, 3], &mut rng, &tape);
        let s = tape.constant(Tensor::ones(&[2, 3]));
        let a = mod_conv2d(&x, &k, &s, false, 0.0).unwrap();
        let b = x.conv2d(&k, 1, 1).unwrap();
        assert!(a.value().max_abs_diff(b.value()) < 1e-12);
    }

    #[test]
    fn style_length_checked() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 3, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
        let s = tape.constant(Tensor::ones(&[1, 2]));
        assert!(mod_conv2d(&x, &k, &s, true, 1e-8).is_err());
    }

    #[test]
    fn apn_zero_params_give_zero() {
        let apn = Apn {
            name: "apn".into(),
            cin: 3,
            hidden: 3,
            scale_channels: 2,
            shift_channels: 2,
        };
        let mut params = ParamSet::new();
        apn.init::<f64>(&mut params, &mut Prng::new(2));
        for (_, t) in params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let x = rand(&[1, 3, 8, 8], &mut Prng::new(3), &tape);
        let (a0, b) = apn.forward(&params.bind(&tape, false), &x).unwrap();
        assert_eq!(a0.shape(), [1, 2, 8, 8]);
        assert!(a0.value().data().iter().chain(b.value().data()).all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_identity_case() {
        let sm = SpatialModulation::new("sm", 1, 1, 2, 4);
        let mut params = ParamSet::new();
        let mut rng = Prng::new(4);
        sm.init::<f64>(&mut params, &mut rng);
        for name in sm.apn().convs().iter().flat_map(|c| [c.weight_name(), c.bias_name()]) {
            params.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
        params.insert(sm.weight_name(), impulse_kernel(1, 1, 3));
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let y = rand(&[2, 1, 8, 8], &mut rng, &tape);
        let x = rand(&[2, 2, 8, 8], &mut rng, &tape);
        let g = rand(&[2, 4], &mut rng, &tape);
        let trace = sm.forward(&p, &y, &x, &g, None).unwrap();
        let expected = y.value().map(|v| v / (1.0f64 + 1e-8).sqrt());
        assert!(trace.output.value().max_abs_diff(&expected) < 1e-15);
        assert!(trace.d.value().data().iter().all(|&d| d > 0.0 && d.is_finite()));
        assert_eq!(trace.d.shape(), [2, 1]);
    }

    #[test]
    fn spatial_rejects_mismatched_x() {
        let sm = SpatialModulation::new("sm", 2, 2, 2, 4);
        let mut params = ParamSet::new();
        let mut rng = Prng::new(4);
        sm.init::<f64>(&mut params, &mut rng);
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let y = rand(&[1, 2, 8, 8], &mut rng, &tape);
        let x = rand(&[1, 2, 4, 4], &mut rng, &tape);
        let g = rand(&[1, 4], &mut rng, &tape);
        assert!(sm.forward(&p, &y, &x, &g, None).is_err());
    }

    #[test]
    fn global_block_identity_configuration() {
        let mut gb = GlobalBlock::new("gb", 2, 2, 3);
        for m in [&mut gb.up, &mut gb.conv] {
            m.demodulate = false;
            m.activation = None;
        }
        let mut params = gb.up.identity_params::<f64>();
        params.extend_prefixed("", &gb.conv.identity_params());
        let tape = Tape::new();
        let mut rng = Prng::new(5);
        let f = rand(&[1, 2, 4, 4], &mut rng, &tape);
        let g = rand(&[1, 3], &mut rng, &tape);
        let (x, out) = gb.forward(&params.bind(&tape, false), &f, &g).unwrap();
        assert_eq!(x.value(), f.upsample_nearest2x().unwrap().value());
        assert_eq!(out.value(), x.value());
    }

    #[test]
    fn cascade_shapes_double() {
        let stages: Vec<CascadeStage> = (0..3).map(|i| CascadeStage::new(&format!("s{i}"), 3, 3, 4)).collect();
        let mut params = ParamSet::new();
        let mut rng = Prng::new(6);
        for s in &stages {
            s.init::<f64>(&mut params, &mut rng);
        }
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let mut f_g = rand(&[1, 3, 4, 4], &mut rng, &tape);
        let mut f_s = f_g.clone();
        let g = rand(&[1, 4], &mut rng, &tape);
        for s in &stages {
            let io = s.forward(&p, &f_g, &f_s, &g, None).unwrap();
            f_g = io.f_g;
            f_s = io.f_s;
        }
        assert_eq!(f_s.shape(), [1, 3, 32, 32]);
        assert_eq!(f_g.shape(), [1, 3, 32, 32]);
    }

    #[test]
    fn spatial_block_is_deterministic_without_noise() {
        let sb = SpatialBlock::new("sb", 2, 2, 4);
        let mut params = ParamSet::new();
        let mut rng = Prng::new(7);
        sb.init::<f64>(&mut params, &mut rng);
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let f = rand(&[1, 2, 8, 8], &mut rng, &tape);
        let x = rand(&[1, 2, 16, 16], &mut rng, &tape);
        let g = rand(&[1, 4], &mut rng, &tape);
        let n = tape.constant(sample_noise(1, 16, 16, &mut rng));
        let a = sb.forward(&p, &f, &x, &g, Some(&n)).unwrap().output;
        let b = sb.forward(&p, &f, &x, &g, Some(&n)).unwrap().output;
        assert_eq!(a.shape(), [1, 2, 16, 16]);
        assert_eq!(a.value(), b.value());
    }
}
