//! Fast Fourier convolution and the multi-scale FFC encoder.
//!
//! An FFC layer splits its channels into a local branch (ordinary 3x3
//! convolutions) and a global branch whose core is a spectral transform:
//! `1x1 conv -> rfft2 -> stack re/im as 2C channels -> 1x1 conv + lrelu(0.2)
//! -> irfft2 -> 1x1 conv`. The spectral transform sees the whole image, so
//! every FFC layer has an image-wide receptive field.

use crate::error::{Error, Result};
use crate::layers::{Conv, Linear, LRELU_GAIN};
use crate::params::{init, Bound, ParamSet};
use crate::tensor::{concat, Prng, Scalar, Tensor, Var};

pub const FFC_SLOPE: f64 = 0.2;
/// Floor on the style-code norm before division.
pub const STYLE_NORM_EPS: f64 = 1e-12;

/// Splits `width` channels into `(local, global)` for a global ratio in `[0, 1)`.
pub fn split_channels(width: usize, global_ratio: f64) -> (usize, usize) {
    let global = ((width as f64) * global_ratio).floor() as usize;
    let global = global.min(width.saturating_sub(1));
    (width - global, global)
}

/// Spectral (global) branch of an FFC layer. Bias-free.
#[derive(Clone, Debug)]
pub struct SpectralTransform {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    /// Leaky-ReLU after the frequency-domain 1x1 conv.
    pub activation: bool,
    /// Optional per-bin complex gain of spatial size `(h, w)`, applied
    /// right after the forward FFT.
    pub filter: Option<(usize, usize)>,
}

impl SpectralTransform {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        SpectralTransform {
            name: name.into(),
            cin,
            cout,
            activation: true,
            filter: None,
        }
    }

    fn pre(&self) -> String {
        format!("{}.pre.weight", self.name)
    }
    fn freq(&self) -> String {
        format!("{}.freq.weight", self.name)
    }
    fn post(&self) -> String {
        format!("{}.post.weight", self.name)
    }
    fn filter_name(&self) -> String {
        format!("{}.filter", self.name)
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut Prng) {
        params.insert(self.pre(), init::fan_in_normal(&[self.cout, self.cin, 1, 1], 1.0, rng));
        params.insert(
            self.freq(),
            init::fan_in_normal(&[2 * self.cout, 2 * self.cout, 1, 1], LRELU_GAIN, rng),
        );
        params.insert(self.post(), init::fan_in_normal(&[self.cout, self.cout, 1, 1], 1.0, rng));
        if let Some((h, w)) = self.filter {
            let mut f = Tensor::zeros(&[1, 2 * self.cout, h, w / 2 + 1]);
            // unit real gain
            let plane = h * (w / 2 + 1);
            f.data_mut()[..self.cout * plane].fill(T::one());
            params.insert(self.filter_name(), f);
        }
    }

    /// Sets every 1x1 weight to the identity (requires `cin == cout`).
    pub fn identity_params<T: Scalar>(&self) -> ParamSet<T> {
        let mut p = ParamSet::new();
        p.insert(self.pre(), eye_1x1(self.cout, self.cin));
        p.insert(self.freq(), eye_1x1(2 * self.cout, 2 * self.cout));
        p.insert(self.post(), eye_1x1(self.cout, self.cout));
        p
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let [_, c, h, w] = x.value().dims4("spectral_transform")?;
        if c != self.cin {
            return Err(Error::shape(
                "spectral_transform",
                format!("expected {} channels, got {c}", self.cin),
            ));
        }
        let t = x.conv2d(p.get(&self.pre())?, 1, 0)?;
        let mut z = t.rfft2()?;
        if self.filter.is_some() {
            z = complex_mul(&z, p.get(&self.filter_name())?, self.cout)?;
        }
        z = z.conv2d(p.get(&self.freq())?, 1, 0)?;
        if self.activation {
            z = z.leaky_relu(FFC_SLOPE);
        }
        let y = z.irfft2(w)?;
        debug_assert_eq!(y.shape()[2], h);
        y.conv2d(p.get(&self.post())?, 1, 0)
    }
}

/// `[Co, Ci, 1, 1]` identity (zero-padded when the sizes differ).
pub fn eye_1x1<T: Scalar>(cout: usize, cin: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[cout, cin, 1, 1]);
    for i in 0..cout.min(cin) {
        t.data_mut()[i * cin + i] = T::one();
    }
    t
}

/// Complex product of stacked spectra `[B, 2C, H, Wh]` and `[1, 2C, H, Wh]`.
fn complex_mul<T: Scalar>(z: &Var<T>, f: &Var<T>, c: usize) -> Result<Var<T>> {
    let (zr, zi) = (z.narrow(1, 0, c)?, z.narrow(1, c, c)?);
    let (fr, fi) = (f.narrow(1, 0, c)?, f.narrow(1, c, c)?);
    let re = zr.mul(&fr)?.sub(&zi.mul(&fi)?)?;
    let im = zr.mul(&fi)?.add(&zi.mul(&fr)?)?;
    concat(&[&re, &im], 1)
}

/// One FFC layer with optional stride-2 downsampling.
///
/// `y_local = act(l2l(x_local) + g2l(x_global))`,
/// `y_global = act(l2g(x_local) + spectral(x_global))`; in the strided
/// variant the spectral input is 2x2 average-pooled first.
#[derive(Clone, Debug)]
pub struct FfcBlock {
    pub name: String,
    pub in_local: usize,
    pub in_global: usize,
    pub out_local: usize,
    pub out_global: usize,
    pub stride: usize,
    /// Leaky-ReLU slope; `None` leaves the block linear.
    pub activation: Option<f64>,
}

impl FfcBlock {
    pub fn new(name: impl Into<String>, input: (usize, usize), output: (usize, usize), stride: usize) -> Self {
        FfcBlock {
            name: name.into(),
            in_local: input.0,
            in_global: input.1,
            out_local: output.0,
            out_global: output.1,
            stride,
            activation: Some(FFC_SLOPE),
        }
    }

    pub fn l2l(&self) -> Option<Conv> {
        (self.in_local > 0 && self.out_local > 0)
            .then(|| Conv::new(format!("{}.l2l", self.name), self.in_local, self.out_local, 3).stride(self.stride).no_bias())
    }

    pub fn g2l(&self) -> Option<Conv> {
        (self.in_global > 0 && self.out_local > 0)
            .then(|| Conv::new(format!("{}.g2l", self.name), self.in_global, self.out_local, 3).stride(self.stride).no_bias())
    }

    pub fn l2g(&self) -> Option<Conv> {
        (self.in_local > 0 && self.out_global > 0)
            .then(|| Conv::new(format!("{}.l2g", self.name), self.in_local, self.out_global, 3).stride(self.stride).no_bias())
    }

    pub fn g2g(&self) -> Option<SpectralTransform> {
        (self.in_global > 0 && self.out_global > 0)
            .then(|| SpectralTransform::new(format!("{}.g2g", self.name), self.in_global, self.out_global))
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut Prng) {
        // Two paths feed each output branch; halve the variance of each.
        let gain = LRELU_GAIN / std::f64::consts::SQRT_2;
        for conv in [self.l2l(), self.g2l(), self.l2g()].into_iter().flatten() {
            conv.init(params, rng, gain);
        }
        if let Some(st) = self.g2g() {
            st.init(params, rng);
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &Bound<T>,
        x_local: Option<&Var<T>>,
        x_global: Option<&Var<T>>,
    ) -> Result<(Option<Var<T>>, Option<Var<T>>)> {
        check_branch("ffc_block local", x_local, self.in_local)?;
        check_branch("ffc_block global", x_global, self.in_global)?;
        if let (Some(l), Some(g)) = (x_local, x_global) {
            if l.shape()[2..] != g.shape()[2..] {
                return Err(Error::shape(
                    "ffc_block",
                    format!("local branch {:?} and global branch {:?} differ spatially", l.shape(), g.shape()),
                ));
            }
        }
        let apply = |conv: Option<Conv>, x: Option<&Var<T>>| -> Result<Option<Var<T>>> {
            match (conv, x) {
                (Some(c), Some(x)) => c.forward(p, x).map(Some),
                _ => Ok(None),
            }
        };
        let spectral = match (self.g2g(), x_global) {
            (Some(st), Some(xg)) => {
                let input = if self.stride == 2 { xg.avg_pool2x()? } else { xg.clone() };
                Some(st.forward(p, &input)?)
            }
            _ => None,
        };
        let local = sum_terms(apply(self.l2l(), x_local)?, apply(self.g2l(), x_global)?)?;
        let global = sum_terms(apply(self.l2g(), x_local)?, spectral)?;
        let act = |v: Option<Var<T>>| v.map(|v| match self.activation {
            Some(s) => v.leaky_relu(s),
            None => v,
        });
        Ok((act(local), act(global)))
    }
}

fn check_branch<T: Scalar>(op: &'static str, x: Option<&Var<T>>, channels: usize) -> Result<()> {
    match (x, channels) {
        (None, 0) => Ok(()),
        (Some(v), c) if v.shape().len() == 4 && v.shape()[1] == c && c > 0 => Ok(()),
        (Some(v), c) => Err(Error::shape(op, format!("expected {c} channels, got {:?}", v.shape()))),
        (None, c) => Err(Error::shape(op, format!("missing branch with {c} channels"))),
    }
}

fn sum_terms<T: Scalar>(a: Option<Var<T>>, b: Option<Var<T>>) -> Result<Option<Var<T>>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(a.add(&b)?),
        (a, None) => a,
        (None, b) => b,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub in_channels: usize,
    /// `widths[i]` is the channel count at resolution `resolution / 2^i`;
    /// `widths.len() - 1` is the number of scales L.
    pub widths: Vec<usize>,
    pub global_ratio: f64,
    pub style_dim: usize,
}

impl EncoderConfig {
    pub fn num_scales(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_scales();
        if l < 2 {
            return Err(Error::Config(format!("encoder needs at least 2 scales, got {l}")));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.global_ratio) {
            return Err(Error::Config(format!("global_ratio {} outside [0, 1)", self.global_ratio)));
        }
        if self.resolution % (1 << l) != 0 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "resolution {} must be a power of two divisible by 2^{l}",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// Multi-scale features and the unit-norm style code.
pub struct EncoderFeatures<T> {
    /// `features[i]` is F_e^(i+1), at `resolution / 2^(i+1)`.
    pub features: Vec<Var<T>>,
    pub style: Var<T>,
}

/// FFC encoder: a stride-1 FFC stem, then L stride-2 FFC blocks with 1x1
/// strided shortcuts, then `s = l2_normalize(fc(flatten(F_e^(L))))`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stem: FfcBlock,
    pub blocks: Vec<FfcBlock>,
    pub shortcuts: Vec<Conv>,
    pub style_fc: Linear,
}

impl Encoder {
    pub fn new(name: &str, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let split = |w| split_channels(w, config.global_ratio);
        let stem = FfcBlock::new(format!("{name}.stem"), (config.in_channels, 0), split(config.widths[0]), 1);
        let mut blocks = Vec::new();
        let mut shortcuts = Vec::new();
        for i in 1..config.widths.len() {
            blocks.push(FfcBlock::new(
                format!("{name}.block{i}"),
                split(config.widths[i - 1]),
                split(config.widths[i]),
                2,
            ));
            shortcuts.push(
                Conv::new(format!("{name}.block{i}.shortcut"), config.widths[i - 1], config.widths[i], 1)
                    .stride(2)
                    .no_bias(),
            );
        }
        let l = config.num_scales();
        let side = config.resolution >> l;
        let style_fc = Linear::new(format!("{name}.style_fc"), config.widths[l] * side * side, config.style_dim);
        Ok(Encoder {
            config,
            stem,
            blocks,
            shortcuts,
            style_fc,
        })
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut Prng) {
        self.stem.init(params, rng);
        for (b, s) in self.blocks.iter().zip(&self.shortcuts) {
            b.init(params, rng);
            s.init(params, rng, 1.0);
        }
        self.style_fc.init(params, rng, 1.0, 0.0);
    }

    /// Encodes `[x * (1 - m), m]`. `image` is `[B, 3, H, W]`, `mask` is `[B, 1, H, W]` with 1 in the hole.
    pub fn encode<T: Scalar>(&self, p: &Bound<T>, image: &Var<T>, mask: &Var<T>) -> Result<EncoderFeatures<T>> {
        let [b, c, h, w] = image.value().dims4("encode")?;
        let l = self.config.num_scales();
        if h % (1 << l) != 0 || w % (1 << l) != 0 {
            return Err(Error::shape(
                "encode",
                format!("spatial size {h}x{w} is not divisible by 2^{l}"),
            ));
        }
        if h != self.config.resolution || w != self.config.resolution {
            return Err(Error::shape(
                "encode",
                format!("configured for {0}x{0}, got {h}x{w}", self.config.resolution),
            ));
        }
        if mask.shape() != [b, 1, h, w] || c + 1 != self.config.in_channels {
            return Err(Error::shape(
                "encode",
                format!("image {:?} with mask {:?}", image.shape(), mask.shape()),
            ));
        }
        let known = mask.neg().add_scalar(1.0);
        let input = concat(&[&image.mul(&known)?, mask], 1)?;

        let (l0, g0) = self.stem.forward(p, Some(&input), None)?;
        let mut x = join(l0, g0)?;
        let mut features = Vec::with_capacity(l);
        for (block, shortcut) in self.blocks.iter().zip(&self.shortcuts) {
            let (xl, xg) = split_var(&x, block.in_local, block.in_global)?;
            let (yl, yg) = block.forward(p, xl.as_ref(), xg.as_ref())?;
            x = join(yl, yg)?.add(&shortcut.forward(p, &x)?)?;
            features.push(x.clone());
        }
        let flat = features.last().expect("at least two scales").flatten2()?;
        let style = self.style_fc.forward(p, &flat)?.l2_normalize(STYLE_NORM_EPS)?;
        Ok(EncoderFeatures { features, style })
    }
}

fn join<T: Scalar>(local: Option<Var<T>>, global: Option<Var<T>>) -> Result<Var<T>> {
    match (local, global) {
        (Some(l), Some(g)) => concat(&[&l, &g], 1),
        (Some(v), None) | (None, Some(v)) => Ok(v),
        (None, None) => Err(Error::InvalidArgument("FFC block produced no output".into())),
    }
}

fn split_var<T: Scalar>(x: &Var<T>, local: usize, global: usize) -> Result<(Option<Var<T>>, Option<Var<T>>)> {
    let l = (local > 0).then(|| x.narrow(1, 0, local)).transpose()?;
    let g = (global > 0).then(|| x.narrow(1, local, global)).transpose()?;
    Ok((l, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn bound(params: &ParamSet<f64>, tape: &Tape<f64>) -> Bound<f64> {
        params.bind(tape, false)
    }

    #[test]
    fn split_is_exact() {
        assert_eq!(split_channels(16, 0.5), (8, 8));
        assert_eq!(split_channels(7, 0.5), (4, 3));
        assert_eq!(split_channels(5, 0.0), (5, 0));
        assert_eq!(split_channels(1, 0.9), (1, 0));
    }

    #[test]
    fn identity_spectral_transform_roundtrips() {
        let st = SpectralTransform {
            activation: false,
            ..SpectralTransform::new("st", 2, 2)
        };
        let params = st.identity_params::<f64>();
        let tape = Tape::new();
        let mut rng = Prng::new(1);
        let x = tape.constant(Tensor::randn(&[2, 2, 8, 4], 1.0, &mut rng));
        let y = st.forward(&bound(&params, &tape), &x).unwrap();
        assert!(y.value().max_abs_diff(x.value()) < 1e-10);
    }

    #[test]
    fn spectral_rejects_non_power_of_two() {
        let st = SpectralTransform::new("st", 1, 1);
        let params = st.identity_params::<f64>();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 6, 8]));
        let err = st.forward(&bound(&params, &tape), &x).unwrap_err();
        assert!(matches!(err, Error::NotPowerOfTwo { .. }), "{err}");
    }

    #[test]
    fn zero_ratio_block_is_plain_conv() {
        let block = FfcBlock::new("b", (3, 0), (4, 0), 1);
        assert!(block.g2l().is_none() && block.l2g().is_none() && block.g2g().is_none());
        let mut params = ParamSet::new();
        let mut rng = Prng::new(2);
        block.init::<f64>(&mut params, &mut rng);
        let tape = Tape::new();
        let p = bound(&params, &tape);
        let x = tape.constant(Tensor::randn(&[1, 3, 8, 8], 1.0, &mut rng));
        let (yl, yg) = block.forward(&p, Some(&x), None).unwrap();
        assert!(yg.is_none());
        let reference = x.conv2d(p.get("b.l2l.weight").unwrap(), 1, 1).unwrap().leaky_relu(0.2);
        assert_eq!(yl.unwrap().value(), reference.value());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let block = FfcBlock::new("b", (2, 2), (2, 2), 2);
        let mut params = ParamSet::new();
        block.init::<f64>(&mut params, &mut Prng::new(3));
        let tape = Tape::new();
        let p = bound(&params, &tape);
        let z = tape.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let (yl, yg) = block.forward(&p, Some(&z), Some(&z)).unwrap();
        assert!(yl.unwrap().value().data().iter().all(|&v| v == 0.0));
        assert!(yg.unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_branches_rejected() {
        let block = FfcBlock::new("b", (2, 2), (2, 2), 1);
        let mut params = ParamSet::new();
        block.init::<f64>(&mut params, &mut Prng::new(3));
        let tape = Tape::new();
        let p = bound(&params, &tape);
        let a = tape.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let b = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(block.forward(&p, Some(&a), Some(&b)).is_err());
    }

    fn small_encoder() -> Encoder {
        Encoder::new(
            "enc",
            EncoderConfig {
                resolution: 32,
                in_channels: 4,
                widths: vec![4, 6, 8, 8],
                global_ratio: 0.5,
                style_dim: 5,
            },
        )
        .unwrap()
    }

    #[test]
    fn encoder_shapes_and_unit_style() {
        let enc = small_encoder();
        let mut params = ParamSet::new();
        let mut rng = Prng::new(4);
        enc.init::<f64>(&mut params, &mut rng);
        let tape = Tape::new();
        let p = bound(&params, &tape);
        let img = tape.constant(Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng));
        let mask = tape.constant(Tensor::zeros(&[2, 1, 32, 32]));
        let out = enc.encode(&p, &img, &mask).unwrap();
        let sizes: Vec<usize> = out.features.iter().map(|f| f.shape()[2]).collect();
        assert_eq!(sizes, vec![16, 8, 4]);
        assert_eq!(out.features[2].shape(), [2, 8, 4, 4]);
        let s = out.style.value();
        for b in 0..2 {
            let n: f64 = s.data()[b * 5..(b + 1) * 5].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_rejects_wrong_resolution() {
        let enc = small_encoder();
        let mut params = ParamSet::new();
        enc.init::<f64>(&mut params, &mut Prng::new(4));
        let tape = Tape::new();
        let p = bound(&params, &tape);
        let img = tape.constant(Tensor::zeros(&[1, 3, 20, 20]));
        let mask = tape.constant(Tensor::zeros(&[1, 1, 20, 20]));
        assert!(enc.encode(&p, &img, &mask).is_err());
    }

    #[test]
    fn full_hole_ignores_image_content() {
        let enc = small_encoder();
        let mut params = ParamSet::new();
        let mut rng = Prng::new(5);
        enc.init::<f64>(&mut params, &mut rng);
        let tape = Tape::new();
        let p = bound(&params, &tape);
        let mask = tape.constant(Tensor::ones(&[1, 1, 32, 32]));
        let img = tape.constant(Tensor::randn(&[1, 3, 32, 32], 1.0, &mut rng));
        let zero = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let a = enc.encode(&p, &img, &mask).unwrap();
        let b = enc.encode(&p, &zero, &mask).unwrap();
        for (fa, fb) in a.features.iter().zip(&b.features) {
            assert_eq!(fa.value(), fb.value());
        }
    }
}
