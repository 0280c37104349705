use crate::error::{Error, Result};
use crate::imageio::GrayImage;
use crate::params::ParamSet;
use crate::tensor::{Prng, Scalar, Tape, Tensor};

use super::Generator;

/// Mean absolute activation over channels for batch item `sample` of a
/// `[B, C, H, W]` feature map. Returns `H * W` values.
pub fn feature_magnitude<T: Scalar>(feature: &Tensor<T>, sample: usize) -> Result<Vec<f64>> {
    let [b, c, h, w] = feature.dims4("feature_magnitude")?;
    if sample >= b {
        return Err(Error::InvalidArgument(format!("sample {sample} out of range for batch {b}")));
    }
    let plane = h * w;
    let base = sample * c * plane;
    let data = feature.data();
    Ok((0..plane)
        .map(|i| (0..c).map(|ch| data[base + ch * plane + i].as_f64().abs()).sum::<f64>() / c as f64)
        .collect())
}

/// Min-max normalisation to `0..=255`; a constant map becomes uniform 128.
pub fn normalize_to_u8(values: &[f64], width: usize, height: usize) -> GrayImage {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi > lo {
        values
            .iter()
            .map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128; values.len()]
    };
    GrayImage {
        width,
        height,
        pixels,
    }
}

/// Feature magnitudes of the encoder, global and spatial branches at one scale.
#[derive(Clone, Debug)]
pub struct FeatureScale {
    pub scale: usize,
    pub width: usize,
    pub height: usize,
    pub encoder: Vec<f64>,
    pub global: Vec<f64>,
    pub spatial: Vec<f64>,
}

impl FeatureScale {
    pub fn images(&self) -> [(&'static str, GrayImage); 3] {
        let img = |v: &[f64]| normalize_to_u8(v, self.width, self.height);
        [
            ("encoder", img(&self.encoder)),
            ("global", img(&self.global)),
            ("spatial", img(&self.spatial)),
        ]
    }
}

impl Generator {
    /// Scales at which encoder and decoder features coexist: `1..L`.
    pub fn feature_scales(&self) -> std::ops::Range<usize> {
        1..self.config.num_scales()
    }

    /// Per-branch feature magnitudes of the first batch item at `scale`
    /// (spatial size `resolution / 2^scale`). F_g and F_s are taken after the
    /// decoder stage that reaches that scale.
    pub fn dump_features<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        image: &Tensor<T>,
        mask: &Tensor<T>,
        z: &Tensor<T>,
        scale: usize,
        noise_rng: Option<&mut Prng>,
    ) -> Result<FeatureScale> {
        let l = self.config.num_scales();
        if !self.feature_scales().contains(&scale) {
            return Err(Error::InvalidArgument(format!(
                "feature scale {scale} out of range; valid scales are 1..={}",
                l - 1
            )));
        }
        let tape = Tape::new();
        tape.no_grad(|| {
            let p = params.bind(&tape, false);
            let out = self.forward(
                &p,
                &tape.constant(image.clone()),
                &tape.constant(mask.clone()),
                &tape.constant(z.clone()),
                noise_rng,
            )?;
            let enc = out.encoder.features[scale - 1].value();
            let stage = &out.stages[l - 1 - scale];
            let side = self.config.resolution >> scale;
            Ok(FeatureScale {
                scale,
                width: side,
                height: side,
                encoder: feature_magnitude(enc, 0)?,
                global: feature_magnitude(stage.f_g.value(), 0)?,
                spatial: feature_magnitude(stage.f_s.value(), 0)?,
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_uniform_gray() {
        let img = normalize_to_u8(&[0.7; 16], 4, 4);
        assert!(img.pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn extremes_map_to_0_and_255() {
        let img = normalize_to_u8(&[2.0, -1.0, 0.5, 0.0], 2, 2);
        assert_eq!(img.pixels, vec![255, 0, 128, 85]);
    }

    #[test]
    fn magnitude_averages_channels() {
        let t = Tensor::<f64>::from_f64(&[1, 2, 1, 2], &[1.0, -2.0, -3.0, 4.0]).unwrap();
        assert_eq!(feature_magnitude(&t, 0).unwrap(), vec![2.0, 3.0]);
    }
}
