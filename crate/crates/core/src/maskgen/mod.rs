//! Object-aware training masks.
//!
//! Each draw picks a free-form, object-shaped or rectangular initial hole by
//! the mixture probabilities, removes every instance the hole covers by more
//! than the overlap threshold (dilated at its boundary), and rejects holes
//! smaller than the minimum area, retrying up to the iteration limit.

pub mod instances;
pub mod morphology;
pub mod shapes;

pub use instances::{exclude_instances, overlap_ratio, InstanceMap};
pub use morphology::dilate;
pub use shapes::{
    free_form_mask, object_shaped_mask, rect_mask, translate_circular, ObjectParams, RectParams,
    SilhouetteLibrary, StrokeParams,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Prng, Scalar, Tensor};

/// Binary hole map, 1 inside the hole. Row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("mask", format!("{} values for {width}x{height}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Mask { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.area() as f64 / (self.width * self.height).max(1) as f64
    }

    pub fn intersection_area(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a & **b != 0).count()
    }

    /// `self <- self AND NOT other`.
    pub fn subtract(&mut self, other: &Mask) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a &= 1 - *b;
        }
    }

    /// `(x0, y0, x1, y1)` inclusive, or `None` when empty.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// `[1, 1, H, W]` tensor of zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect();
        Tensor::new(&[1, 1, self.height, self.width], data).expect("sizes agree")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    FreeForm,
    Object,
    Rect,
}

impl MaskKind {
    pub const ALL: [MaskKind; 3] = [MaskKind::FreeForm, MaskKind::Object, MaskKind::Rect];

    pub fn index(self) -> usize {
        match self {
            MaskKind::FreeForm => 0,
            MaskKind::Object => 1,
            MaskKind::Rect => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub p_freeform: f64,
    pub p_object: f64,
    pub p_rect: f64,
    pub overlap_threshold: f64,
    pub min_area: f64,
    pub max_iterations: usize,
    /// Dilation radius of an excluded instance, in pixels.
    pub boundary_dilation: usize,
    pub freeform: StrokeParams,
    pub object: ObjectParams,
    pub rect: RectParams,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            p_freeform: 0.45,
            p_object: 0.45,
            p_rect: 0.10,
            overlap_threshold: 0.5,
            min_area: 0.05,
            max_iterations: 5,
            boundary_dilation: 2,
            freeform: StrokeParams::default(),
            object: ObjectParams::default(),
            rect: RectParams::default(),
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let p = [self.p_freeform, self.p_object, self.p_rect];
        if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mask type probabilities {p:?} must be in [0, 1] and sum to 1")));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold < 1.0) {
            return Err(Error::Config(format!("overlap_threshold {} outside (0, 1)", self.overlap_threshold)));
        }
        if !(0.0..1.0).contains(&self.min_area) {
            return Err(Error::Config(format!("min_area {} outside [0, 1)", self.min_area)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        let ordered_usize = |r: [usize; 2]| r[0] <= r[1];
        let ordered_f64 = |r: [f64; 2]| r[0] <= r[1] && r[0] >= 0.0;
        let ok = ordered_usize(self.freeform.strokes)
            && ordered_usize(self.freeform.vertices)
            && self.freeform.vertices[0] >= 1
            && ordered_f64(self.freeform.width)
            && ordered_f64(self.freeform.step)
            && ordered_usize(self.rect.count)
            && ordered_f64(self.rect.side)
            && self.rect.side[1] <= 1.0
            && ordered_f64(self.object.scale)
            && self.object.scale[1] <= 1.0
            && ordered_usize(self.object.dilation);
        if !ok {
            return Err(Error::Config("mask sampler ranges must be ordered [min, max] and in range".into()));
        }
        Ok(())
    }

    fn draw_kind(&self, rng: &mut Prng) -> MaskKind {
        let u = rng.uniform();
        if u < self.p_freeform {
            MaskKind::FreeForm
        } else if u < self.p_freeform + self.p_object {
            MaskKind::Object
        } else {
            MaskKind::Rect
        }
    }
}

/// Result of one object-aware draw.
#[derive(Clone, Debug)]
pub struct MaskSample {
    pub mask: Mask,
    /// The initial hole the returned mask was derived from.
    pub initial: Mask,
    pub kind: MaskKind,
    /// Kind drawn at every iteration, in order.
    pub draws: Vec<MaskKind>,
    /// Instance ids removed from the hole.
    pub excluded: Vec<usize>,
    /// False when every iteration was rejected and the largest candidate was returned.
    pub accepted: bool,
}

/// Draws one initial hole of the given kind.
pub fn initial_mask(
    kind: MaskKind,
    rng: &mut Prng,
    width: usize,
    height: usize,
    config: &MaskConfig,
    library: &SilhouetteLibrary,
) -> Result<Mask> {
    match kind {
        MaskKind::FreeForm => Ok(free_form_mask(rng, width, height, &config.freeform)),
        MaskKind::Object => object_shaped_mask(rng, width, height, library, &config.object),
        MaskKind::Rect => Ok(rect_mask(rng, width, height, &config.rect)),
    }
}

/// The object-aware pipeline. After `max_iterations` rejections the
/// candidate with the largest area is returned.
pub fn sample_object_aware_mask(
    instances: &InstanceMap,
    rng: &mut Prng,
    config: &MaskConfig,
    library: &SilhouetteLibrary,
) -> Result<MaskSample> {
    let (w, h) = (instances.width(), instances.height());
    let min_pixels = config.min_area * (w * h) as f64;
    let mut draws = Vec::with_capacity(config.max_iterations);
    let mut best: Option<MaskSample> = None;
    for _ in 0..config.max_iterations {
        let kind = config.draw_kind(rng);
        draws.push(kind);
        let initial = initial_mask(kind, rng, w, h, config, library)?;
        let (mask, excluded) =
            exclude_instances(&initial, instances, config.overlap_threshold, config.boundary_dilation)?;
        let candidate = MaskSample {
            mask,
            initial,
            kind,
            draws: Vec::new(),
            excluded,
            accepted: false,
        };
        if candidate.mask.area() as f64 >= min_pixels {
            return Ok(MaskSample {
                accepted: true,
                draws,
                ..candidate
            });
        }
        if best.as_ref().is_none_or(|b| candidate.mask.area() > b.mask.area()) {
            best = Some(candidate);
        }
    }
    let best = best.expect("max_iterations >= 1");
    Ok(MaskSample { draws, ..best })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn library() -> SilhouetteLibrary {
        SilhouetteLibrary::procedural(1, 6, 48)
    }

    #[test]
    fn defaults_validate() {
        MaskConfig::default().validate().unwrap();
        let bad = MaskConfig {
            p_rect: 0.2,
            ..MaskConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn no_instances_big_strokes_accept_first() {
        let config = MaskConfig {
            p_freeform: 1.0,
            p_object: 0.0,
            p_rect: 0.0,
            freeform: StrokeParams {
                strokes: [4, 4],
                width: [0.2, 0.2],
                ..StrokeParams::default()
            },
            ..MaskConfig::default()
        };
        let s = sample_object_aware_mask(&InstanceMap::empty(32, 32), &mut Prng::new(1), &config, &library()).unwrap();
        assert!(s.accepted);
        assert_eq!(s.draws.len(), 1);
    }

    #[test]
    fn zero_min_area_returns_first() {
        let config = MaskConfig {
            min_area: 0.0,
            ..MaskConfig::default()
        };
        for seed in 0..20 {
            let s = sample_object_aware_mask(&InstanceMap::empty(32, 32), &mut Prng::new(seed), &config, &library())
                .unwrap();
            assert_eq!(s.draws.len(), 1);
        }
    }

    #[test]
    fn fallback_returns_largest() {
        let config = MaskConfig {
            min_area: 0.99,
            ..MaskConfig::default()
        };
        let s = sample_object_aware_mask(&InstanceMap::empty(32, 32), &mut Prng::new(4), &config, &library()).unwrap();
        assert!(!s.accepted);
        assert_eq!(s.draws.len(), 5);
    }

    #[test]
    fn mask_tensor_layout() {
        let mut m = Mask::new(3, 2);
        m.set(2, 1, true);
        let t = m.to_tensor::<f32>();
        assert_eq!(t.shape(), [1, 1, 2, 3]);
        assert_eq!(t.data()[5], 1.0);
    }
}
