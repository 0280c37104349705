//! Training data: a procedural texture-and-objects generator or a directory of PNGs.

use std::f64::consts::TAU;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgen::InstanceMap;
use crate::tensor::{Prng, Scalar, Tensor};

use super::png::{load_instance_map, load_rgb, rgb_to_tensor, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Procedural,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    pub resolution: usize,
    /// Procedural: objects per image are uniform in `0..=max_objects`.
    pub max_objects: usize,
    pub seed: u64,
    /// Directory source: RGB PNGs.
    pub images_dir: Option<PathBuf>,
    /// Directory source: label PNGs with the same file names (optional).
    pub instances_dir: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DatasetSource::Procedural,
            resolution: 64,
            max_objects: 4,
            seed: 0,
            images_dir: None,
            instances_dir: None,
        }
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub instances: InstanceMap,
}

pub struct Dataset {
    spec: DatasetSpec,
    files: Vec<(PathBuf, Option<PathBuf>)>,
}

impl Dataset {
    pub fn new(spec: DatasetSpec) -> Result<Self> {
        if spec.resolution == 0 {
            return Err(Error::Config("dataset resolution must be positive".into()));
        }
        let files = match spec.source {
            DatasetSource::Procedural => Vec::new(),
            DatasetSource::Directory => {
                let dir = spec
                    .images_dir
                    .as_ref()
                    .ok_or_else(|| Error::Config("directory dataset needs images_dir".into()))?;
                let mut images: Vec<PathBuf> = std::fs::read_dir(dir)
                    .map_err(|e| Error::io(dir, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                    .collect();
                images.sort();
                if images.is_empty() {
                    return Err(Error::Config(format!("no PNG images in {}", dir.display())));
                }
                images
                    .into_iter()
                    .map(|p| {
                        let inst = spec
                            .instances_dir
                            .as_ref()
                            .map(|d| d.join(p.file_name().expect("file path")))
                            .filter(|q| q.exists());
                        (p, inst)
                    })
                    .collect()
            }
        };
        Ok(Dataset { spec, files })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    /// Number of distinct samples; `None` for the unbounded procedural source.
    pub fn len(&self) -> Option<usize> {
        match self.spec.source {
            DatasetSource::Procedural => None,
            DatasetSource::Directory => Some(self.files.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    /// Sample `index`; a pure function of `(spec, index)`.
    pub fn sample(&self, index: u64) -> Result<Sample> {
        match self.spec.source {
            DatasetSource::Procedural => {
                let mut rng = Prng::new(self.spec.seed).substream_indexed("dataset", index);
                Ok(procedural_sample(&mut rng, self.spec.resolution, self.spec.max_objects))
            }
            DatasetSource::Directory => {
                let (img_path, inst_path) = &self.files[(index % self.files.len() as u64) as usize];
                let image = load_rgb(img_path)?;
                let r = self.spec.resolution;
                if image.width != r || image.height != r {
                    return Err(Error::Config(format!(
                        "{} is {}x{}, expected {r}x{r}",
                        img_path.display(),
                        image.width,
                        image.height
                    )));
                }
                let instances = match inst_path {
                    Some(p) => load_instance_map(p)?,
                    None => InstanceMap::empty(r, r),
                };
                Ok(Sample { image, instances })
            }
        }
    }
}

/// Stacks `[1, 3, H, W]` images into `[B, 3, H, W]`.
pub fn batch_tensor<T: Scalar>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * 3 * first.width * first.height);
    for img in images {
        if (img.width, img.height) != (first.width, first.height) {
            return Err(Error::shape("batch_tensor", "images differ in size"));
        }
        data.extend(rgb_to_tensor::<T>(img).into_data());
    }
    Tensor::new(&[images.len(), 3, first.height, first.width], data)
}

fn random_color(rng: &mut Prng) -> [f64; 3] {
    [rng.uniform(), rng.uniform(), rng.uniform()]
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Background texture families.
fn texture(rng: &mut Prng, r: usize) -> Vec<[f64; 3]> {
    let (c0, c1) = (random_color(rng), random_color(rng));
    let family = rng.int_inclusive(0, 3);
    let n = r as f64;
    let mut px = vec![[0.0; 3]; r * r];
    match family {
        0 => {
            // linear gradient
            let a = rng.uniform() * TAU;
            let (dx, dy) = (a.cos(), a.sin());
            for y in 0..r {
                for x in 0..r {
                    let t = ((x as f64 / n - 0.5) * dx + (y as f64 / n - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5;
                    px[y * r + x] = lerp(c0, c1, t.clamp(0.0, 1.0));
                }
            }
        }
        1 => {
            // gaussian blobs
            px.fill(c0);
            for _ in 0..rng.int_inclusive(2, 6) {
                let (cx, cy) = (rng.uniform() * n, rng.uniform() * n);
                let s = rng.uniform_range(0.08, 0.3) * n;
                let col = random_color(rng);
                for y in 0..r {
                    for x in 0..r {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        let t = (-d2 / (2.0 * s * s)).exp();
                        px[y * r + x] = lerp(px[y * r + x], col, t);
                    }
                }
            }
        }
        2 => {
            // stripes
            let a = rng.uniform() * TAU;
            let period = rng.uniform_range(0.08, 0.35) * n;
            for y in 0..r {
                for x in 0..r {
                    let u = x as f64 * a.cos() + y as f64 * a.sin();
                    let t = 0.5 + 0.5 * (TAU * u / period).sin();
                    px[y * r + x] = lerp(c0, c1, t);
                }
            }
        }
        _ => {
            // checkers
            let cell = rng.int_inclusive((r / 16).max(1), (r / 4).max(1));
            for y in 0..r {
                for x in 0..r {
                    px[y * r + x] = if (x / cell + y / cell) % 2 == 0 { c0 } else { c1 };
                }
            }
        }
    }
    px
}

/// Procedural image with up to `max_objects` disjoint ellipses/rectangles.
pub fn procedural_sample(rng: &mut Prng, r: usize, max_objects: usize) -> Sample {
    let mut px = texture(rng, r);
    let mut labels = vec![0u16; r * r];
    let count = rng.int_inclusive(0, max_objects);
    let n = r as f64;
    let mut next_id = 1u16;
    for _ in 0..count {
        for _attempt in 0..20 {
            let (hw, hh) = (rng.uniform_range(0.08, 0.2) * n, rng.uniform_range(0.08, 0.2) * n);
            let (cx, cy) = (rng.uniform_range(hw, n - hw), rng.uniform_range(hh, n - hh));
            let ellipse = rng.bernoulli(0.5);
            let inside = |x: usize, y: usize| {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / hw, (y as f64 + 0.5 - cy) / hh);
                if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                }
            };
            let pixels: Vec<usize> = (0..r * r).filter(|&i| inside(i % r, i / r)).collect();
            if pixels.is_empty() || pixels.iter().any(|&i| labels[i] != 0) {
                continue;
            }
            let (col, shade) = (random_color(rng), random_color(rng));
            for &i in &pixels {
                let t = 0.3 * ((i / r) as f64 + 0.5 - (cy - hh)) / (2.0 * hh);
                px[i] = lerp(col, shade, t.clamp(0.0, 0.3));
                labels[i] = next_id;
            }
            next_id += 1;
            break;
        }
    }
    let pixels = px
        .iter()
        .flat_map(|c| c.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        .collect();
    Sample {
        image: RgbImage {
            width: r,
            height: r,
            pixels,
        },
        instances: InstanceMap::new(r, r, labels).expect("ids assigned contiguously"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let d = Dataset::new(DatasetSpec::default()).unwrap();
        assert_eq!(d.sample(3).unwrap(), d.sample(3).unwrap());
        assert_ne!(d.sample(3).unwrap().image, d.sample(4).unwrap().image);
    }

    #[test]
    fn zero_objects_gives_empty_labels() {
        let d = Dataset::new(DatasetSpec {
            max_objects: 0,
            ..DatasetSpec::default()
        })
        .unwrap();
        for i in 0..10 {
            assert!(d.sample(i).unwrap().instances.labels().iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn batch_stacks_samples() {
        let d = Dataset::new(DatasetSpec {
            resolution: 8,
            ..DatasetSpec::default()
        })
        .unwrap();
        let (a, b) = (d.sample(0).unwrap(), d.sample(1).unwrap());
        let t = batch_tensor::<f32>(&[&a.image, &b.image]).unwrap();
        assert_eq!(t.shape(), [2, 3, 8, 8]);
        assert_eq!(&t.data()[192..], rgb_to_tensor::<f32>(&b.image).data());
    }

    #[test]
    fn directory_source_needs_dir() {
        let spec = DatasetSpec {
            source: DatasetSource::Directory,
            ..DatasetSpec::default()
        };
        assert!(Dataset::new(spec).is_err());
    }
}
