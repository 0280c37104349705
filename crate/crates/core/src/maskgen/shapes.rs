//! Initial-mask samplers: free-form brush strokes, object silhouettes and
//! rectangles.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Prng;

use super::morphology::dilate;
use super::Mask;

/// Free-form stroke parameters. Lengths and widths are fractions of the
/// shorter image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrokeParams {
    pub strokes: [usize; 2],
    pub vertices: [usize; 2],
    pub width: [f64; 2],
    pub step: [f64; 2],
    /// Largest turn between consecutive segments, radians.
    pub max_turn: f64,
}

impl Default for StrokeParams {
    fn default() -> Self {
        StrokeParams {
            strokes: [2, 5],
            vertices: [4, 12],
            width: [0.05, 0.14],
            step: [0.08, 0.25],
            max_turn: 2.0 * PI / 5.0,
        }
    }
}

/// Rectangle parameters: count range and side range as image-side fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RectParams {
    pub count: [usize; 2],
    pub side: [f64; 2],
}

impl Default for RectParams {
    fn default() -> Self {
        RectParams {
            count: [1, 3],
            side: [0.25, 0.60],
        }
    }
}

/// Object-shaped hole parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectParams {
    /// Silhouette extent as a fraction of the image side.
    pub scale: [f64; 2],
    /// Dilation radius range in pixels.
    pub dilation: [usize; 2],
}

impl Default for ObjectParams {
    fn default() -> Self {
        ObjectParams {
            scale: [0.35, 0.75],
            dilation: [1, 4],
        }
    }
}

fn stamp_disk(mask: &mut Mask, cx: f64, cy: f64, r: f64) {
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let x0 = (cx - r).floor() as isize;
    let x1 = (cx + r).ceil() as isize;
    let y0 = (cy - r).floor() as isize;
    let y1 = (cy + r).ceil() as isize;
    for y in y0.max(0)..=y1.min(h - 1) {
        for x in x0.max(0)..=x1.min(w - 1) {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                mask.set(x as usize, y as usize, true);
            }
        }
    }
}

fn draw_segment(mask: &mut Mask, a: (f64, f64), b: (f64, f64), r: f64) {
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    let n = (len / 0.5).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        stamp_disk(mask, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), r);
    }
}

/// Union of random polyline brush strokes.
pub fn free_form_mask(rng: &mut Prng, width: usize, height: usize, params: &StrokeParams) -> Mask {
    let mut mask = Mask::new(width, height);
    let side = width.min(height) as f64;
    let strokes = rng.int_inclusive(params.strokes[0], params.strokes[1]);
    for _ in 0..strokes {
        let vertices = rng.int_inclusive(params.vertices[0], params.vertices[1]);
        let radius = (rng.uniform_range(params.width[0], params.width[1]) * side / 2.0).max(0.5);
        let mut p = (rng.uniform() * width as f64, rng.uniform() * height as f64);
        let mut angle = rng.uniform() * TAU;
        stamp_disk(&mut mask, p.0, p.1, radius);
        for _ in 1..vertices {
            angle += rng.uniform_range(-params.max_turn, params.max_turn);
            let len = rng.uniform_range(params.step[0], params.step[1]) * side;
            let q = (
                (p.0 + len * angle.cos()).clamp(0.0, width as f64),
                (p.1 + len * angle.sin()).clamp(0.0, height as f64),
            );
            draw_segment(&mut mask, p, q, radius);
            p = q;
        }
    }
    mask
}

/// Union of axis-aligned rectangles.
pub fn rect_mask(rng: &mut Prng, width: usize, height: usize, params: &RectParams) -> Mask {
    let mut mask = Mask::new(width, height);
    let count = rng.int_inclusive(params.count[0], params.count[1]);
    for _ in 0..count {
        let rw = ((rng.uniform_range(params.side[0], params.side[1]) * width as f64).round() as usize).clamp(1, width);
        let rh = ((rng.uniform_range(params.side[0], params.side[1]) * height as f64).round() as usize).clamp(1, height);
        let x0 = rng.int_inclusive(0, width - rw);
        let y0 = rng.int_inclusive(0, height - rh);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Binary object silhouettes used for object-shaped holes.
#[derive(Clone, Debug)]
pub struct SilhouetteLibrary {
    shapes: Vec<Mask>,
}

impl SilhouetteLibrary {
    pub fn new(shapes: Vec<Mask>) -> Result<Self> {
        let shapes: Vec<Mask> = shapes.into_iter().filter(|s| s.area() > 0).collect();
        if shapes.is_empty() {
            return Err(Error::InvalidArgument("silhouette library is empty".into()));
        }
        Ok(SilhouetteLibrary { shapes })
    }

    /// Every PNG in `dir`, sorted by file name; pixels above mid-gray are set.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let shapes = paths
            .iter()
            .map(|p| crate::imageio::load_mask(p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(shapes)
    }

    /// Generated silhouettes: lobed blobs, stars and capsules.
    pub fn procedural(seed: u64, count: usize, size: usize) -> Self {
        let root = Prng::new(seed);
        let shapes = (0..count)
            .map(|i| {
                let mut rng = root.substream_indexed("silhouette", i as u64);
                match i % 3 {
                    0 => lobed_blob(&mut rng, size),
                    1 => star(&mut rng, size),
                    _ => capsules(&mut rng, size),
                }
            })
            .collect();
        Self::new(shapes).expect("procedural shapes are non-empty")
    }

    /// The procedural set shipped as PNGs in `assets/silhouettes`.
    pub fn builtin() -> Self {
        Self::procedural(2024, 24, 64)
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn shapes(&self) -> &[Mask] {
        &self.shapes
    }
}

fn radial_shape(size: usize, radius: impl Fn(f64) -> f64) -> Mask {
    let mut m = Mask::new(size, size);
    let c = size as f64 / 2.0;
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
            let r = (dx * dx + dy * dy).sqrt();
            if r <= radius(dy.atan2(dx)) * c {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn lobed_blob(rng: &mut Prng, size: usize) -> Mask {
    let terms: Vec<(f64, f64, f64)> = (2..=5)
        .map(|k| (k as f64, rng.uniform_range(0.0, 0.18), rng.uniform() * TAU))
        .collect();
    radial_shape(size, |t| {
        0.7 + terms.iter().map(|&(k, a, ph)| a * (k * t + ph).cos()).sum::<f64>()
    })
}

fn star(rng: &mut Prng, size: usize) -> Mask {
    let points = rng.int_inclusive(4, 7) as f64;
    let inner = rng.uniform_range(0.35, 0.6);
    let phase = rng.uniform() * TAU;
    radial_shape(size, move |t| {
        let s = 0.5 + 0.5 * (points * t + phase).cos();
        0.95 * (inner + (1.0 - inner) * s)
    })
}

fn capsules(rng: &mut Prng, size: usize) -> Mask {
    let mut m = Mask::new(size, size);
    let s = size as f64;
    let parts = rng.int_inclusive(2, 4);
    let mut p = (s * 0.5, s * 0.5);
    for _ in 0..parts {
        let q = (rng.uniform_range(0.2, 0.8) * s, rng.uniform_range(0.2, 0.8) * s);
        draw_segment(&mut m, p, q, rng.uniform_range(0.08, 0.18) * s);
        p = q;
    }
    m
}

/// Nearest-neighbour resize of the bounding box of `shape` so that its
/// longer side becomes `target` pixels.
fn fit_shape(shape: &Mask, target: usize) -> Mask {
    let (x0, y0, x1, y1) = shape.bounding_box().expect("non-empty silhouette");
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    let scale = target as f64 / bw.max(bh) as f64;
    let nw = ((bw as f64 * scale).round() as usize).max(1);
    let nh = ((bh as f64 * scale).round() as usize).max(1);
    let mut out = Mask::new(nw, nh);
    for y in 0..nh {
        for x in 0..nw {
            let sx = x0 + ((x as f64 + 0.5) / scale).floor().min((bw - 1) as f64) as usize;
            let sy = y0 + ((y as f64 + 0.5) / scale).floor().min((bh - 1) as f64) as usize;
            out.set(x, y, shape.get(sx, sy));
        }
    }
    out
}

/// Circular shift by `(dy, dx)`.
pub fn translate_circular(mask: &Mask, dy: usize, dx: usize) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                out.set((x + dx) % w, (y + dy) % h, true);
            }
        }
    }
    out
}

/// A random silhouette, scaled, circularly translated and dilated.
pub fn object_shaped_mask(
    rng: &mut Prng,
    width: usize,
    height: usize,
    library: &SilhouetteLibrary,
    params: &ObjectParams,
) -> Result<Mask> {
    if library.is_empty() {
        return Err(Error::InvalidArgument("silhouette library is empty".into()));
    }
    let shape = &library.shapes[rng.int_inclusive(0, library.len() - 1)];
    let side = width.min(height);
    let target = ((rng.uniform_range(params.scale[0], params.scale[1]) * side as f64).round() as usize).clamp(1, side);
    let fitted = fit_shape(shape, target);
    let mut canvas = Mask::new(width, height);
    for y in 0..fitted.height() {
        for x in 0..fitted.width() {
            if fitted.get(x, y) {
                canvas.set(x, y, true);
            }
        }
    }
    let dy = rng.int_inclusive(0, height - 1);
    let dx = rng.int_inclusive(0, width - 1);
    let radius = rng.int_inclusive(params.dilation[0], params.dilation[1]);
    Ok(dilate(&translate_circular(&canvas, dy, dx), radius))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_strokes_is_empty() {
        let p = StrokeParams {
            strokes: [0, 0],
            ..StrokeParams::default()
        };
        assert_eq!(free_form_mask(&mut Prng::new(1), 32, 32, &p).area(), 0);
    }

    #[test]
    fn free_form_is_seeded() {
        let p = StrokeParams::default();
        let a = free_form_mask(&mut Prng::new(5), 32, 32, &p);
        let b = free_form_mask(&mut Prng::new(5), 32, 32, &p);
        assert_eq!(a, b);
        assert!(a.area() > 0);
    }

    #[test]
    fn full_period_translation_is_identity() {
        let m = free_form_mask(&mut Prng::new(2), 16, 12, &StrokeParams::default());
        assert_eq!(translate_circular(&m, 12, 16), m);
        assert_eq!(translate_circular(&translate_circular(&m, 5, 3), 7, 13), m);
    }

    #[test]
    fn rect_sides_in_range() {
        let p = RectParams {
            count: [1, 1],
            ..RectParams::default()
        };
        for seed in 0..50 {
            let m = rect_mask(&mut Prng::new(seed), 40, 40, &p);
            let (x0, y0, x1, y1) = m.bounding_box().unwrap();
            assert!((10..=24).contains(&(x1 - x0 + 1)));
            assert!((10..=24).contains(&(y1 - y0 + 1)));
            assert_eq!(m.area(), (x1 - x0 + 1) * (y1 - y0 + 1));
        }
    }

    #[test]
    fn procedural_library_shapes_nonempty() {
        let lib = SilhouetteLibrary::procedural(0, 9, 48);
        assert_eq!(lib.len(), 9);
        for s in lib.shapes() {
            assert!(s.area() > 48 * 48 / 20, "area {}", s.area());
        }
    }

    #[test]
    fn object_mask_dilation_zero_keeps_area() {
        let lib = SilhouetteLibrary::procedural(0, 3, 48);
        let p = ObjectParams {
            dilation: [0, 0],
            scale: [0.5, 0.5],
        };
        let m = object_shaped_mask(&mut Prng::new(3), 64, 64, &lib, &p).unwrap();
        let shape_area = {
            let mut rng = Prng::new(3);
            let idx = rng.int_inclusive(0, 2);
            let _ = rng.uniform_range(0.5, 0.5);
            fit_shape(&lib.shapes()[idx], 32).area()
        };
        assert_eq!(m.area(), shape_area);
    }

    #[test]
    fn empty_library_rejected() {
        assert!(SilhouetteLibrary::new(vec![Mask::new(4, 4)]).is_err());
    }
}
