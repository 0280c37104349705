//! PNG read/write at native bit depth.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::maskgen::{InstanceMap, Mask};
use crate::tensor::{Scalar, Tensor};

/// 8-bit RGB raster, interleaved, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Decoded pixels at their stored depth.
enum Raw {
    Gray8(Vec<u8>),
    Gray16(Vec<u16>),
    Rgb8(Vec<u8>),
    Rgba8(Vec<u8>),
}

fn png_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn decode(path: &Path) -> Result<(usize, usize, Raw)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let raw = match (info.color_type, info.bit_depth) {
        (ColorType::Grayscale, BitDepth::Eight) => Raw::Gray8(buf),
        (ColorType::Grayscale, BitDepth::Sixteen) => {
            Raw::Gray16(buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect())
        }
        (ColorType::Rgb, BitDepth::Eight) => Raw::Rgb8(buf),
        (ColorType::Rgba, BitDepth::Eight) => Raw::Rgba8(buf),
        (ct, bd) => {
            return Err(png_err(
                path,
                format!("unsupported format {ct:?} at {bd:?}; expected 8-bit RGB/RGBA/gray or 16-bit gray"),
            ))
        }
    };
    Ok((w, h, raw))
}

fn encode(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Loads an 8-bit RGB image; RGBA drops alpha and gray is replicated.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let (width, height, raw) = decode(path)?;
    let pixels = match raw {
        Raw::Rgb8(p) => p,
        Raw::Rgba8(p) => p.chunks_exact(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
        Raw::Gray8(p) => p.iter().flat_map(|&v| [v, v, v]).collect(),
        Raw::Gray16(_) => return Err(png_err(path, "16-bit grayscale is not an RGB image")),
    };
    Ok(RgbImage { width, height, pixels })
}

pub fn save_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    encode(path, image.width, image.height, ColorType::Rgb, BitDepth::Eight, &image.pixels)
}

pub fn load_gray8(path: &Path) -> Result<GrayImage> {
    let (width, height, raw) = decode(path)?;
    match raw {
        Raw::Gray8(pixels) => Ok(GrayImage { width, height, pixels }),
        _ => Err(png_err(path, "expected an 8-bit grayscale image")),
    }
}

pub fn save_gray8(path: &Path, image: &GrayImage) -> Result<()> {
    encode(path, image.width, image.height, ColorType::Grayscale, BitDepth::Eight, &image.pixels)
}

/// Loads 16-bit grayscale values (8-bit gray is widened).
pub fn load_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let (w, h, raw) = decode(path)?;
    match raw {
        Raw::Gray16(v) => Ok((w, h, v)),
        Raw::Gray8(v) => Ok((w, h, v.into_iter().map(u16::from).collect())),
        _ => Err(png_err(path, "expected a grayscale label image")),
    }
}

pub fn save_gray16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    encode(path, width, height, ColorType::Grayscale, BitDepth::Sixteen, &bytes)
}

/// Binary mask from any supported PNG: a pixel is set when its first channel
/// exceeds half of full scale.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let (w, h, raw) = decode(path)?;
    let data = match raw {
        Raw::Gray8(p) => p.iter().map(|&v| (v > 127) as u8).collect(),
        Raw::Gray16(p) => p.iter().map(|&v| (v > 32767) as u8).collect(),
        Raw::Rgb8(p) => p.chunks_exact(3).map(|c| (c[0] > 127) as u8).collect(),
        Raw::Rgba8(p) => p.chunks_exact(4).map(|c| (c[0] > 127) as u8).collect(),
    };
    Mask::from_vec(w, h, data)
}

/// Writes a mask as 8-bit gray, 0 or 255.
pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let pixels = mask.data().iter().map(|&v| v * 255).collect();
    save_gray8(
        path,
        &GrayImage {
            width: mask.width(),
            height: mask.height(),
            pixels,
        },
    )
}

/// Loads an instance label image; ids are relabelled to `1..=N` in increasing order.
pub fn load_instance_map(path: &Path) -> Result<InstanceMap> {
    let (w, h, v) = load_gray16(path)?;
    InstanceMap::relabel(w, h, &v)
}

pub fn save_instance_map(path: &Path, map: &InstanceMap) -> Result<()> {
    save_gray16(path, map.width(), map.height(), map.labels())
}

/// Byte to training value: `v * 2 / 255 - 1`.
#[inline]
pub fn byte_to_unit(v: u8) -> f64 {
    v as f64 * 2.0 / 255.0 - 1.0
}

/// Training value to byte: `round((x + 1) * 255 / 2)`, clamped.
#[inline]
pub fn unit_to_byte(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// `[1, 3, H, W]` tensor in `[-1, 1]`.
pub fn rgb_to_tensor<T: Scalar>(image: &RgbImage) -> Tensor<T> {
    let plane = image.width * image.height;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in image.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::lit(byte_to_unit(px[c]));
        }
    }
    Tensor::new(&[1, 3, image.height, image.width], data).expect("sizes agree")
}

/// Batch item `sample` of a `[B, 3, H, W]` tensor as an RGB image.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>, sample: usize) -> Result<RgbImage> {
    let [b, c, h, w] = t.dims4("tensor_to_rgb")?;
    if c != 3 || sample >= b {
        return Err(Error::shape("tensor_to_rgb", format!("cannot take RGB sample {sample} of {:?}", t.shape())));
    }
    let plane = h * w;
    let base = sample * 3 * plane;
    let d = t.data();
    let pixels = (0..plane)
        .flat_map(|i| (0..3).map(move |c| unit_to_byte(d[base + c * plane + i].as_f64())))
        .collect();
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Prng;

    #[test]
    fn affine_map_endpoints() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        assert!((byte_to_unit(128) - (256.0 / 255.0 - 1.0)).abs() < 1e-15);
        for v in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(v)), v);
        }
    }

    #[test]
    fn rgb_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut rng = Prng::new(1);
        let pixels = (0..5 * 7 * 3).map(|_| rng.next_u64() as u8).collect();
        let img = RgbImage {
            width: 5,
            height: 7,
            pixels,
        };
        save_rgb(&path, &img).unwrap();
        assert_eq!(load_rgb(&path).unwrap(), img);
        let t = rgb_to_tensor::<f32>(&img);
        assert_eq!(tensor_to_rgb(&t, 0).unwrap(), img);
    }

    #[test]
    fn label_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        let labels = vec![0, 1, 2, 2, 1, 0, 0, 300];
        save_gray16(&path, 4, 2, &labels).unwrap();
        assert_eq!(load_gray16(&path).unwrap(), (4, 2, labels));
    }

    #[test]
    fn corrupt_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        let err = load_rgb(&path).unwrap_err().to_string();
        assert!(err.contains("bad.png"), "{err}");
    }

    #[test]
    fn gray16_is_not_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        save_gray16(&path, 1, 1, &[7]).unwrap();
        assert!(load_rgb(&path).is_err());
    }
}
