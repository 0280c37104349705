//! "CMGN" v1 checkpoints.
//!
//! Layout, all integers `u32` little-endian:
//! `b"CMGN"`, version, tensor count, then per tensor: name length, UTF-8
//! name, rank, dims, and `numel` little-endian `f32` values.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMGN";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a CMGN checkpoint".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = c.u32("tensor count")?;
    let mut params = ParamSet::new();
    for i in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let shape = (0..rank).map(|_| c.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let raw = c.take(
            numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            &format!("payload of {name}"),
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        params.insert(name, Tensor::new(&shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(params)
}

/// Writes via a temporary file and rename, so readers never see a partial file.
pub fn save_checkpoint(path: &Path, params: &ParamSet<f32>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&encode_checkpoint(params)).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn scalar(v: f64) -> Tensor<f32> {
    Tensor::new(&[1], vec![v as f32]).expect("one value")
}

/// Stores a generator config as `config.*` tensors.
pub fn store_generator_config(params: &mut ParamSet<f32>, config: &GeneratorConfig) {
    params.insert("config.resolution", scalar(config.resolution as f64));
    let widths = config.widths.iter().map(|&w| w as f32).collect();
    params.insert("config.widths", Tensor::new(&[config.widths.len()], widths).expect("sizes"));
    params.insert("config.style_dim", scalar(config.style_dim as f64));
    params.insert("config.w_dim", scalar(config.w_dim as f64));
    params.insert("config.z_dim", scalar(config.z_dim as f64));
    params.insert("config.mapping_depth", scalar(config.mapping_depth as f64));
    params.insert("config.global_ratio", scalar(config.global_ratio));
    params.insert("config.noise", scalar(config.noise as u8 as f64));
}

/// Reads a config written by [`store_generator_config`].
pub fn load_generator_config(params: &ParamSet<f32>) -> Result<GeneratorConfig> {
    let int = |name: &str| -> Result<usize> { Ok(params.get(name)?.item()? as usize) };
    let config = GeneratorConfig {
        resolution: int("config.resolution")?,
        widths: params.get("config.widths")?.data().iter().map(|&w| w as usize).collect(),
        style_dim: int("config.style_dim")?,
        w_dim: int("config.w_dim")?,
        z_dim: int("config.z_dim")?,
        mapping_depth: int("config.mapping_depth")?,
        global_ratio: params.get("config.global_ratio")?.item()? as f64,
        noise: params.get("config.noise")?.item()? != 0.0,
    };
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Prng;

    fn sample_params() -> ParamSet<f32> {
        let mut rng = Prng::new(9);
        let mut p = ParamSet::new();
        p.insert("a.weight", Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng));
        p.insert("b", Tensor::randn(&[5], 1.0, &mut rng));
        p.insert("s", Tensor::scalar(f32::MIN_POSITIVE));
        p
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let p = sample_params();
        let back = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        assert_eq!(back.len(), p.len());
        for ((na, a), (nb, b)) in p.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncation_and_magic_rejected() {
        let bytes = encode_checkpoint(&sample_params());
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 2;
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn missing_tensor_lists_names() {
        let p = decode_checkpoint(&encode_checkpoint(&sample_params())).unwrap();
        match p.get("nope") {
            Err(Error::MissingTensor { available, .. }) => assert_eq!(available, vec!["a.weight", "b", "s"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_roundtrip() {
        let mut p = ParamSet::new();
        let c = GeneratorConfig::default();
        store_generator_config(&mut p, &c);
        assert_eq!(load_generator_config(&p).unwrap(), c);
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &sample_params()).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), sample_params());
        assert!(!dir.path().join("m.tmp").exists());
    }
}
