//! Run configuration: one strict JSON document per run.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cmgan::generator::GeneratorConfig;
use cmgan::imageio::DatasetSpec;
use cmgan::maskgen::{MaskConfig, SilhouetteLibrary};
use cmgan::training::{AdamConfig, LossConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub masks: MaskConfig,
    pub loss: LossConfig,
    pub dataset: DatasetSpec,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Total number of steps; a resumed run continues up to this count.
    pub steps: u64,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Checkpoint period in steps; 0 writes only the first and last.
    pub checkpoint_every: u64,
    /// Triptych period in steps; 0 writes only the last.
    pub sample_every: u64,
    /// Directory of silhouette PNGs for object-shaped holes; the built-in set when absent.
    pub silhouettes: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            masks: MaskConfig::default(),
            loss: LossConfig::default(),
            dataset: DatasetSpec::default(),
            adam: AdamConfig::default(),
            batch_size: 32,
            steps: 2000,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 500,
            sample_every: 500,
            silhouettes: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.masks.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            anyhow::bail!(cmgan::Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn silhouette_library(&self) -> Result<SilhouetteLibrary> {
        Ok(match &self.silhouettes {
            Some(dir) => SilhouetteLibrary::from_dir(dir)?,
            None => SilhouetteLibrary::builtin(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.masks.p_freeform, 0.45);
        assert_eq!(c.adam.lr, 1e-3);
    }

    #[test]
    fn unknown_keys_rejected_at_any_depth() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"stepz": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"masks": {"tau": 0.5}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"generator": {"resolution": 32, "depth": 2}}"#).is_err());
    }

    #[test]
    fn defaults_roundtrip_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
