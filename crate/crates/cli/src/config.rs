use std::path::{Path, PathBuf};

use ganbank::datasets::SceneRanges;
use ganbank::forward_models::ModelKind;
use ganbank::generators::{GanConfig, GeneratorConfig};
use ganbank::inversion::{EncoderConfig, InversionConfig, PtiConfig, DEFAULT_BANK_SIZE};
use ganbank::{io, Error, Result};
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    pub data: Option<PathBuf>,
    pub gens: Vec<PathBuf>,
    pub encoders: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Optional `--config` document. Command-line flags override its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelKind,
    pub seed: u64,
    pub inversion: InversionConfig,
    pub pti: PtiConfig,
    pub bank_size: usize,
    pub scene_ranges: SceneRanges,
    pub generator: GeneratorConfig,
    pub gan: GanConfig,
    pub encoder: EncoderConfig,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: RUN_CONFIG_VERSION,
            model: ModelKind::Lambertian,
            seed: 0,
            inversion: InversionConfig::default(),
            pti: PtiConfig::default(),
            bank_size: DEFAULT_BANK_SIZE,
            scene_ranges: SceneRanges::default(),
            generator: GeneratorConfig::default(),
            gan: GanConfig::default(),
            encoder: EncoderConfig::default(),
            paths: RunPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg: RunConfig = io::read_json(path)?;
        if cfg.version != RUN_CONFIG_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("run config version {} (expected {RUN_CONFIG_VERSION})", cfg.version),
            });
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"version": 1, "stepz": 3}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
        std::fs::write(&p, r#"{"version": 1, "inversion": {"steps": 7, "lr": 0.5}}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!((cfg.inversion.steps, cfg.inversion.lr), (7, 0.5));
        assert_eq!(cfg.bank_size, DEFAULT_BANK_SIZE);
    }

    #[test]
    fn version_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"version": 2}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
    }

    #[test]
    fn default_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        io::write_json(&p, &RunConfig::default()).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), RunConfig::default());
    }
}
