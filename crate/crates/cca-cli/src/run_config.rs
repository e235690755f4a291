//! Run configuration: TOML file, command-line overrides, effective echo.
//!
//! Every key has a default; a config file may set any subset. Flags override
//! file values, and the fully resolved configuration is written into the
//! output directory as `effective-config.toml`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use cca_core::config::{EncoderConfig, TrainConfig};
use cca_core::gen::GenConfig;
use cca_core::{EmbedType, Error, Precision, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub data: GenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            data: GenConfig::default(),
        }
    }
}

/// Flag-level overrides shared by the subcommands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub embed_type: Option<EmbedType>,
    pub epochs: Option<usize>,
    pub precision: Option<Precision>,
}

impl RunConfig {
    pub fn load(config_path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match config_path {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                toml::from_str::<RunConfig>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(threads) = overrides.threads {
            cfg.threads = threads.max(1);
        }
        if let Some(et) = overrides.embed_type {
            cfg.encoder.embed_type = et;
            cfg.train.embed_type = et;
        }
        if let Some(epochs) = overrides.epochs {
            cfg.train.epochs = epochs;
        }
        if let Some(p) = overrides.precision {
            cfg.encoder.precision = p;
        }
        // the run seed is the single source; the training section follows it
        cfg.train.seed = cfg.seed;
        cfg.train.embed_type = cfg.encoder.embed_type;
        cfg.encoder.validate()?;
        cfg.train.validate()?;
        cfg.data.validate()?;
        Ok(cfg)
    }

    pub fn echo_into(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize effective config: {e}")))?;
        fs::write(out_dir.join("effective-config.toml"), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_and_flags_merge() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "seed = 9\n[encoder]\ndim = 32\nheads = 2\n[train]\nepochs = 3\n",
        )
        .unwrap();
        let overrides = Overrides {
            seed: Some(11),
            embed_type: Some(EmbedType::Type1),
            ..Overrides::default()
        };
        let cfg = RunConfig::load(Some(&path), &overrides).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.train.seed, 11);
        assert_eq!(cfg.encoder.dim, 32);
        assert_eq!(cfg.encoder.embed_type, EmbedType::Type1);
        assert_eq!(cfg.train.embed_type, EmbedType::Type1);
        assert_eq!(cfg.train.epochs, 3);
        // untouched keys keep defaults
        assert_eq!(cfg.encoder.image_size, 32);
        assert_eq!(cfg.data.counts.train, 2000);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "sedd = 9\n").unwrap();
        assert!(matches!(
            RunConfig::load(Some(&path), &Overrides::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[train]\nmargin = 0.0\n").unwrap();
        assert!(RunConfig::load(Some(&path), &Overrides::default()).is_err());
    }
}
