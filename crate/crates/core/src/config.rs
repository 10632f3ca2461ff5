//! Run configuration file with `[grid]`, `[model]`, `[train]` and
//! `[synthetic]` sections. Every key is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::model::ModelConfig;
use crate::synthetic::SyntheticConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.synthetic.validate(&self.grid)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::parse("[grid]\nrows = 6\ncols = 5\n[train]\nbatch_size = 8\n[model]\ninit = \"zero\"\n").unwrap();
        assert_eq!((cfg.grid.rows, cfg.grid.cols, cfg.grid.window), (6, 5, 5));
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.model.init, crate::model::Init::Zero);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(matches!(RunConfig::parse("[grid]\nrowz = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[train]\nbatch_size = 0\n"), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip_and_hash() {
        let cfg = RunConfig::parse("[train]\nmax_steps = 12\n").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert_eq!(cfg.hash().unwrap(), cfg.clone().hash().unwrap());
        assert_ne!(cfg.hash().unwrap(), RunConfig::default().hash().unwrap());
    }
}
