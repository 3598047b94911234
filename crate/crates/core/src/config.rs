//! Run configuration file: TOML with a `[model]` and a `[train]` table.
//! Every key is optional and defaults to the reference setting.
//!
//! ```toml
//! [model]
//! d_model = 128
//! heads = 4
//! depths = [1, 1, 2, 1, 1]
//!
//! [train]
//! batch_size = 4
//! epochs = 50
//! peak_lr = 0.002
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hourglass::ModelConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::parse("[model]\nd_model = 64\nheads = 4\n\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.model.depths, [4, 4, 8, 4, 4]);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.warmup_epochs, 2);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_sections_and_bad_values() {
        assert!(RunConfig::parse("[modle]\n").is_err());
        assert!(RunConfig::parse("[model]\nheads = 5\n").is_err());
        assert!(RunConfig::parse("[train]\nbatch_size = 0\n").is_err());
        assert!(RunConfig::parse("[model]\nlayout = \"pyramid\"\n").is_err());
    }
}
