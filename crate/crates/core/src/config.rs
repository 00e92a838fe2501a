//! The run configuration tree shared by every command.
//!
//! ```toml
//! seed = 0                  # master seed, see RunConfig::resolve
//! manifest = "data.toml"    # dataset manifest (prep)
//! store = "store"           # preprocessed window store
//! model_path = "model.bin"  # model bundle (active, bench, serve)
//! output = "runs/out"       # where results and resolved_config.toml go
//!
//! [model]                   # HarnetConfig overrides
//! dropout_p = 0.3
//!
//! [plan]                    # ExperimentPlan
//! eta_grid = [0.0, 0.5, 1.0]
//! functions = ["varratio", "random"]
//! ```
//!
//! Every table and key is optional; omitted keys take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::active::ExperimentPlan;
use crate::error::Result;
use crate::model::HarnetConfig;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. When set it replaces the plan's baseline seed and seed
    /// list, and the synthetic generator seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub model: HarnetConfig,
    pub plan: ExperimentPlan,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Applies the master seed to the plan and validates it. Resolving twice
    /// changes nothing.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.plan.baseline_seed = seed;
            self.plan.seeds = vec![seed];
        }
        self.plan.validate()?;
        Ok(self)
    }

    /// Writes the configuration as `resolved_config.toml` in `dir`.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquire::AcquisitionFn;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_tables_and_round_trip() {
        let c = RunConfig::from_toml(
            "seed = 4\nstore = \"s\"\n[model]\ndropout_p = 0.5\n[plan]\nfunctions = [\"bald\"]\n",
        )
        .unwrap();
        assert_eq!(c.model.dropout_p, 0.5);
        assert_eq!(c.model.dense_units, HarnetConfig::default().dense_units);
        assert_eq!(c.plan.functions, vec![AcquisitionFn::Bald]);
        let r = c.resolve().unwrap();
        assert_eq!((r.plan.baseline_seed, r.plan.seeds.clone()), (4, vec![4]));
        assert_eq!(RunConfig::from_toml(&r.to_toml().unwrap()).unwrap(), r);
        assert_eq!(r.clone().resolve().unwrap(), r);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sede = 1").is_err());
        assert!(RunConfig::from_toml("[plan]\netas = [0.1]").is_err());
    }
}
