use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use eim_core::expert::DatasetConfig;
use eim_core::{PpoConfig, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Policy evaluation settings shared by `train-policy` and `eval-policy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            seed: 0,
        }
    }
}

/// Everything a run depends on. Flags override fields loaded from `--config`,
/// and the merged record is echoed into each run directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub design: SynthConfig,
    pub design_seed: u64,
    pub expert: DatasetConfig,
    pub train: TrainConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `out_dir`, then `$EIM_OUT_DIR`, then `runs`.
    pub fn out_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os("EIM_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization") + "\n"
    }
}
