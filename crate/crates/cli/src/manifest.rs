//! Run manifest written into every training run directory.

use std::path::{Path, PathBuf};

use cosmo::label::SplitSpec;
use cosmo::{Error, Result, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RUN_MANIFEST: &str = "run.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// Metrics document name for an evaluation pool, e.g. `metrics_targets.json`.
pub fn metrics_file(pool: &str) -> String {
    format!("metrics_{pool}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Full command line of the invocation that wrote this manifest.
    pub command: Vec<String>,
    pub seed: u64,
    pub backend: Value,
    pub config: TrainConfig,
    pub config_file: PathBuf,
    pub split_file: PathBuf,
    pub split: SplitSpec,
    pub checkpoint_dir: PathBuf,
    pub reports: Vec<PathBuf>,
    pub completed_iterations: usize,
}

impl RunManifest {
    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }
}
