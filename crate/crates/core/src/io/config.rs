//! Fully resolved run configuration.
//!
//! Resolution order is defaults, then an optional JSON file, then command
//! line flags. The resolved value is echoed into every artifact a run
//! writes, and feeding that echo back in reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::error::{Error, Result};
use crate::experiments::{SubspaceView, SweepSpec};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Linear probe regressing onto a rank-`k` update.
    Recovery,
    /// Two-layer MLP fit to a teacher's labels.
    Classify,
    /// Transformer block regressing onto a perturbed teacher block.
    Block,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recovery" => Ok(TaskKind::Recovery),
            "classify" => Ok(TaskKind::Classify),
            "block" => Ok(TaskKind::Block),
            other => Err(Error::config(format!(
                "unknown task {other:?}; expected recovery, classify or block"
            ))),
        }
    }
}

impl TaskKind {
    /// Adapter targets used when none are given explicitly.
    pub fn default_targets(self) -> Vec<String> {
        let names: &[&str] = match self {
            TaskKind::Recovery => &["W"],
            TaskKind::Classify => &["Up", "Down"],
            TaskKind::Block => &crate::adapters::TRANSFORMER_TARGETS,
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Output rows of the recovery task.
    pub m: usize,
    /// Input features (recovery, classify).
    pub n: usize,
    /// True rank of the recovery target; rank of the teacher perturbation
    /// for the block task.
    pub k: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Model width of the block task.
    pub d: usize,
    pub tokens: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Recovery,
            m: 64,
            n: 64,
            k: 8,
            hidden: 64,
            classes: 4,
            d: 8,
            tokens: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub sweep: SweepSpec,
    /// Hidden nonlinearity of the MLP and transformer block.
    pub activation: String,
    /// Write adapter snapshots every this many steps while training.
    pub snapshot_every: Option<usize>,
    pub subspace_view: SubspaceView,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            adapter: AdapterConfig::default(),
            train: TrainConfig::default(),
            task: TaskConfig::default(),
            sweep: SweepSpec::default(),
            activation: "silu".into(),
            snapshot_every: None,
            subspace_view: SubspaceView::B,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        self.sweep.validate()?;
        if self.activation != "silu" {
            return Err(Error::config(format!(
                "unsupported activation {:?}; only silu is implemented",
                self.activation
            )));
        }
        Ok(())
    }
}
