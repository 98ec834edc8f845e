use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dense::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::default_taus;
use crate::moe::DEFAULT_GATE_STD;
use crate::train::TrainConfig;

/// JSON run configuration. Unknown keys are rejected at every level.
///
/// ```json
/// {
///   "model": { "vocab_size": 256, "d_model": 64, "d_ff": 256, "layers": 4,
///              "heads": 4, "max_seq_len": 128 },
///   "train": { "learning_rate": 0.001, "batch_size": 16, "seq_len": 128,
///              "steps": 1000, "tau": 0.5, "sparsity_weight": 1.0,
///              "mode": "dsmoe_full", "seed": 0 },
///   "experts": 8,
///   "corpus": "data/text.txt"
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Experts per layer for `convert`.
    pub experts: usize,
    pub gate_std: f64,
    pub val_fraction: f64,
    /// Thresholds for `sweep-tau`.
    pub taus: Vec<f64>,
    /// Save an intermediate checkpoint every this many steps (0 = only at end).
    pub checkpoint_interval: usize,
    pub corpus: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            experts: 8,
            gate_std: DEFAULT_GATE_STD,
            val_fraction: 0.05,
            taus: default_taus(),
            checkpoint_interval: 0,
            corpus: None,
            checkpoint_in: None,
            checkpoint_out: None,
            report_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.experts < 2 {
            return Err(Error::Param("experts must be at least 2".into()));
        }
        if !self.gate_std.is_finite() || self.gate_std <= 0.0 {
            return Err(Error::Param("gate_std must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Param("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
