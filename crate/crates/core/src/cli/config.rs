use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{config_hash, TrainConfig};
use crate::worldgen::DatasetSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            lambdas: vec![0.01, 0.1, 1.0, 10.0],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckSpec {
    pub composites: usize,
    pub max_depth: usize,
    pub tol_f64: f64,
    pub tol_f32: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            composites: 100,
            max_depth: 8,
            tol_f64: 1e-6,
            tol_f32: 1e-4,
        }
    }
}

/// Settings shared by every command. Loaded from JSON, then overridden
/// by command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into `dataset.seed` and `train.seed` on resolution.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub sweep: SweepSpec,
    pub gradcheck: GradcheckSpec,
    /// Records drawn by `render-masks`.
    pub render_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            sweep: SweepSpec::default(),
            gradcheck: GradcheckSpec::default(),
            render_count: 8,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    /// Propagates the top-level seed and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.dataset.seed = self.seed;
        self.train.seed = self.seed;
        self.dataset.validate()?;
        self.train.validate()?;
        Ok(self)
    }

    /// Canonical JSON (sorted keys, no whitespace).
    pub fn canonical(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::to_value(self)?)?)
    }

    /// Hash of everything except the output location.
    pub fn hash(&self) -> Result<String> {
        config_hash(&Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        })
    }
}
