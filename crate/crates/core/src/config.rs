//! Run configuration as a single TOML document.

use serde::{Deserialize, Serialize};

use crate::geometry::AirspaceConfig;
use crate::model::ModelConfig;
use crate::simulator::SimConfig;
use crate::snapshot::{split_sizes, DatasetSpec, DEFAULT_HORIZON_S, DEFAULT_WINDOW_S};
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Look-back window of a snapshot.
    pub window_s: f64,
    /// Prediction horizon.
    pub horizon_s: f64,
    /// Spacing of query times.
    pub cadence_s: f64,
    /// Train/validation/test fractions.
    pub split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { window_s: DEFAULT_WINDOW_S, horizon_s: DEFAULT_HORIZON_S, cadence_s: 60.0, split: [0.8, 0.1, 0.1] }
    }
}

impl DatasetConfig {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec { horizon_s: self.horizon_s, window_s: self.window_s }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("window_s", self.window_s), ("horizon_s", self.horizon_s), ("cadence_s", self.cadence_s)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("dataset.{name} must be positive")));
            }
        }
        split_sizes(1, self.split).map_err(|e| Error::config(format!("dataset.split: {e}")))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub airspace: AirspaceConfig,
    pub simulation: SimConfig,
    pub dataset: DatasetConfig,
    /// Architecture plus ablation switches (`use_mask`, `pooling`,
    /// `head_kind`, `features.dropped`).
    pub model: ModelConfig,
    pub train: TrainConfig,
}


impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.airspace.validate()?;
        self.simulation.validate()?;
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Apply a command-line seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.simulation.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
        self
    }
}
