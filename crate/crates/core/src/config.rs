//! Experiment configuration files (TOML).
//!
//! ```toml
//! output_dir = "out/desk"
//!
//! [dataset]
//! K = 10
//! D = 16
//! num_clients = 5
//! # ...
//!
//! [federation]
//! num_clients = 5
//! global_rounds = 5
//!
//! [federation.training]
//! learning_rate = 0.05
//! batch_size = 16
//! local_epochs = 3
//! seed = 1
//!
//! [calibration]
//! tail_size_eta = 20
//! alpha_rank = 10
//! epsilon_threshold = 0.0
//! metric = "euclidean"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::numerics::DistanceMetric;
use crate::openmax::{CalibrationConfig, MavWeighting};

/// Calibration settings as written in a config file; omitted keys take the
/// defaults of [`CalibrationConfig::defaults_for`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub tail_size_eta: Option<usize>,
    pub alpha_rank: Option<usize>,
    pub epsilon_threshold: Option<f64>,
    pub metric: Option<DistanceMetric>,
    pub mav_weighting: Option<MavWeighting>,
}

impl CalibrationSection {
    pub fn resolve(&self, num_classes: usize) -> CalibrationConfig {
        let d = CalibrationConfig::defaults_for(num_classes);
        CalibrationConfig {
            tail_size_eta: self.tail_size_eta.unwrap_or(d.tail_size_eta),
            alpha_rank: self.alpha_rank.unwrap_or(d.alpha_rank),
            epsilon_threshold: self.epsilon_threshold.unwrap_or(d.epsilon_threshold),
            metric: self.metric.unwrap_or(d.metric),
            mav_weighting: self.mav_weighting.unwrap_or(d.mav_weighting),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub federation: FederationConfig,
    #[serde(default)]
    pub calibration: CalibrationSection,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.inner().message().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_toml(&text).map_err(|e| e.in_file(path))
    }

    pub fn calibration_config(&self) -> CalibrationConfig {
        self.calibration.resolve(self.dataset.num_classes)
    }

    /// Master seed: drives both data generation and training.
    pub fn seed(&self) -> u64 {
        self.federation.training.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.federation.training.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dataset.num_classes;
        self.dataset
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.federation
            .validate()
            .map_err(|e| Error::Config(format!("federation: {e}")))?;
        if self.federation.num_clients != self.dataset.num_clients {
            return Err(Error::Config(format!(
                "federation.num_clients ({}) does not match dataset.num_clients ({})",
                self.federation.num_clients, self.dataset.num_clients
            )));
        }
        let cal = self.calibration_config();
        if cal.alpha_rank > k {
            return Err(Error::Config(format!(
                "calibration.alpha_rank ({}) exceeds dataset.K ({k})",
                cal.alpha_rank
            )));
        }
        cal.validate(k)
            .map_err(|e| Error::Config(format!("calibration: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = r#"
output_dir = "out"

[dataset]
K = 10
D = 16
num_clients = 5
train_per_class_per_client = 60
test_per_class = 50
num_unknown = 500
cluster_std = 0.5
cluster_center_scale = 5.0
seed = 3

[federation]
num_clients = 5
global_rounds = 5

[federation.training]
learning_rate = 0.05
batch_size = 16
local_epochs = 3
seed = 3

[calibration]
tail_size_eta = 20
metric = "euclidean"
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(DESK).unwrap();
        assert_eq!(cfg.dataset.num_classes, 10);
        assert_eq!(cfg.dataset.separation_stds, 3.0);
        assert_eq!(cfg.federation.hidden_units, 32);
        let cal = cfg.calibration_config();
        assert_eq!(cal.alpha_rank, 10);
        assert_eq!(cal.epsilon_threshold, 0.0);
        assert_eq!(cfg.with_seed(9).dataset.seed, 9);
    }

    #[test]
    fn alpha_above_k_names_both_fields() {
        let text = DESK.replace("tail_size_eta = 20", "tail_size_eta = 20\nalpha_rank = 11");
        let msg = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(
            msg.contains("calibration.alpha_rank") && msg.contains("dataset.K"),
            "{msg}"
        );
    }

    #[test]
    fn client_count_mismatch() {
        let text = DESK.replacen(
            "num_clients = 5\nglobal_rounds",
            "num_clients = 4\nglobal_rounds",
            1,
        );
        let msg = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(msg.contains("federation.num_clients"), "{msg}");
    }

    #[test]
    fn parse_errors_carry_the_field_path() {
        let text = DESK.replace("K = 10", "K = \"ten\"");
        let msg = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(msg.contains("dataset.K"), "{msg}");
        let text = DESK.replace(
            "learning_rate = 0.05",
            "learning_rate = 0.05\nmomentum = 0.9",
        );
        let msg = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(
            msg.contains("federation.training") && msg.contains("momentum"),
            "{msg}"
        );
        let msg = ExperimentConfig::from_toml(&DESK.replace("\"euclidean\"", "\"manhattan\""))
            .unwrap_err();
        assert!(msg.to_string().contains("calibration.metric"), "{msg}");
    }
}
