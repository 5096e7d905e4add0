//! Run configuration file (TOML). Every table and key is optional and
//! falls back to its default:
//!
//! ```toml
//! deterministic = true
//!
//! [train]            # dynamics stage: Adam, batches, schedule, weights,
//! iterations = 5000  # ablation switches and [train.model] architecture
//!
//! [dataset]          # supervision pools drawn from a synthetic bundle
//! flow_samples = 20000
//!
//! [decoder]          # animation-stage decoder fit
//! iterations = 0
//!
//! [eval]
//! flow_probes = 4000
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use flowsplat_core::renderer::DecoderConfig;
use flowsplat_core::training::{DatasetConfig, DecoderTrainConfig, TrainConfig};

use crate::{read_toml, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Scene-flow probes for EPE/L1.
    pub flow_probes: usize,
    /// Monte-Carlo probes for the divergence estimate.
    pub divergence_probes: usize,
    /// Fluid kernels advected for the boundary-violation rate.
    pub violation_points: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            flow_probes: 4000,
            divergence_probes: 2000,
            violation_points: 2000,
            seed: 99,
        }
    }
}

/// Decoder architecture plus its fitting schedule. Zero iterations keeps
/// the pass-through decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderSection {
    pub architecture: DecoderConfig,
    pub fit: DecoderTrainConfig,
}

impl Default for DecoderSection {
    fn default() -> Self {
        DecoderSection {
            architecture: DecoderConfig::default(),
            fit: DecoderTrainConfig {
                iterations: 0,
                ..DecoderTrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Zero all wall-clock fields so repeated runs produce identical files.
    pub deterministic: bool,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub decoder: DecoderSection,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_toml(path)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("[train]\niterations = 7\n[train.weights]\ndiv = 0.5\n").unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.train.weights.div, 0.5);
        assert_eq!(c.train.weights.ns, TrainConfig::default().weights.ns);
        assert_eq!(c.dataset, DatasetConfig::default());
        assert!(!c.deterministic);
    }

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_enum_value_is_an_error() {
        assert!(toml::from_str::<RunConfig>("[train.model]\nactivation = \"swish\"\n").is_err());
    }
}
