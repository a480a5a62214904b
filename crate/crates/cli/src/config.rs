//! Run configuration: one JSON file with a section per experiment.
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! command-line flags.

use std::path::Path;

use malthus_core::model::{BoxDomain, ModelConfig, PhasePoint};
use malthus_core::simulate::SimConfig;
use malthus_core::stationary::{DoeblinConfig, ErgodicityOptions, EtaStarOptions};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: GridSection,
    pub sim: SimSection,
    pub doeblin: DoeblinSection,
    pub stationary: StationarySection,
    pub drift: DriftSection,
}

/// Truncation sizes and size-grid resolution for the eigen solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    pub n: usize,
    /// Initial bracket for `lambda_R`; `(0.5, 1.5) * lambda_growth` when absent.
    pub bracket: Option<(f64, f64)>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { r: vec![4.0, 8.0, 16.0], n: 512, bracket: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSection {
    #[serde(flatten)]
    pub cfg: SimConfig,
    pub x0: PhasePoint,
    /// Also dump every individual at every observation time.
    pub snapshots: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        Self { cfg: SimConfig::default(), x0: PhasePoint::new(0.0, 1.0), snapshots: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DoeblinSection {
    #[serde(flatten)]
    pub cfg: DoeblinConfig,
    /// Monte Carlo samples per starting point for the skeleton check; 0 skips it.
    pub mc_samples: usize,
    pub mc_x0: Vec<PhasePoint>,
    /// Allowed excess of `nu` over the estimate, in standard errors.
    pub mc_slack: f64,
}

impl Default for DoeblinSection {
    fn default() -> Self {
        Self {
            cfg: DoeblinConfig::default(),
            mc_samples: 0,
            mc_x0: vec![PhasePoint::new(0.0, 1.0), PhasePoint::new(0.5, 1.5), PhasePoint::new(1.0, 2.0)],
            mc_slack: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StationarySection {
    pub eta: EtaStarOptions,
    pub ergodicity: ErgodicityOptions,
    /// Replicates for the decay table; 0 skips the simulation.
    pub replicates: usize,
    pub x0: PhasePoint,
    pub record_times: Vec<f64>,
    pub cap: usize,
}

impl Default for StationarySection {
    fn default() -> Self {
        Self {
            eta: EtaStarOptions::default(),
            ergodicity: ErgodicityOptions::default(),
            replicates: 500,
            x0: PhasePoint::new(0.0, 1.0),
            record_times: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            cap: malthus_core::simulate::DEFAULT_CAP,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftSection {
    pub domain: BoxDomain,
    pub n: usize,
    /// Multiplier on the nominal `d`.
    pub d_scale: f64,
}

impl Default for DriftSection {
    fn default() -> Self {
        Self { domain: BoxDomain { a: (0.0, 10.0), y: (0.0, 10.0) }, n: 64, d_scale: 1.0 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Read { path: String, source: std::io::Error },
    #[error("malformed config {path}")]
    Parse { path: String, source: serde_json::Error },
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.display().to_string(), source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c.grid.r, vec![4.0, 8.0, 16.0]);
        assert_eq!(c.sim.cfg.replicates, 100);
        assert_eq!(c.drift.n, 64);
    }

    #[test]
    fn sections_are_partial() {
        let c: RunConfig =
            serde_json::from_str(r#"{"sim": {"t_end": 0.0, "replicates": 1}, "model": {"d0": 0.1}}"#).unwrap();
        assert_eq!(c.sim.cfg.t_end, 0.0);
        assert_eq!(c.sim.cfg.cap, malthus_core::simulate::DEFAULT_CAP);
        assert_eq!(c.model.d0, 0.1);
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
    }
}
