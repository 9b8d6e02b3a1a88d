//! Simulation configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bayes::TrainConfig;
use crate::error::{Error, Result};
use crate::policy::network::PolicyDims;
use crate::policy::ppo::PpoConfig;
use crate::threat::DetectorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    Greedy,
    Gnn,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "greedy" => Ok(Self::Greedy),
            "gnn" => Ok(Self::Gnn),
            other => Err(Error::Config(format!("unknown policy '{other}' (expected random, greedy or gnn)"))),
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Greedy => "greedy",
            Self::Gnn => "gnn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub classes: usize,
    pub features: usize,
    /// Distance of each class mean from the origin along its own axis.
    pub separation: f64,
    /// Per-coordinate std of the class blobs.
    pub noise_std: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            classes: 2,
            features: 4,
            separation: 1.5,
            noise_std: 1.0,
            train_samples: 600,
            test_samples: 400,
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("task.classes must be >= 2".into()));
        }
        if self.features < self.classes {
            return Err(Error::Config("task.features must be >= task.classes".into()));
        }
        if !(self.separation >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("task.separation and task.noise_std must be >= 0".into()));
        }
        if self.train_samples < self.classes || self.test_samples == 0 {
            return Err(Error::Config("task needs at least one training sample per class and a test set".into()));
        }
        Ok(())
    }
}

/// A CSV file with a header row, numeric feature columns and one label column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub label_column: String,
    /// Fraction of rows held out for testing (taken from the end of the file).
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WirelessConfig {
    pub bandwidth_hz: f64,
    pub noise_dbm_per_hz: f64,
    pub max_delay_s: f64,
    /// Carrier frequency; recorded but unused by the path-loss model.
    pub carrier_hz: f64,
    pub max_power_w: f64,
    pub payload_bits: f64,
}

impl Default for WirelessConfig {
    fn default() -> Self {
        Self {
            bandwidth_hz: 1e6,
            noise_dbm_per_hz: -174.0,
            max_delay_s: 0.01,
            carrier_hz: 3.3e9,
            max_power_w: 0.2,
            payload_bits: 52000.0,
        }
    }
}

impl WirelessConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("wireless.bandwidth_hz", self.bandwidth_hz),
            ("wireless.max_delay_s", self.max_delay_s),
            ("wireless.carrier_hz", self.carrier_hz),
            ("wireless.payload_bits", self.payload_bits),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.max_power_w >= 0.0) {
            return Err(Error::Config("wireless.max_power_w must be >= 0".into()));
        }
        if !self.noise_dbm_per_hz.is_finite() {
            return Err(Error::Config("wireless.noise_dbm_per_hz must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Conventional devices M1.
    pub conventional: usize,
    /// Honest-but-curious devices M2.
    pub curious: usize,
    /// Byzantine devices B.
    pub byzantine: usize,
    pub radius_m: f64,
    /// Size of each device's candidate neighborhood.
    pub nearest_k: usize,
    pub wireless: WirelessConfig,
    pub detector: DetectorConfig,
    /// Screen neighbors and exclude flagged ones from aggregation.
    pub detection: bool,
    pub train: TrainConfig,
    /// Local ascent steps per round.
    pub local_steps: usize,
    pub ppo: PpoConfig,
    pub policy: PolicyKind,
    pub policy_dims: PolicyDims,
    /// Sample requests and aggregation rows from the gnn policy instead of
    /// taking the most probable ones.
    pub stochastic_policy: bool,
    pub rounds: usize,
    pub seed: u64,
    pub task: SyntheticTask,
    pub dataset: Option<CsvSource>,
    pub dirichlet_concentration: f64,
    /// Std (m) of the per-round location jitter; 0 keeps devices fixed.
    pub mobility_std_m: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            conventional: 3,
            curious: 2,
            byzantine: 1,
            radius_m: 1000.0,
            nearest_k: 5,
            wireless: WirelessConfig::default(),
            detector: DetectorConfig::default(),
            detection: true,
            train: TrainConfig {
                learning_rate: 2e-3,
                sigma_min: 0.05,
                ..TrainConfig::default()
            },
            local_steps: 5,
            ppo: PpoConfig::default(),
            policy: PolicyKind::Greedy,
            policy_dims: PolicyDims::default(),
            stochastic_policy: false,
            rounds: 30,
            seed: 0,
            task: SyntheticTask::default(),
            dataset: None,
            dirichlet_concentration: 1.0,
            mobility_std_m: 0.0,
        }
    }
}

impl SimConfig {
    pub fn devices(&self) -> usize {
        self.conventional + self.curious + self.byzantine
    }

    pub fn standard(&self) -> usize {
        self.conventional + self.curious
    }

    pub fn validate(&self) -> Result<()> {
        if self.standard() == 0 {
            return Err(Error::Config("at least one standard device (conventional + curious) is required".into()));
        }
        if !(self.radius_m > 0.0) {
            return Err(Error::Config("radius_m must be positive".into()));
        }
        if self.nearest_k == 0 {
            return Err(Error::Config("nearest_k must be >= 1".into()));
        }
        if !(self.dirichlet_concentration > 0.0) {
            return Err(Error::Config("dirichlet_concentration must be positive".into()));
        }
        if !(self.mobility_std_m >= 0.0) {
            return Err(Error::Config("mobility_std_m must be >= 0".into()));
        }
        if self.local_steps == 0 {
            return Err(Error::Config("local_steps must be >= 1".into()));
        }
        if let Some(ds) = &self.dataset {
            if !(ds.test_fraction > 0.0 && ds.test_fraction < 1.0) {
                return Err(Error::Config("dataset.test_fraction must lie in (0, 1)".into()));
            }
        }
        self.wireless.validate()?;
        self.detector.validate()?;
        self.train.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("train.{m}")),
            other => other,
        })?;
        self.ppo.validate()?;
        self.policy_dims.validate()?;
        self.task.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.devices(), 6);
        assert_eq!(SimConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.wireless.bandwidth_hz, 1e6);
        assert_eq!(cfg.wireless.max_delay_s, 0.01);
        assert_eq!(cfg.wireless.noise_dbm_per_hz, -174.0);
        assert_eq!(cfg.wireless.carrier_hz, 3.3e9);
        assert_eq!(cfg.radius_m, 1000.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&SimConfig::default().to_json()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(SimConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&SimConfig::default().to_json()).unwrap();
        v["wireless"]["extra"] = serde_json::json!(1);
        assert!(SimConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn field_level_messages() {
        let cfg = SimConfig {
            conventional: 0,
            curious: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("standard device")));
        let mut cfg = SimConfig::default();
        cfg.wireless.bandwidth_hz = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("bandwidth_hz")));
        let mut cfg = SimConfig::default();
        cfg.ppo.clip = 2.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("clip")));
    }

    #[test]
    fn policy_names() {
        for p in [PolicyKind::Random, PolicyKind::Greedy, PolicyKind::Gnn] {
            assert_eq!(p.to_string().parse::<PolicyKind>().unwrap(), p);
        }
        assert!("best".parse::<PolicyKind>().is_err());
    }
}
