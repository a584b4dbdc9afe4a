use std::path::Path;

use cdp_core::envs::EnvConfig;
use cdp_core::explorer::{ExplorationConfig, ExplorationMode};
use cdp_core::preference::RewardModelConfig;
use cdp_core::rl::SacConfig;
use cdp_core::vqvae::VqConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LabelSourceKind {
    #[default]
    Oracle,
    Human,
    HumanWithOracleFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreferenceSettings {
    pub model: RewardModelConfig,
    pub holdout_fraction: f64,
}

impl Default for PreferenceSettings {
    fn default() -> Self {
        Self { model: RewardModelConfig::default(), holdout_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoverySettings {
    pub codebook: VqConfig,
    pub steps: usize,
    /// Region quantile for discovery. Defaults to the exploration
    /// `beta_region` in preference modes and to 0 (the whole buffer) for the
    /// uniform baseline.
    pub beta: Option<f64>,
    pub candidate_pool: usize,
}

impl Default for DiscoverySettings {
    fn default() -> Self {
        Self { codebook: VqConfig::default(), steps: 2000, beta: None, candidate_pool: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkillSettings {
    pub steps: usize,
    /// Evaluation rows are emitted every this many steps (0: only at the end).
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for SkillSettings {
    fn default() -> Self {
        Self { steps: 50_000, eval_every: 10_000, eval_episodes: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HumanSettings {
    pub bind: String,
    pub query_ttl_secs: u64,
    /// Labels required before an epoch proceeds (0: all issued queries).
    pub min_labels: usize,
    /// Wait before unlabelled queries fall back to the oracle.
    pub fallback_timeout_secs: u64,
}

impl Default for HumanSettings {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8787".into(), query_ttl_secs: 600, min_labels: 0, fallback_timeout_secs: 300 }
    }
}

/// Everything a run depends on. The TOML form is the run's identity: its
/// hash is stamped on every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub env: EnvConfig,
    pub exploration: ExplorationConfig,
    pub preference: PreferenceSettings,
    pub discovery: DiscoverySettings,
    pub skills: SkillSettings,
    pub sac: SacConfig,
    pub label_source: LabelSourceKind,
    pub human: HumanSettings,
    /// β values for `sweep`.
    pub betas: Vec<f64>,
    /// Write plots when the run completes.
    pub plots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            env: EnvConfig::room_nav_2d(),
            exploration: ExplorationConfig::default(),
            preference: PreferenceSettings::default(),
            discovery: DiscoverySettings::default(),
            skills: SkillSettings::default(),
            sac: SacConfig { batch_size: 128, learning_starts: 200, ..SacConfig::default() },
            label_source: LabelSourceKind::Oracle,
            human: HumanSettings::default(),
            betas: vec![0.1, 0.5, 0.9],
            plots: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(HarnessError::Config(format!("run id {:?} is not a plain directory name", self.run_id)));
        }
        self.env.validate()?;
        self.exploration.validate()?;
        if let Some(b) = self.discovery.beta {
            if !(0.0..=1.0).contains(&b) {
                return Err(HarnessError::Config(format!("discovery beta {b} outside [0, 1]")));
            }
        }
        if self.exploration.mode == ExplorationMode::SmmBaseline && self.label_source != LabelSourceKind::Oracle {
            return Err(HarnessError::Config("smm_baseline asks no queries; use the oracle label source".into()));
        }
        Ok(())
    }

    /// Quantile used to cut the discovery region.
    pub fn discovery_beta(&self) -> f64 {
        self.discovery.beta.unwrap_or(if self.exploration.mode.uses_preferences() {
            self.exploration.beta_region
        } else {
            0.0
        })
    }

    /// Hex SHA-256 of the canonical JSON form, truncated to 16 characters.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_preserves_hash() {
        let cfg = RunConfig { run_id: "abc".into(), seed: 7, ..RunConfig::default() };
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = RunConfig { seed: 8, ..cfg.clone() };
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml("run_id = \"x\"\n[exploration]\nmode = \"smm_baseline\"\n").unwrap();
        assert_eq!(cfg.exploration.mode, ExplorationMode::SmmBaseline);
        assert_eq!(cfg.discovery_beta(), 0.0);
        assert!(RunConfig::from_toml("run_id = \"../up\"").is_err());
    }
}
