// SPDX-License-Identifier: Apache-2.0

//! TOML run configuration. Every section is optional; the resolved form,
//! with all defaults filled in, is echoed into each report.

use std::path::{Path, PathBuf};

use cart_core::dataset::CollectConfig;
use cart_core::encoder::EncoderConfig;
use cart_core::metrics::Pooling;
use cart_core::objective::{ObjectiveConfig, TrainConfig};
use cart_core::pipeline::{compact_policy_config, ExperimentConfig};
use cart_core::policy::PolicyConfig;
use cart_core::sim::{RolloutConfig, SweepConfig, TerrainSpec};
use cart_core::tss::{EmbedderConfig, HeadTrainConfig, LibraryParams};
use cart_core::{CoreError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub segments: usize,
    pub trials: usize,
    pub ctx_dim: usize,
    pub head_hidden: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            segments: 132_775,
            trials: 20,
            ctx_dim: 2 * EncoderConfig::default().latent,
            head_hidden: HeadTrainConfig::default().hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Label of the method compared against the baselines.
    pub candidate: String,
    /// Baseline labels; empty means every other label found.
    pub baselines: Vec<String>,
    pub pooling: Pooling,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            candidate: "cart".into(),
            baselines: vec![],
            pooling: Pooling::Concatenate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives collection, training, head training and rollouts.
    pub seed: u64,
    pub policy: PolicyConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub calibrate_effort: bool,
    pub collect: CollectConfig,
    pub library: LibraryParams,
    pub embedder: EmbedderConfig,
    pub head: HeadTrainConfig,
    pub rollout: RolloutConfig,
    /// Terrain for `infer`.
    pub terrain: TerrainSpec,
    /// Lateral slip injected per stance phase during `infer`, metres.
    pub perturbation: f64,
    pub sweep: SweepConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            seed: 0,
            policy: compact_policy_config(),
            objective: e.objective,
            train: e.train,
            calibrate_effort: e.calibrate_effort,
            collect: e.collect,
            library: e.library,
            embedder: e.embedder,
            head: e.head,
            rollout: e.rollout,
            terrain: TerrainSpec::default(),
            perturbation: 0.0,
            sweep: SweepConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CoreError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| CoreError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Keys in `text` override the defaults one leaf at a time, so a partial
    /// `[policy.encoder]` table keeps the other compact-network widths.
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        let user: toml::Table = toml::from_str(text)?;
        let mut base = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut base, user);
        base.try_into()
    }

    /// Applies a seed override and copies the seed into every seeded stage.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.collect.seed = self.seed;
        self.train.seed = self.seed;
        self.head.seed = self.seed;
        self.terrain.seed = self.seed;
        self.experiment().validate()?;
        self.terrain.validate()?;
        if !(self.perturbation >= 0.0) {
            return Err(CoreError::Config(format!("perturbation must be non-negative, got {}", self.perturbation)));
        }
        Ok(self)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            policy: self.policy.clone(),
            objective: self.objective,
            train: self.train.clone(),
            collect: self.collect.clone(),
            library: self.library,
            embedder: self.embedder,
            head: self.head.clone(),
            rollout: self.rollout.clone(),
            calibrate_effort: self.calibrate_effort,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn out_dir(out: &Option<PathBuf>, default: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from(default))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let c = RunConfig::from_toml("seed = 3\n[objective]\nbeta_s = 2.0\n[policy.encoder]\nmesh_hidden = 12\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.objective.beta_s, 2.0);
        assert_eq!(c.objective.beta_v, 1.0);
        assert_eq!(c.policy.encoder.mesh_hidden, 12);
        assert_eq!(c.policy.encoder.latent, compact_policy_config().encoder.latent);
        assert!(RunConfig::from_toml("sead = 3\n").is_err());
        assert!(RunConfig::from_toml("[objective]\nbeta_q = 1.0\n").is_err());
    }

    #[test]
    fn seed_propagates_and_validation_runs() {
        let c = RunConfig::default().resolve(Some(42)).unwrap();
        assert_eq!((c.collect.seed, c.train.seed, c.head.seed, c.terrain.seed), (42, 42, 42, 42));
        let mut bad = RunConfig::default();
        bad.objective.sigma_v = 0.0;
        assert!(matches!(bad.resolve(None), Err(CoreError::Config(_))));
    }
}
