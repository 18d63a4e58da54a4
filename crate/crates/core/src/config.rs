//! Declarative run configuration: one JSON file drives every pipeline stage.
//! Unknown keys are rejected; absent keys take the desk defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::actvae::{ActVaeConfig, ActVaeTrainConfig};
use crate::error::{CoreError, Result};
use crate::ntp::NtpTrainConfig;
use crate::rf::{KmTrainConfig, RfTrainConfig};
use crate::sim::WorldConfig;
use crate::vdvae::{VdVaeConfig, VdVaeTrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Robot episodes in the training set.
    pub robot_train: usize,
    /// Human episodes in the training set.
    pub human_train: usize,
    /// Robot episodes in the held-out set.
    pub robot_holdout: usize,
    /// Robot episodes in the adaptation (new-task) set.
    pub newtask_episodes: usize,
    /// Object types the robot teleoperation data covers.
    pub robot_types: Vec<usize>,
    /// Object types the human video data covers.
    pub human_types: Vec<usize>,
    /// Held-out appearance type used by the generalization evaluation.
    pub eval_type: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            robot_train: 160,
            human_train: 160,
            robot_holdout: 40,
            newtask_episodes: 48,
            robot_types: vec![0, 1, 2, 3],
            human_types: vec![0, 1, 2, 3, 4, 5],
            eval_type: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtpArchConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub feature_tokens: usize,
}

impl Default for NtpArchConfig {
    fn default() -> Self {
        NtpArchConfig { layers: 6, width: 128, heads: 4, feature_tokens: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RfArchConfig {
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub layer_set: Vec<usize>,
    pub time_features: usize,
    pub euler_steps: usize,
    pub beta_s: f64,
}

impl Default for RfArchConfig {
    fn default() -> Self {
        RfArchConfig {
            width: 64,
            heads: 4,
            depth: 4,
            layer_set: vec![1, 2, 3, 4, 6],
            time_features: 16,
            euler_steps: 10,
            beta_s: 0.999,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Seeded rollouts per evaluation.
    pub rollouts: usize,
    /// Steps of each decoded chunk executed before re-planning.
    pub replan_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { rollouts: 100, replan_every: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; stage seeds derive from it.
    pub seed: u64,
    pub chunk_len: usize,
    pub world: WorldConfig,
    pub gen: GenConfig,
    pub actvae: ActVaeConfig,
    pub actvae_train: ActVaeTrainConfig,
    pub vdvae: VdVaeConfig,
    pub vdvae_train: VdVaeTrainConfig,
    pub ntp: NtpArchConfig,
    pub ntp_train: NtpTrainConfig,
    pub rf: RfArchConfig,
    pub rf_train: RfTrainConfig,
    pub km: KmTrainConfig,
    /// "subtasks_and_actions" or "subtasks_only".
    pub kl_span: String,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            chunk_len: 32,
            world: WorldConfig::default(),
            gen: GenConfig::default(),
            actvae: ActVaeConfig::default(),
            actvae_train: ActVaeTrainConfig::default(),
            vdvae: VdVaeConfig::default(),
            vdvae_train: VdVaeTrainConfig::default(),
            ntp: NtpArchConfig::default(),
            ntp_train: NtpTrainConfig::default(),
            rf: RfArchConfig::default(),
            rf_train: RfTrainConfig::default(),
            km: KmTrainConfig::default(),
            kl_span: "subtasks_and_actions".into(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field consistency: the latent layouts and feature grids of the
    /// stages must agree before any work starts.
    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        if self.actvae.action_dim != w.action_dim() {
            return Err(CoreError::Config(format!(
                "actvae.action_dim {} != world action dim {}",
                self.actvae.action_dim,
                w.action_dim()
            )));
        }
        if self.actvae.chunk_len != self.chunk_len {
            return Err(CoreError::Config("actvae.chunk_len != chunk_len".into()));
        }
        if w.control_rate < self.chunk_len + 1 {
            return Err(CoreError::Config(format!(
                "control_rate {} must exceed chunk_len {}",
                w.control_rate, self.chunk_len
            )));
        }
        if self.vdvae.patches != w.patches || self.vdvae.feature_dim != w.feature_dim {
            return Err(CoreError::Config("vdvae feature grid != world feature grid".into()));
        }
        if self.vdvae.nq != self.actvae.nq || self.vdvae.d_lat != self.actvae.d_lat {
            return Err(CoreError::Config("vdvae latent layout != actvae latent layout".into()));
        }
        if self.gen.robot_types.is_empty() {
            return Err(CoreError::Config("gen.robot_types must be nonempty".into()));
        }
        for tys in [&self.gen.robot_types, &self.gen.human_types] {
            if tys.iter().any(|&t| t >= w.num_object_types) {
                return Err(CoreError::Config("object type outside world range".into()));
            }
        }
        if self.gen.eval_type >= w.num_object_types {
            return Err(CoreError::Config("eval_type outside world range".into()));
        }
        for &l in &self.rf.layer_set {
            if l == 0 || l > self.ntp.layers {
                return Err(CoreError::Config(format!(
                    "rf.layer_set entry {l} outside backbone depth {}",
                    self.ntp.layers
                )));
            }
        }
        if self.rf.depth > self.ntp.layers {
            return Err(CoreError::Config(
                "action expert must not be deeper than the backbone".into(),
            ));
        }
        match self.kl_span.as_str() {
            "subtasks_and_actions" | "subtasks_only" => {}
            other => {
                return Err(CoreError::Config(format!(
                    "kl_span must be subtasks_and_actions or subtasks_only, got {other:?}"
                )))
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
