//! Run configuration, read from a single JSON document.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnvState, ObsMode, TaskId};
use crate::rnd::{RndConfig, StdEstimator};
use crate::sac::SacConfig;
use crate::vae::VaeConfig;
use crate::vice::ViceConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "R3L")]
    R3l,
    #[serde(rename = "R3L_NoVAE")]
    R3lNoVae,
    #[serde(rename = "VICE_Only")]
    ViceOnly,
    #[serde(rename = "VICE_VAE")]
    ViceVae,
    #[serde(rename = "ResetController")]
    ResetController,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::R3l,
        Variant::R3lNoVae,
        Variant::ViceOnly,
        Variant::ViceVae,
        Variant::ResetController,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::R3l => "R3L",
            Variant::R3lNoVae => "R3L_NoVAE",
            Variant::ViceOnly => "VICE_Only",
            Variant::ViceVae => "VICE_VAE",
            Variant::ResetController => "ResetController",
        }
    }

    /// Whether a novelty-seeking perturbation controller alternates with the
    /// task policy.
    pub fn has_perturbation(self) -> bool {
        matches!(self, Variant::R3l | Variant::R3lNoVae)
    }

    /// Whether policies consume the frozen encoder's latent (image runs only).
    pub fn uses_vae(self) -> bool {
        matches!(self, Variant::R3l | Variant::ViceVae | Variant::ResetController)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Hand-specified reward computed from simulator state.
    True,
    /// Goal-classifier logits.
    Vice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resets {
    /// The state is resampled uniformly every `horizon` steps.
    Episodic,
    /// One unbroken trajectory.
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub seed: u64,
    /// Number of epoch pairs; the run has `2 * epochs` epochs.
    pub epochs: usize,
    pub horizon: usize,
    pub c_vice: f32,
    pub c_rnd: f32,
    pub initial_exploration: usize,
    pub train_steps_per_env_step: usize,
    pub std_coefficient: f64,
    pub std_estimator: StdEstimator,
    /// Reset-controller schedule as `(x, y, theta)` poses; the first must be
    /// the goal.
    pub reset_states: Option<Vec<[f64; 3]>>,
    /// Keep `(step, state, next state)` for every transition for auditing.
    pub keep_transition_log: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            horizon: 100,
            c_vice: 1.0,
            c_rnd: 1.0,
            initial_exploration: 1000,
            train_steps_per_env_step: 1,
            std_coefficient: 0.99,
            std_estimator: StdEstimator::Ema,
            reset_states: None,
            keep_transition_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub eval_rollout: usize,
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
    /// Pretrained VAE checkpoint; pretrained in-process when absent.
    pub vae_checkpoint: Option<PathBuf>,
    /// Goal-pool directory written by `collect-goals`; generated when absent.
    pub goal_pool_dir: Option<PathBuf>,
    pub matrix_seeds: usize,
    pub matrix_step_cap: u64,
    pub pose_threshold: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            eval_rollout: 200,
            checkpoint_every: 10,
            out_dir: None,
            vae_checkpoint: None,
            goal_pool_dir: None,
            matrix_seeds: 3,
            matrix_step_cap: 500_000,
            pose_threshold: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskId,
    pub variant: Variant,
    pub obs: ObsMode,
    pub reward: RewardMode,
    pub resets: Resets,
    pub sac: SacConfig,
    pub vice: ViceConfig,
    pub rnd: RndConfig,
    pub vae: VaeConfig,
    #[serde(rename = "loop")]
    pub loop_: LoopConfig,
    pub harness: HarnessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskId::Reposition,
            variant: Variant::R3l,
            obs: ObsMode::Image,
            reward: RewardMode::Vice,
            resets: Resets::Free,
            sac: SacConfig::default(),
            vice: ViceConfig::default(),
            rnd: RndConfig::default(),
            vae: VaeConfig::default(),
            loop_: LoopConfig::default(),
            harness: HarnessConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and applies the `R3L_SEED` override when `seed_override` holds
    /// its value.
    pub fn from_json_with_seed(text: &str, seed_override: Option<&str>) -> Result<Self> {
        let mut cfg = Self::from_json(text)?;
        if let Some(s) = seed_override {
            cfg.loop_.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("R3L_SEED `{s}` is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(self).expect("config serializes")).into()
    }

    /// Latent-encoded policy inputs are in use.
    pub fn uses_vae(&self) -> bool {
        self.obs == ObsMode::Image && self.variant.uses_vae()
    }

    pub fn reset_states(&self) -> Result<Vec<EnvState>> {
        let poses = self
            .loop_
            .reset_states
            .as_ref()
            .ok_or_else(|| Error::Config("ResetController needs loop.reset_states".into()))?;
        let states: Vec<EnvState> = poses
            .iter()
            .map(|p| EnvState::with_pose(p[0], p[1], p[2]))
            .collect();
        for s in &states {
            s.validate()?;
        }
        Ok(states)
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.loop_;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if l.horizon == 0 {
            return bad("loop.horizon must be at least 1");
        }
        if l.train_steps_per_env_step > 2 {
            return bad("loop.train_steps_per_env_step may not exceed 2");
        }
        if !(0.0..1.0).contains(&l.std_coefficient) {
            return bad("loop.std_coefficient must lie in [0, 1)");
        }
        if self.harness.checkpoint_every == 0 {
            return bad("harness.checkpoint_every must be at least 1");
        }
        if self.sac.batch_size == 0 || self.rnd.batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.variant == Variant::ResetController {
            if self.task != TaskId::Reposition {
                return bad("ResetController is defined for the reposition task");
            }
            if self.reward != RewardMode::Vice {
                return bad("ResetController learns one classifier per reset state and needs reward = vice");
            }
            let states = self.reset_states()?;
            if states.len() < 2 {
                return bad("ResetController needs at least two reset states");
            }
            let goal = EnvState::goal(TaskId::Reposition);
            if crate::env::pose_distance(&states[0], &goal)? > 1e-9 {
                return bad("the first reset state must be the goal");
            }
        }
        Ok(())
    }
}
