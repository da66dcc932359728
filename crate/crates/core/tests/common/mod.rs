#![allow(dead_code)]

use r3l::config::{Resets, RewardMode, RunConfig, Variant};
use r3l::env::{ObsMode, TaskId};
use r3l::vae::VaeConfig;

/// Small networks and short epochs so a whole run takes well under a second.
pub fn tiny(task: TaskId, variant: Variant, obs: ObsMode, reward: RewardMode, resets: Resets) -> RunConfig {
    let mut c = RunConfig {
        task,
        variant,
        obs,
        reward,
        resets,
        ..RunConfig::default()
    };
    c.sac.hidden = vec![16, 16];
    c.sac.batch_size = 16;
    c.sac.conv_filters = vec![4, 4];
    c.sac.buffer_capacity = 10_000;
    c.vice.hidden = vec![16];
    c.vice.batch_size = 16;
    c.vice.conv_filters = vec![4, 4];
    c.vice.goal_pool_size = 20;
    c.rnd.hidden = vec![16];
    c.rnd.embedding_dim = 8;
    c.rnd.conv_filters = vec![4, 4];
    c.vae = VaeConfig {
        encoder_filters: vec![4, 4, 4],
        latent_dim: 4,
        batch_size: 16,
        n_samples: 32,
        epochs: 1,
        ..VaeConfig::default()
    };
    c.loop_.horizon = 10;
    c.loop_.epochs = 3;
    c.loop_.initial_exploration = 40;
    c.harness.checkpoint_every = 2;
    c.harness.eval_rollout = 20;
    c
}

pub fn tiny_r3l_state() -> RunConfig {
    tiny(TaskId::Reposition, Variant::R3l, ObsMode::State, RewardMode::Vice, Resets::Free)
}
