//! Representation pretraining and the data it consumes.

use crate::config::{Resets, RewardMode, RunConfig, Variant};
use crate::env::{render, Image, ObsMode};
use crate::training::{stream_rng, streams, Trainer};
use crate::vae::{random_state_images, VaeData, VaeModel};
use crate::Result;

use super::experiments::epochs_for_budget;

/// Frames visited by a state-based, novelty-only policy run without resets.
pub fn exploratory_images(config: &RunConfig, n: usize) -> Result<Vec<Image>> {
    let mut c = config.clone();
    c.variant = Variant::R3lNoVae;
    c.obs = ObsMode::State;
    c.reward = RewardMode::True;
    c.resets = Resets::Free;
    c.loop_.c_vice = 0.0;
    c.loop_.keep_transition_log = false;
    c.sac.buffer_capacity = c.sac.buffer_capacity.max(n);
    c.loop_.epochs = epochs_for_budget(&c, n as u64);
    let mut t = Trainer::new(c, None, None)?;
    while t.env_steps < n as u64 && !t.is_done() {
        t.run_epoch()?;
    }
    Ok(t.buffer.iter().take(n).map(|tr| render(&tr.next_obs.state)).collect())
}

pub fn vae_images(config: &RunConfig) -> Result<Vec<Image>> {
    let n = config.vae.n_samples;
    match config.vae.data {
        VaeData::RandomStates => {
            let mut rng = stream_rng(config.loop_.seed, streams::VAE_DATA);
            Ok(random_state_images(config.task, n, &mut rng))
        }
        VaeData::Exploratory => exploratory_images(config, n),
    }
}

/// Fits and freezes a representation for `config.task`.
pub fn pretrain_vae(config: &RunConfig) -> Result<VaeModel> {
    let images = vae_images(config)?;
    let mut rng = stream_rng(config.loop_.seed, streams::VAE);
    let mut model = VaeModel::new(config.vae.clone(), &mut rng)?;
    model.fit(&images, config.vae.epochs, &mut rng)?;
    Ok(model)
}
