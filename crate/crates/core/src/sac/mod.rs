//! Soft actor-critic with a tanh-squashed Gaussian actor, twin critics with
//! polyak-averaged targets, and a learned entropy temperature.

mod buffer;

pub use buffer::{assemble, vector_dim, Frame, InputKind, NetInput, ReplayBuffer, Transition};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tensorcore::{AdamConfig, AdamState, FeatureNet, ParamSet, Tensor};

use crate::error::finite;
use crate::env::{IMAGE_CHANNELS, IMAGE_SIZE};
use crate::{Error, Result};

pub const LOG_STD_MIN: f32 = -20.0;
pub const LOG_STD_MAX: f32 = 2.0;
/// Added inside the squashing log-Jacobian to keep it finite at |a| → 1.
pub const SQUASH_EPS: f32 = 1e-6;
/// Largest action magnitude emitted; single-precision `tanh` otherwise
/// rounds to exactly ±1 for pre-squash values beyond about 9.
pub const ACTION_BOUND: f32 = 1.0 - 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub lr: f32,
    pub gamma: f32,
    pub tau: f32,
    pub batch_size: usize,
    pub conv_filters: Vec<usize>,
    pub pooling: bool,
    pub hidden: Vec<usize>,
    pub initial_alpha: f32,
    /// Defaults to `-action_dim` when unset.
    pub target_entropy: Option<f32>,
    pub buffer_capacity: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 256,
            conv_filters: vec![16, 32, 64],
            pooling: false,
            hidden: vec![256, 256],
            initial_alpha: 1.0,
            target_entropy: None,
            buffer_capacity: 200_000,
        }
    }
}

/// Builds a network over `kind` inputs: a conv trunk for pixels, otherwise an
/// MLP over the vector (plus `extra` appended columns, e.g. actions).
pub fn build_net(
    kind: InputKind,
    vector_dim: usize,
    extra: usize,
    filters: &[usize],
    pooling: bool,
    hidden: &[usize],
    out: usize,
) -> Result<FeatureNet> {
    let image = kind
        .uses_image()
        .then_some([IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS]);
    let trunk = if image.is_some() {
        FeatureNet::conv_layers(filters, pooling)
    } else {
        Vec::new()
    };
    Ok(FeatureNet::new(
        image,
        trunk,
        vector_dim + extra,
        FeatureNet::mlp_layers(hidden, out),
    )?)
}

/// Log-density of `tanh(u)` where `u ~ Normal(mu, exp(log_std))`, summed over
/// dimensions. Evaluated in double precision.
pub fn tanh_gaussian_log_prob(mu: &[f32], log_std: &[f32], u: &[f32]) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    mu.iter()
        .zip(log_std)
        .zip(u)
        .map(|((&m, &ls), &u)| {
            let (m, ls, u) = (m as f64, ls as f64, u as f64);
            let z = (u - m) / ls.exp();
            let a = u.tanh();
            -0.5 * z * z - ls - half_log_2pi - (1.0 - a * a + SQUASH_EPS as f64).ln()
        })
        .sum()
}

/// Soft Bellman targets `r + γ·(min Q′ − α·log π′)`; no terminal masking.
pub fn critic_target(rewards: &[f32], next_log_probs: &[f32], next_min_q: &[f32], gamma: f32, alpha: f32) -> Vec<f32> {
    rewards
        .iter()
        .zip(next_log_probs)
        .zip(next_min_q)
        .map(|((&r, &lp), &q)| r + gamma * (q - alpha * lp))
        .collect()
}

/// `target ← (1 − τ)·target + τ·online`.
pub fn polyak_update(target: &mut ParamSet, online: &ParamSet, tau: f32) -> Result<()> {
    Ok(target.blend_from(online, tau)?)
}

/// Scalars from one update, all means over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SacLosses {
    pub critic1: f32,
    pub critic2: f32,
    pub actor: f32,
    pub alpha: f32,
    pub alpha_loss: f32,
    pub entropy: f32,
    pub mean_q: f32,
    pub mean_target: f32,
    pub mean_reward: f32,
}

pub struct ActorGradient {
    pub loss: f32,
    pub grads: ParamSet,
    pub log_probs: Vec<f32>,
    /// Standard-normal noise behind each sampled action, row-major.
    pub eps: Vec<f32>,
}

/// Everything that evolves during training, in checkpointable form.
#[derive(Debug, Clone, PartialEq)]
pub struct SacParams {
    pub actor: ParamSet,
    pub critic1: ParamSet,
    pub critic2: ParamSet,
    pub target1: ParamSet,
    pub target2: ParamSet,
    pub log_alpha: ParamSet,
}

pub struct SacAgent {
    pub config: SacConfig,
    pub input: InputKind,
    pub vector_dim: usize,
    pub action_dim: usize,
    actor_net: FeatureNet,
    critic_net: FeatureNet,
    pub params: SacParams,
    pub optim: [AdamState; 4],
    target_entropy: f32,
    updates: u64,
}

/// Squashed-Gaussian draw for a batch, with what the actor gradient needs.
struct PolicyDraw {
    actions: Vec<f32>,
    log_probs: Vec<f32>,
    eps: Vec<f32>,
    log_std: Vec<f32>,
    clamped: Vec<bool>,
}

fn log_alpha_set(value: f32) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("log_alpha", Tensor::filled(vec![1], value))
        .expect("fresh set");
    p
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(
        config: SacConfig,
        input: InputKind,
        vector_dim: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(config.initial_alpha > 0.0) {
            return Err(Error::Config("sac.initial_alpha must be positive".into()));
        }
        let actor_net = build_net(
            input,
            vector_dim,
            0,
            &config.conv_filters,
            config.pooling,
            &config.hidden,
            2 * action_dim,
        )?;
        let critic_net = build_net(
            input,
            vector_dim,
            action_dim,
            &config.conv_filters,
            config.pooling,
            &config.hidden,
            1,
        )?;
        let actor = actor_net.init_params(rng);
        let critic1 = critic_net.init_params(rng);
        let critic2 = critic_net.init_params(rng);
        let log_alpha = log_alpha_set(config.initial_alpha.ln());
        let adam = AdamConfig::with_lr(config.lr);
        let optim = [
            AdamState::new(&actor, adam),
            AdamState::new(&critic1, adam),
            AdamState::new(&critic2, adam),
            AdamState::new(&log_alpha, adam),
        ];
        let target_entropy = config.target_entropy.unwrap_or(-(action_dim as f32));
        Ok(Self {
            config,
            input,
            vector_dim,
            action_dim,
            actor_net,
            critic_net,
            params: SacParams {
                target1: critic1.clone(),
                target2: critic2.clone(),
                actor,
                critic1,
                critic2,
                log_alpha,
            },
            optim,
            target_entropy,
            updates: 0,
        })
    }

    pub fn alpha(&self) -> f32 {
        self.params.log_alpha.get("log_alpha").expect("log_alpha").data()[0].exp()
    }

    pub fn target_entropy(&self) -> f32 {
        self.target_entropy
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn set_updates(&mut self, n: u64) {
        self.updates = n;
    }

    fn actor_heads(&self, input: &NetInput) -> Result<Tensor<f32>> {
        let out = self.actor_net.infer(&self.params.actor, input.image.as_ref(), &input.vector)?;
        if !out.all_finite() {
            return Err(Error::NonFinite("actor output".into()));
        }
        Ok(out)
    }

    fn draw<R: Rng + ?Sized>(&self, out: &Tensor<f32>, rng: &mut R, deterministic: bool) -> PolicyDraw {
        let a_dim = self.action_dim;
        let b = out.batch();
        let mut d = PolicyDraw {
            actions: Vec::with_capacity(b * a_dim),
            log_probs: Vec::with_capacity(b),
            eps: Vec::with_capacity(b * a_dim),
            log_std: Vec::with_capacity(b * a_dim),
            clamped: Vec::with_capacity(b * a_dim),
        };
        let half_log_2pi = 0.5 * (2.0 * std::f32::consts::PI).ln();
        for i in 0..b {
            let row = out.row(i);
            let mut lp = 0.0f32;
            for j in 0..a_dim {
                let raw = row[a_dim + j];
                let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                let e: f32 = if deterministic { 0.0 } else { rng.sample(StandardNormal) };
                let u = row[j] + ls.exp() * e;
                let a = u.tanh().clamp(-ACTION_BOUND, ACTION_BOUND);
                lp += -0.5 * e * e - ls - half_log_2pi - (1.0 - a * a + SQUASH_EPS).ln();
                d.actions.push(a);
                d.eps.push(e);
                d.log_std.push(ls);
                d.clamped.push(raw != ls);
            }
            d.log_probs.push(lp);
        }
        d
    }

    /// Actions and log-probabilities for a batch. With `deterministic` the
    /// pre-squash sample is the mean.
    pub fn sample_actions<R: Rng + ?Sized>(
        &self,
        input: &NetInput,
        rng: &mut R,
        deterministic: bool,
    ) -> Result<(Tensor<f32>, Vec<f32>)> {
        let out = self.actor_heads(input)?;
        let d = self.draw(&out, rng, deterministic);
        Ok((Tensor::new(vec![out.batch(), self.action_dim], d.actions)?, d.log_probs))
    }

    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        frame: &Frame,
        rng: &mut R,
        deterministic: bool,
    ) -> Result<(Vec<f32>, f32)> {
        let input = assemble(&[frame], self.input)?;
        let (a, lp) = self.sample_actions(&input, rng, deterministic)?;
        Ok((a.into_data(), lp[0]))
    }

    fn critic_input(&self, input: &NetInput, actions: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(Tensor::concat_cols(&input.vector, actions)?)
    }

    fn q_values(&self, params: &ParamSet, input: &NetInput, actions: &Tensor<f32>) -> Result<Vec<f32>> {
        let v = self.critic_input(input, actions)?;
        Ok(self.critic_net.infer(params, input.image.as_ref(), &v)?.into_data())
    }

    /// Soft Bellman targets for a batch, drawing next actions from `rng`.
    pub fn compute_targets<R: Rng + ?Sized>(
        &self,
        next: &NetInput,
        rewards: &[f32],
        rng: &mut R,
    ) -> Result<Vec<f32>> {
        let (next_a, next_lp) = self.sample_actions(next, rng, false)?;
        let q1 = self.q_values(&self.params.target1, next, &next_a)?;
        let q2 = self.q_values(&self.params.target2, next, &next_a)?;
        let min_q: Vec<f32> = q1.iter().zip(&q2).map(|(a, b)| a.min(*b)).collect();
        Ok(critic_target(rewards, &next_lp, &min_q, self.config.gamma, self.alpha()))
    }

    /// Samples a batch, scores next observations with `reward_fn`, and takes
    /// one gradient step on critics, actor and temperature, then moves the
    /// targets.
    pub fn update_step<R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        reward_fn: &mut dyn FnMut(&[&Frame]) -> Result<Vec<f32>>,
        rng: &mut R,
    ) -> Result<SacLosses> {
        if buffer.len() < self.config.batch_size {
            return Err(Error::Invalid(format!(
                "replay holds {} transitions, batch needs {}",
                buffer.len(),
                self.config.batch_size
            )));
        }
        let idx = buffer.sample_indices(self.config.batch_size, rng)?;
        self.update_on_indices(buffer, &idx, reward_fn, rng)
    }

    /// [`update_step`](Self::update_step) on a caller-chosen batch.
    pub fn update_on_indices<R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        idx: &[usize],
        reward_fn: &mut dyn FnMut(&[&Frame]) -> Result<Vec<f32>>,
        rng: &mut R,
    ) -> Result<SacLosses> {
        let ts: Vec<&Transition> = idx.iter().map(|&i| buffer.get(i)).collect();
        let obs: Vec<&Frame> = ts.iter().map(|t| &*t.obs).collect();
        let next: Vec<&Frame> = ts.iter().map(|t| &*t.next_obs).collect();
        let rewards = reward_fn(&next)?;
        if rewards.len() != ts.len() {
            return Err(Error::Invalid("reward function returned the wrong batch size".into()));
        }
        let obs_in = assemble(&obs, self.input)?;
        let next_in = assemble(&next, self.input)?;
        let mut actions = Vec::with_capacity(ts.len() * self.action_dim);
        for t in &ts {
            actions.extend_from_slice(&t.action);
        }
        let actions = Tensor::new(vec![ts.len(), self.action_dim], actions)?;
        self.update_on_batch(&obs_in, &actions, &next_in, &rewards, rng)
    }

    pub fn update_on_batch<R: Rng + ?Sized>(
        &mut self,
        obs: &NetInput,
        actions: &Tensor<f32>,
        next: &NetInput,
        rewards: &[f32],
        rng: &mut R,
    ) -> Result<SacLosses> {
        let b = obs.batch();
        let bf = b as f32;
        let alpha = self.alpha();

        // Critics.
        let targets = self.compute_targets(next, rewards, rng)?;
        let cv = self.critic_input(obs, actions)?;
        let mut critic_losses = [0.0f32; 2];
        let mut mean_q = 0.0;
        for (k, loss_slot) in critic_losses.iter_mut().enumerate() {
            let params = if k == 0 { &self.params.critic1 } else { &self.params.critic2 };
            let (q, cache) = self.critic_net.forward(params, obs.image.as_ref(), &cv)?;
            let mut grad = Vec::with_capacity(b);
            let mut loss = 0.0f32;
            for (qv, y) in q.data().iter().zip(&targets) {
                let diff = qv - y;
                loss += 0.5 * diff * diff / bf;
                grad.push(diff / bf);
            }
            *loss_slot = finite(loss, if k == 0 { "critic1 loss" } else { "critic2 loss" })?;
            if k == 0 {
                mean_q = q.data().iter().sum::<f32>() / bf;
            }
            let g = self
                .critic_net
                .backward(params, &cache, &Tensor::new(vec![b, 1], grad)?, false)?;
            let p = if k == 0 { &mut self.params.critic1 } else { &mut self.params.critic2 };
            self.optim[1 + k].step(p, &g.params)?;
        }

        let actor = self.actor_gradient(obs, alpha, rng)?;
        self.optim[0].step(&mut self.params.actor, &actor.grads)?;

        let mean_lp = actor.log_probs.iter().sum::<f32>() / bf;
        let alpha_loss = -alpha.ln() * (mean_lp + self.target_entropy);
        let temp_grad = finite(-(mean_lp + self.target_entropy), "temperature gradient")?;
        self.optim[3].step(&mut self.params.log_alpha, &log_alpha_set(temp_grad))?;

        polyak_update(&mut self.params.target1, &self.params.critic1, self.config.tau)?;
        polyak_update(&mut self.params.target2, &self.params.critic2, self.config.tau)?;
        self.updates += 1;

        Ok(SacLosses {
            critic1: critic_losses[0],
            critic2: critic_losses[1],
            actor: actor.loss,
            alpha,
            alpha_loss,
            entropy: -mean_lp,
            mean_q,
            mean_target: targets.iter().sum::<f32>() / bf,
            mean_reward: rewards.iter().sum::<f32>() / bf,
        })
    }

    /// Reparameterized actor loss `mean(α·log π(a|s) − min Q(s, a))` and its
    /// gradient with respect to the actor parameters, critics held fixed.
    pub fn actor_gradient<R: Rng + ?Sized>(&self, obs: &NetInput, alpha: f32, rng: &mut R) -> Result<ActorGradient> {
        let b = obs.batch();
        let bf = b as f32;
        let a_dim = self.action_dim;
        let (out, actor_cache) = self.actor_net.forward(&self.params.actor, obs.image.as_ref(), &obs.vector)?;
        if !out.all_finite() {
            return Err(Error::NonFinite("actor output".into()));
        }
        let d = self.draw(&out, rng, false);
        let new_actions = Tensor::new(vec![b, a_dim], d.actions.clone())?;
        let av = self.critic_input(obs, &new_actions)?;
        let (q1, c1) = self.critic_net.forward(&self.params.critic1, obs.image.as_ref(), &av)?;
        let (q2, c2) = self.critic_net.forward(&self.params.critic2, obs.image.as_ref(), &av)?;
        let mut g1 = vec![0.0f32; b];
        let mut g2 = vec![0.0f32; b];
        let mut actor_loss = 0.0f32;
        for i in 0..b {
            let (a, c) = (q1.data()[i], q2.data()[i]);
            if a <= c {
                g1[i] = -1.0 / bf;
            } else {
                g2[i] = -1.0 / bf;
            }
            actor_loss += (alpha * d.log_probs[i] - a.min(c)) / bf;
        }
        finite(actor_loss, "actor loss")?;
        let d1 = self
            .critic_net
            .backward(&self.params.critic1, &c1, &Tensor::new(vec![b, 1], g1)?, false)?
            .vector;
        let d2 = self
            .critic_net
            .backward(&self.params.critic2, &c2, &Tensor::new(vec![b, 1], g2)?, false)?
            .vector;
        let vdim = obs.vector.row_len();
        let mut grad_out = vec![0.0f32; b * 2 * a_dim];
        for i in 0..b {
            for j in 0..a_dim {
                let k = i * a_dim + j;
                let a = d.actions[k];
                let one_minus = 1.0 - a * a;
                let dq_da = d1.row(i)[vdim + j] + d2.row(i)[vdim + j];
                let dlogp_du = 2.0 * a * one_minus / (one_minus + SQUASH_EPS);
                let dl_du = alpha * dlogp_du / bf + dq_da * one_minus;
                let sigma = d.log_std[k].exp();
                grad_out[i * 2 * a_dim + j] = dl_du;
                grad_out[i * 2 * a_dim + a_dim + j] = if d.clamped[k] {
                    0.0
                } else {
                    dl_du * sigma * d.eps[k] - alpha / bf
                };
            }
        }
        let ga = self.actor_net.backward(
            &self.params.actor,
            &actor_cache,
            &Tensor::new(vec![b, 2 * a_dim], grad_out)?,
            false,
        )?;
        Ok(ActorGradient {
            loss: actor_loss,
            grads: ga.params,
            log_probs: d.log_probs,
            eps: d.eps,
        })

    }

    /// Input-to-output maps of the actor and critic, for gradient checks.
    pub fn networks(&self) -> (&FeatureNet, &FeatureNet) {
        (&self.actor_net, &self.critic_net)
    }
}

/// Deterministic actor rebuilt from saved parameters, for evaluation.
#[derive(Debug, Clone)]
pub struct Actor {
    net: FeatureNet,
    pub params: ParamSet,
    pub input: InputKind,
    pub action_dim: usize,
}

impl Actor {
    pub fn new(config: &SacConfig, input: InputKind, vector_dim: usize, action_dim: usize, params: ParamSet) -> Result<Self> {
        let net = build_net(
            input,
            vector_dim,
            0,
            &config.conv_filters,
            config.pooling,
            &config.hidden,
            2 * action_dim,
        )?;
        net.check_params(&params)?;
        Ok(Self { net, params, input, action_dim })
    }

    /// Squashed mean action.
    pub fn act(&self, frame: &Frame) -> Result<Vec<f32>> {
        let input = assemble(&[frame], self.input)?;
        let out = self.net.infer(&self.params, input.image.as_ref(), &input.vector)?;
        if !out.all_finite() {
            return Err(Error::NonFinite("actor output".into()));
        }
        Ok(out.row(0)[..self.action_dim]
            .iter()
            .map(|m| m.tanh().clamp(-ACTION_BOUND, ACTION_BOUND))
            .collect())
    }
}

impl SacAgent {
    pub fn actor(&self) -> Actor {
        Actor {
            net: self.actor_net.clone(),
            params: self.params.actor.clone(),
            input: self.input,
            action_dim: self.action_dim,
        }
    }
}

#[cfg(test)]
mod tests;
