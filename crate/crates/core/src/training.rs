//! The reset-free training loop: alternating task and perturbation
//! controllers over one continuing trajectory, with the baseline variants.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorcore::ParamSet;

use crate::config::{Resets, RewardMode, RunConfig, Variant};
use crate::env::{
    env_init, env_step, observe, sample_random_state, success, task_metric, true_reward, EnvState, ObsMode,
};
use crate::rnd::{RndPair, RunningStd};
use crate::sac::{vector_dim, Frame, InputKind, ReplayBuffer, SacAgent, SacLosses, Transition};
use crate::vae::VaeModel;
use crate::vice::{GoalPool, ViceClassifier};
use crate::{Error, Result};

/// Policy index for 1-based epoch `i`: 0 is the task policy, 1 the
/// perturbation policy. The first epoch perturbs.
pub fn select_policy(i: usize) -> usize {
    i % 2
}

/// Reward of the task policy (`k = 0`) or the perturbation policy (`k = 1`)
/// from already-normalized terms.
pub fn combined_reward(k: usize, vice: f32, rnd: f32, c_vice: f32, c_rnd: f32) -> f32 {
    if k == 0 {
        c_vice * vice + c_rnd * rnd
    } else {
        rnd
    }
}

/// Random-stream identifiers; each run owns independent ChaCha streams.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const ACT: u64 = 1;
    pub const LEARN: u64 = 2;
    pub const GOALS: u64 = 3;
    pub const VAE: u64 = 4;
    pub const VAE_DATA: u64 = 5;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: String,
    pub variant: String,
    pub seed: u64,
    pub epoch: usize,
    pub env_steps: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub epoch: usize,
    pub env_steps: u64,
    pub actor: ParamSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoggedTransition {
    pub step_index: u64,
    pub state: EnvState,
    pub next_state: EnvState,
}

/// How often each reward source was queried, split by the kind of policy
/// being trained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardCounters {
    pub vice_for_task: u64,
    pub vice_for_perturbation: u64,
    pub rnd_for_task: u64,
    pub rnd_for_perturbation: u64,
    pub true_reward: u64,
}

/// Which reward a policy optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    /// Task reward (classifier 0 or ground truth), plus novelty when enabled.
    Task { with_rnd: bool },
    /// Novelty only.
    Perturb,
    /// Classifier `j` of a reset-controller schedule.
    Reach(usize),
}

struct EpochStats {
    metric_sum: f64,
    successes: usize,
    steps: usize,
    losses: Vec<SacLosses>,
    rnd_losses: Vec<f32>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub goal: EnvState,
    pub state: EnvState,
    pub current: Arc<Frame>,
    pub vae: Option<Arc<VaeModel>>,
    /// Index 0 is the task policy; then the perturbation policy or the
    /// remaining reset-controller policies.
    pub policies: Vec<SacAgent>,
    pub classifiers: Vec<ViceClassifier>,
    pub pools: Vec<GoalPool>,
    pub rnd: Option<RndPair>,
    pub vice_std: Vec<RunningStd>,
    pub rnd_std: RunningStd,
    pub buffer: ReplayBuffer,
    pub act_rng: ChaCha8Rng,
    pub learn_rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub env_steps: u64,
    pub grad_steps: u64,
    pub counters: RewardCounters,
    pub rows: Vec<MetricRow>,
    pub checkpoints: Vec<PolicyCheckpoint>,
    pub transition_log: Vec<LoggedTransition>,
    /// Transitions whose start differs from the previous end in a reset-free
    /// run; must stay zero.
    pub hidden_resets: u64,
    pub warnings: Vec<String>,
    /// Epochs run by each policy.
    pub policy_epochs: Vec<usize>,
    pub(crate) last_end: Option<EnvState>,
}

impl Trainer {
    /// Builds every component and collects the initial exploration data.
    ///
    /// `vae` must be a frozen model when the configuration consumes latents;
    /// `pools` overrides the generated goal pools (one per classifier).
    pub fn new(config: RunConfig, vae: Option<Arc<VaeModel>>, pools: Option<Vec<GoalPool>>) -> Result<Self> {
        let mut t = Self::build(config, vae, pools)?;
        t.initial_exploration()?;
        Ok(t)
    }

    /// Components only, no exploration data.
    pub fn build(config: RunConfig, vae: Option<Arc<VaeModel>>, pools: Option<Vec<GoalPool>>) -> Result<Self> {
        config.validate()?;
        let task = config.task;
        let seed = config.loop_.seed;
        let vae = if config.uses_vae() {
            let v = vae.ok_or_else(|| Error::Config(format!("{} on images needs a pretrained vae", config.variant)))?;
            if !v.is_frozen() {
                return Err(Error::Config("vae must be pretrained and frozen before policy training".into()));
            }
            Some(v)
        } else {
            None
        };

        let goal = EnvState::goal(task);
        let state = env_init(task, seed, None)?;
        let mut init_rng = stream_rng(seed, streams::INIT);
        let mut warnings = Vec::new();

        let targets: Vec<EnvState> = match config.variant {
            Variant::ResetController => {
                let s = config.reset_states()?;
                if s.windows(2).any(|w| w[0] == w[1]) || s.iter().skip(1).all(|x| *x == s[0]) {
                    warnings.push("reset states coincide; the schedule degenerates to single-goal VICE".into());
                }
                s
            }
            _ => vec![goal],
        };

        let current = Arc::new(frame_for(&config, vae.as_deref(), state)?);
        let policy_input = policy_input(&config);
        let pdim = vector_dim(&current, policy_input)?;
        let a_dim = task.action_dim();
        let n_policies = match config.variant {
            Variant::ResetController => targets.len(),
            v if v.has_perturbation() => 2,
            _ => 1,
        };
        let policies = (0..n_policies)
            .map(|_| SacAgent::new(config.sac.clone(), policy_input, pdim, a_dim, &mut init_rng))
            .collect::<Result<Vec<_>>>()?;

        let reward_input = reward_input(&config);
        let rdim = vector_dim(&current, reward_input)?;
        let n_classifiers = if config.reward == RewardMode::Vice { targets.len() } else { 0 };
        let classifiers = (0..n_classifiers)
            .map(|_| ViceClassifier::new(config.vice.clone(), reward_input, rdim, &mut init_rng))
            .collect::<Result<Vec<_>>>()?;
        let pools = match pools {
            Some(p) => {
                if p.len() != n_classifiers {
                    return Err(Error::Config(format!("expected {n_classifiers} goal pools, got {}", p.len())));
                }
                p
            }
            None => {
                let mut goal_rng = stream_rng(seed, streams::GOALS);
                (0..n_classifiers)
                    .map(|j| {
                        GoalPool::generate(
                            task,
                            &targets[j],
                            config.vice.goal_pool_size,
                            config.vice.goal_width,
                            config.obs,
                            &mut goal_rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let rnd = if config.variant.has_perturbation() {
            Some(RndPair::new(config.rnd.clone(), reward_input, rdim, &mut init_rng)?)
        } else {
            None
        };
        let std = RunningStd::new(config.loop_.std_coefficient, config.loop_.std_estimator);
        Ok(Self {
            goal,
            state,
            current,
            vae,
            policies,
            classifiers,
            pools,
            rnd,
            vice_std: vec![std; n_classifiers],
            rnd_std: std,
            buffer: ReplayBuffer::new(config.sac.buffer_capacity),
            act_rng: stream_rng(seed, streams::ACT),
            learn_rng: stream_rng(seed, streams::LEARN),
            epoch: 0,
            env_steps: 0,
            grad_steps: 0,
            counters: RewardCounters::default(),
            rows: Vec::new(),
            checkpoints: Vec::new(),
            transition_log: Vec::new(),
            hidden_resets: 0,
            warnings,
            policy_epochs: vec![0; n_policies],
            last_end: None,
            config,
        })
    }

    pub fn total_epochs(&self) -> usize {
        2 * self.config.loop_.epochs
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.total_epochs()
    }

    /// Policy that runs during 1-based epoch `i`.
    pub fn policy_for_epoch(&self, i: usize) -> usize {
        match self.config.variant {
            Variant::ResetController => i % self.policies.len(),
            v if v.has_perturbation() => select_policy(i),
            _ => 0,
        }
    }

    fn objective(&self, p: usize) -> Objective {
        match self.config.variant {
            Variant::ResetController => Objective::Reach(p),
            v if v.has_perturbation() => {
                if p == 0 {
                    Objective::Task { with_rnd: true }
                } else {
                    Objective::Perturb
                }
            }
            _ => Objective::Task { with_rnd: false },
        }
    }

    pub fn make_frame(&self, state: EnvState) -> Result<Arc<Frame>> {
        Ok(Arc::new(frame_for(&self.config, self.vae.as_deref(), state)?))
    }

    fn reset_to(&mut self, state: EnvState) -> Result<()> {
        self.state = state;
        self.current = self.make_frame(state)?;
        Ok(())
    }

    /// Steps the environment once and stores the transition.
    fn env_transition(&mut self, action: Vec<f32>) -> Result<()> {
        let next_state = env_step(&self.state, &action);
        let next = self.make_frame(next_state)?;
        if self.config.resets == Resets::Free && self.last_end.is_some_and(|e| e != self.state) {
            self.hidden_resets += 1;
        }
        if self.config.loop_.keep_transition_log {
            self.transition_log.push(LoggedTransition {
                step_index: self.env_steps,
                state: self.state,
                next_state,
            });
        }
        self.buffer.push(Transition {
            obs: self.current.clone(),
            action,
            next_obs: next.clone(),
            step_index: self.env_steps,
        });
        self.last_end = Some(next_state);
        self.state = next_state;
        self.current = next;
        self.env_steps += 1;
        Ok(())
    }

    fn episodic_reset(&mut self) -> Result<()> {
        let s = sample_random_state(self.config.task, &mut self.act_rng);
        self.reset_to(s)
    }

    /// Uniform-random actions into the empty buffer. Episodic runs restart
    /// every `horizon` steps here too.
    pub fn initial_exploration(&mut self) -> Result<()> {
        if !self.buffer.is_empty() {
            return Err(Error::Invalid("initial exploration expects an empty buffer".into()));
        }
        let h = self.config.loop_.horizon;
        let dim = self.config.task.action_dim();
        for t in 0..self.config.loop_.initial_exploration {
            if self.config.resets == Resets::Episodic && t % h == 0 {
                self.episodic_reset()?;
            }
            let a: Vec<f32> = (0..dim).map(|_| self.act_rng.random_range(-1.0f32..=1.0)).collect();
            self.env_transition(a)?;
        }
        Ok(())
    }

    /// One gradient step for policy `p` on a fresh batch, then the novelty
    /// predictor on the same batch.
    fn gradient_step(&mut self, p: usize) -> Result<(SacLosses, Option<f32>)> {
        let objective = self.objective(p);
        let Trainer {
            config,
            goal,
            policies,
            classifiers,
            rnd,
            vice_std,
            rnd_std,
            buffer,
            learn_rng,
            counters,
            ..
        } = self;
        let idx = buffer.sample_indices(config.sac.batch_size, learn_rng)?;
        let (c_vice, c_rnd) = (config.loop_.c_vice, config.loop_.c_rnd);
        let reward_mode = config.reward;
        let goal = *goal;
        let task = config.task;
        let mut reward_fn = |frames: &[&Frame]| -> Result<Vec<f32>> {
            let n = frames.len();
            let mut task_term = vec![0.0f32; n];
            let mut novelty = vec![0.0f32; n];
            let scored_class = match objective {
                Objective::Task { .. } if reward_mode == RewardMode::True => {
                    counters.true_reward += 1;
                    for (r, f) in task_term.iter_mut().zip(frames) {
                        *r = true_reward(task, &f.state, &goal) as f32;
                    }
                    None
                }
                Objective::Task { .. } => Some(0),
                Objective::Reach(j) => Some(j),
                Objective::Perturb => None,
            };
            if let Some(j) = scored_class {
                if matches!(objective, Objective::Perturb) {
                    counters.vice_for_perturbation += 1;
                } else {
                    counters.vice_for_task += 1;
                }
                let logits = classifiers[j].logits(frames)?;
                for (r, l) in task_term.iter_mut().zip(&logits) {
                    *r = vice_std[j].normalize(*l);
                }
                vice_std[j].update(&logits);
            }
            let wants_rnd = matches!(objective, Objective::Task { with_rnd: true } | Objective::Perturb);
            if wants_rnd {
                let pair = rnd.as_ref().ok_or_else(|| Error::Invalid("novelty reward without an rnd pair".into()))?;
                if matches!(objective, Objective::Perturb) {
                    counters.rnd_for_perturbation += 1;
                } else {
                    counters.rnd_for_task += 1;
                }
                let errors = pair.raw_errors(frames)?;
                for (r, e) in novelty.iter_mut().zip(&errors) {
                    *r = rnd_std.normalize(*e);
                }
                rnd_std.update(&errors);
            }
            Ok(match objective {
                Objective::Task { .. } => task_term
                    .iter()
                    .zip(&novelty)
                    .map(|(v, n)| combined_reward(0, *v, *n, c_vice, c_rnd))
                    .collect(),
                Objective::Perturb => novelty.iter().map(|n| combined_reward(1, 0.0, *n, c_vice, c_rnd)).collect(),
                Objective::Reach(_) => task_term,
            })
        };
        let losses = policies[p].update_on_indices(buffer, &idx, &mut reward_fn, learn_rng)?;
        for (name, v) in [
            ("critic1", losses.critic1),
            ("critic2", losses.critic2),
            ("actor", losses.actor),
            ("alpha", losses.alpha_loss),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss at gradient step {}", self.grad_steps + 1)));
            }
        }
        let rnd_loss = match rnd {
            Some(pair) => {
                let next: Vec<&Frame> = idx.iter().map(|&i| &*buffer.get(i).next_obs).collect();
                let l = pair.update(&next)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("rnd loss at gradient step {}", self.grad_steps + 1)));
                }
                Some(l)
            }
            None => None,
        };
        self.grad_steps += 1;
        Ok((losses, rnd_loss))
    }

    /// Runs the next epoch of `horizon` steps with the scheduled policy,
    /// retrains the classifiers and appends metric rows.
    pub fn run_epoch(&mut self) -> Result<()> {
        if self.is_done() {
            return Err(Error::Invalid("all epochs already ran".into()));
        }
        let i = self.epoch + 1;
        let p = self.policy_for_epoch(i);
        let h = self.config.loop_.horizon;
        if self.config.resets == Resets::Episodic {
            self.episodic_reset()?;
        }
        let mut stats = EpochStats {
            metric_sum: 0.0,
            successes: 0,
            steps: 0,
            losses: Vec::new(),
            rnd_losses: Vec::new(),
        };
        for _ in 0..h {
            let (action, _) = self.policies[p].sample_action(&self.current, &mut self.act_rng, false)?;
            self.env_transition(action)?;
            stats.metric_sum += task_metric(self.config.task, &self.state, &self.goal);
            stats.successes += usize::from(success(self.config.task, &self.state, &self.goal));
            stats.steps += 1;
            for _ in 0..self.config.loop_.train_steps_per_env_step {
                if self.buffer.len() >= self.config.sac.batch_size {
                    let (l, r) = self.gradient_step(p)?;
                    stats.losses.push(l);
                    stats.rnd_losses.extend(r);
                }
            }
        }

        let mut vice_losses = Vec::new();
        if self.config.reward == RewardMode::Vice {
            let n_vice = self.config.vice.n_vice;
            for (c, pool) in self.classifiers.iter_mut().zip(&self.pools) {
                if let Some(l) = c.train_epoch(pool, &self.buffer, n_vice, &mut self.learn_rng)? {
                    if !l.is_finite() {
                        return Err(Error::NonFinite(format!("classifier loss in epoch {i}")));
                    }
                    vice_losses.push(l);
                }
            }
        }

        self.policy_epochs[p] += 1;
        self.epoch = i;
        self.push_rows(i, p, &stats, &vice_losses);
        let k = self.config.harness.checkpoint_every;
        if i % k == 0 || i == self.total_epochs() {
            self.checkpoints.push(PolicyCheckpoint {
                epoch: i,
                env_steps: self.env_steps,
                actor: self.policies[0].params.actor.clone(),
            });
        }
        Ok(())
    }

    fn push_rows(&mut self, epoch: usize, policy: usize, stats: &EpochStats, vice_losses: &[f32]) {
        let mean = |v: &mut dyn Iterator<Item = f64>| {
            let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            (n > 0).then(|| s / n as f64)
        };
        let steps = stats.steps.max(1) as f64;
        let mut values: Vec<(&str, Option<f64>)> = vec![
            ("policy", Some(policy as f64)),
            ("train_metric", Some(stats.metric_sum / steps)),
            ("train_success", Some(stats.successes as f64 / steps)),
            ("critic_loss", mean(&mut stats.losses.iter().map(|l| 0.5 * (l.critic1 + l.critic2) as f64))),
            ("actor_loss", mean(&mut stats.losses.iter().map(|l| l.actor as f64))),
            ("alpha", Some(self.policies[policy].alpha() as f64)),
            ("mean_reward", mean(&mut stats.losses.iter().map(|l| l.mean_reward as f64))),
            ("rnd_loss", mean(&mut stats.rnd_losses.iter().map(|&l| l as f64))),
            ("vice_loss", mean(&mut vice_losses.iter().map(|&l| l as f64))),
        ];
        values.push(("grad_steps", Some(self.grad_steps as f64)));
        for (metric, value) in values {
            if let Some(value) = value {
                self.rows.push(MetricRow {
                    task: self.config.task.name().to_string(),
                    variant: self.config.variant.name().to_string(),
                    seed: self.config.loop_.seed,
                    epoch,
                    env_steps: self.env_steps,
                    metric: metric.to_string(),
                    value,
                });
            }
        }
    }

    /// Runs every remaining epoch. `on_epoch` sees the trainer after each
    /// one and may stop the run early by returning `false`.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Trainer) -> bool) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
            if !on_epoch(self) {
                break;
            }
        }
        Ok(())
    }

    /// Epoch-mean task metric of each epoch run by the task policy, as
    /// `(epoch, env_steps, value)`.
    pub fn forward_curve(&self) -> Vec<(usize, u64, f64)> {
        forward_curve(&self.rows)
    }
}

/// Training-time task metric restricted to epochs run by policy 0.
pub fn forward_curve(rows: &[MetricRow]) -> Vec<(usize, u64, f64)> {
    let forward: std::collections::BTreeSet<usize> = rows
        .iter()
        .filter(|r| r.metric == "policy" && r.value == 0.0)
        .map(|r| r.epoch)
        .collect();
    rows.iter()
        .filter(|r| r.metric == "train_metric" && forward.contains(&r.epoch))
        .map(|r| (r.epoch, r.env_steps, r.value))
        .collect()
}

/// Runs the whole schedule for `config`.
pub fn run_training(config: RunConfig, vae: Option<Arc<VaeModel>>) -> Result<Trainer> {
    let mut t = Trainer::new(config, vae, None)?;
    t.run(|_| true)?;
    Ok(t)
}

/// The reset-controller baseline: one policy and classifier per reset state.
pub fn run_reset_controller(config: RunConfig, vae: Option<Arc<VaeModel>>) -> Result<Trainer> {
    if config.variant != Variant::ResetController {
        return Err(Error::Config(format!("expected ResetController, got {}", config.variant)));
    }
    run_training(config, vae)
}

/// Indices of consecutive logged transitions whose start differs from the
/// previous end.
pub fn continuity_breaks(log: &[LoggedTransition]) -> Vec<usize> {
    log.windows(2)
        .enumerate()
        .filter(|(_, w)| w[0].next_state != w[1].state)
        .map(|(i, _)| i + 1)
        .collect()
}

pub fn policy_input(config: &RunConfig) -> InputKind {
    match config.obs {
        ObsMode::State => InputKind::State,
        ObsMode::Image if config.uses_vae() => InputKind::Latent,
        ObsMode::Image => InputKind::Pixels,
    }
}

pub fn reward_input(config: &RunConfig) -> InputKind {
    match config.obs {
        ObsMode::State => InputKind::StateOnly,
        ObsMode::Image => InputKind::ImageOnly,
    }
}

/// Observation of `state` under the run's observation mode, with the
/// encoder latent attached when the policy consumes one.
pub fn frame_for(config: &RunConfig, vae: Option<&VaeModel>, state: EnvState) -> Result<Frame> {
    let observation = observe(&state, config.obs);
    let latent = match (config.uses_vae(), vae) {
        (true, Some(v)) => Some(v.encode(&observation)?),
        (true, None) => return Err(Error::Config("latent inputs need a vae".into())),
        (false, _) => None,
    };
    Ok(Frame { state, observation, latent })
}
