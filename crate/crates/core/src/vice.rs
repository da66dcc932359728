//! Goal classifier whose logit serves as the task reward.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use tensorcore::{AdamConfig, AdamState, FeatureNet, ParamSet, Tensor};

use crate::env::{goal_examples, observe, EnvState, ObsMode, TaskId};
use crate::error::finite;
use crate::rnd::RunningStd;
use crate::sac::{assemble, build_net, Frame, InputKind, NetInput, ReplayBuffer};
use crate::{Error, Result};

/// Distribution of the mixup interpolation weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mixup {
    /// λ ~ Uniform(0, 1).
    Uniform,
    /// λ ~ Beta(alpha, alpha).
    Beta { alpha: f64 },
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViceConfig {
    pub lr: f32,
    /// Positives plus negatives per step, split evenly.
    pub batch_size: usize,
    pub n_vice: usize,
    pub mixup: Mixup,
    pub conv_filters: Vec<usize>,
    pub pooling: bool,
    pub hidden: Vec<usize>,
    pub goal_pool_size: usize,
    /// Fraction of the success region that goal examples are drawn from.
    pub goal_width: f64,
}

impl Default for ViceConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 128,
            n_vice: 5,
            mixup: Mixup::Uniform,
            conv_filters: vec![16, 32, 64],
            pooling: false,
            hidden: vec![256, 256],
            goal_pool_size: 200,
            goal_width: 1.0,
        }
    }
}

/// Fixed set of success observations used as classifier positives.
#[derive(Debug, Clone)]
pub struct GoalPool {
    frames: Vec<Arc<Frame>>,
}

impl GoalPool {
    pub fn new(frames: Vec<Arc<Frame>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Invalid("goal pool is empty".into()));
        }
        Ok(Self { frames })
    }

    /// Renders `n` success-region samples around `goal`.
    pub fn generate<R: Rng + ?Sized>(
        task: TaskId,
        goal: &EnvState,
        n: usize,
        width: f64,
        mode: ObsMode,
        rng: &mut R,
    ) -> Result<Self> {
        let frames = goal_examples(task, goal, n, width, mode, rng)
            .into_iter()
            .map(|g| {
                Arc::new(Frame {
                    state: g.state,
                    observation: g.observation,
                    latent: None,
                })
            })
            .collect();
        Self::new(frames)
    }

    /// Pool observed from stored generating states.
    pub fn from_states(task: TaskId, states: &[EnvState], mode: ObsMode) -> Result<Self> {
        let frames = states
            .iter()
            .map(|s| {
                if s.task != task {
                    return Err(Error::Invalid(format!("goal state for {} in a {task} pool", s.task)));
                }
                s.validate()?;
                Ok(Arc::new(Frame {
                    state: *s,
                    observation: observe(s, mode),
                    latent: None,
                }))
            })
            .collect::<Result<_>>()?;
        Self::new(frames)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Arc<Frame>] {
        &self.frames
    }
}

/// `(λ·x₁ + (1−λ)·x₂, λ·y₁ + (1−λ)·y₂)`.
pub fn mixup_pair(x1: &[f32], y1: f32, x2: &[f32], y2: f32, lambda: f32) -> (Vec<f32>, f32) {
    let x = x1
        .iter()
        .zip(x2)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    (x, lambda * y1 + (1.0 - lambda) * y2)
}

fn mix_rows(t: &Tensor<f32>, partner: &[usize], lambdas: &[f32]) -> Result<Tensor<f32>> {
    let n = t.row_len();
    let mut out = Vec::with_capacity(t.len());
    for (i, (&j, &l)) in partner.iter().zip(lambdas).enumerate() {
        if l == 1.0 {
            out.extend_from_slice(t.row(i));
        } else {
            out.extend(t.row(i).iter().zip(t.row(j)).map(|(a, b)| l * a + (1.0 - l) * b));
        }
    }
    debug_assert_eq!(out.len(), t.batch() * n);
    Ok(Tensor::new(t.shape().to_vec(), out)?)
}

fn softplus(z: f32) -> f32 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

pub struct ViceClassifier {
    pub config: ViceConfig,
    pub input: InputKind,
    net: FeatureNet,
    pub params: ParamSet,
    pub optim: AdamState,
}

impl ViceClassifier {
    pub fn new<R: Rng + ?Sized>(config: ViceConfig, input: InputKind, vector_dim: usize, rng: &mut R) -> Result<Self> {
        if config.batch_size < 2 || config.batch_size % 2 != 0 {
            return Err(Error::Config("vice.batch_size must be even and at least 2".into()));
        }
        let net = build_net(
            input,
            vector_dim,
            0,
            &config.conv_filters,
            config.pooling,
            &config.hidden,
            1,
        )?;
        let params = net.init_params(rng);
        let optim = AdamState::new(&params, AdamConfig::with_lr(config.lr));
        Ok(Self {
            config,
            input,
            net,
            params,
            optim,
        })
    }

    pub fn network(&self) -> &FeatureNet {
        &self.net
    }

    pub fn logits_on(&self, input: &NetInput) -> Result<Vec<f32>> {
        Ok(self
            .net
            .infer(&self.params, input.image.as_ref(), &input.vector)?
            .into_data())
    }

    /// Classifier logits, used directly as rewards.
    pub fn logits(&self, frames: &[&Frame]) -> Result<Vec<f32>> {
        self.logits_on(&assemble(frames, self.input)?)
    }

    pub fn reward(&self, frame: &Frame) -> Result<f32> {
        Ok(self.logits(&[frame])?[0])
    }

    pub fn normalized_rewards(&self, frames: &[&Frame], running: &RunningStd) -> Result<Vec<f32>> {
        Ok(self
            .logits(frames)?
            .into_iter()
            .map(|z| running.normalize(z))
            .collect())
    }

    /// One mixup-regularized cross-entropy step on soft labels; returns the
    /// loss before the step.
    pub fn train_step<R: Rng + ?Sized>(&mut self, input: &NetInput, labels: &[f32], rng: &mut R) -> Result<f32> {
        let b = input.batch();
        let mut partner: Vec<usize> = (0..b).collect();
        partner.shuffle(rng);
        let lambdas: Vec<f32> = match self.config.mixup {
            Mixup::Off => vec![1.0; b],
            Mixup::Uniform => (0..b).map(|_| rng.random::<f32>()).collect(),
            Mixup::Beta { alpha } => {
                let d = Beta::new(alpha, alpha)
                    .map_err(|e| Error::Config(format!("mixup beta: {e}")))?;
                (0..b).map(|_| d.sample(rng) as f32).collect()
            }
        };
        let image = input
            .image
            .as_ref()
            .map(|t| mix_rows(t, &partner, &lambdas))
            .transpose()?;
        let vector = mix_rows(&input.vector, &partner, &lambdas)?;
        let y: Vec<f32> = (0..b)
            .map(|i| lambdas[i] * labels[i] + (1.0 - lambdas[i]) * labels[partner[i]])
            .collect();
        let (z, cache) = self.net.forward(&self.params, image.as_ref(), &vector)?;
        let bf = b as f32;
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(b);
        for (&zi, &yi) in z.data().iter().zip(&y) {
            loss += (softplus(zi) - yi * zi) / bf;
            grad.push((sigmoid(zi) - yi) / bf);
        }
        finite(loss, "vice loss")?;
        let g = self
            .net
            .backward(&self.params, &cache, &Tensor::new(vec![b, 1], grad)?, false)?;
        self.optim.step(&mut self.params, &g.params)?;
        Ok(loss)
    }

    /// Half the batch from the goal pool (label 1), half from replay next
    /// observations (label 0), positives first.
    pub fn epoch_batch<'a, R: Rng + ?Sized>(
        &self,
        pool: &'a GoalPool,
        buffer: &'a ReplayBuffer,
        rng: &mut R,
    ) -> Result<(Vec<&'a Frame>, Vec<f32>)> {
        let half = self.config.batch_size / 2;
        let mut frames: Vec<&Frame> = (0..half)
            .map(|_| &*pool.frames[rng.random_range(0..pool.len())])
            .collect();
        for i in buffer.sample_indices(half, rng)? {
            frames.push(&buffer.get(i).next_obs);
        }
        let labels = (0..2 * half).map(|i| if i < half { 1.0 } else { 0.0 }).collect();
        Ok((frames, labels))
    }

    /// Draws one balanced batch (goal-pool positives, replay negatives taken
    /// from next observations) and takes `n_vice` steps on it. Returns the
    /// mean loss, or `None` when no step was taken.
    pub fn train_epoch<R: Rng + ?Sized>(
        &mut self,
        pool: &GoalPool,
        buffer: &ReplayBuffer,
        n_vice: usize,
        rng: &mut R,
    ) -> Result<Option<f32>> {
        if pool.is_empty() {
            return Err(Error::Invalid("goal pool is empty".into()));
        }
        if n_vice == 0 {
            return Ok(None);
        }
        let (frames, labels) = self.epoch_batch(pool, buffer, rng)?;
        let input = assemble(&frames, self.input)?;
        let mut total = 0.0;
        for _ in 0..n_vice {
            total += self.train_step(&input, &labels, rng)?;
        }
        Ok(Some(total / n_vice as f32))
    }
}
