//! The observation × reward × reset matrix and the train/eval gap probe.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{Resets, RewardMode, RunConfig};
use crate::env::{ObsMode, TaskId};
use crate::training::{forward_curve, MetricRow, Trainer};
use crate::vae::VaeModel;
use crate::{Error, Result};

use super::eval::{evaluate, EvalPolicy};

/// Environment steps at the first task-policy epoch whose mean pose distance
/// falls below `threshold`.
pub fn steps_to_threshold(rows: &[MetricRow], threshold: f64) -> Option<u64> {
    forward_curve(rows)
        .into_iter()
        .find(|&(_, _, v)| v < threshold)
        .map(|(_, steps, _)| steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Steps to threshold, or the cap when censored.
    pub steps: u64,
    pub censored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub resets: Resets,
    pub obs: ObsMode,
    pub reward: RewardMode,
    pub seeds: Vec<SeedOutcome>,
}

impl MatrixCell {
    /// Median steps with censored seeds counted at the cap.
    pub fn median_steps(&self) -> f64 {
        median(&self.seeds.iter().map(|s| s.steps as f64).collect::<Vec<_>>())
    }

    /// The median itself is censored when at least half the seeds are.
    pub fn censored(&self) -> bool {
        2 * self.seeds.iter().filter(|s| s.censored).count() >= self.seeds.len().max(1)
    }

    pub fn label(&self) -> String {
        let r = match self.resets {
            Resets::Episodic => "episodic",
            Resets::Free => "reset_free",
        };
        let o = match self.obs {
            ObsMode::State => "state",
            ObsMode::Image => "image",
        };
        let w = match self.reward {
            RewardMode::True => "true_reward",
            RewardMode::Vice => "learned_reward",
        };
        format!("{r}/{o}/{w}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixTable {
    pub cap: u64,
    pub threshold: f64,
    pub cells: Vec<MatrixCell>,
}

impl MatrixTable {
    pub fn cell(&self, resets: Resets, obs: ObsMode, reward: RewardMode) -> Option<&MatrixCell> {
        self.cells
            .iter()
            .find(|c| c.resets == resets && c.obs == obs && c.reward == reward)
    }

    /// Plain-text table of medians.
    pub fn render(&self) -> String {
        let mut s = String::from("cell,seeds,median_steps,censored\n");
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{},{}", c.label(), c.seeds.len(), c.median_steps(), c.censored());
        }
        s
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Epochs per controller needed for the run to reach `cap` environment
/// steps.
pub fn epochs_for_budget(config: &RunConfig, cap: u64) -> usize {
    let per_round = 2 * config.loop_.horizon as u64;
    let after = cap.saturating_sub(config.loop_.initial_exploration as u64);
    after.div_ceil(per_round) as usize
}

/// One cell of the matrix for one seed: trains until the threshold is met
/// or the step cap is reached.
pub fn matrix_run(config: RunConfig, vae: Option<Arc<VaeModel>>) -> Result<SeedOutcome> {
    let cap = config.harness.matrix_step_cap;
    let threshold = config.harness.pose_threshold;
    let seed = config.loop_.seed;
    let mut config = config;
    config.loop_.epochs = epochs_for_budget(&config, cap);
    let mut t = Trainer::new(config, vae, None)?;
    let mut hit = None;
    t.run(|t| {
        hit = steps_to_threshold(&t.rows, threshold).filter(|&s| s <= cap);
        hit.is_none() && t.env_steps < cap
    })?;
    Ok(match hit {
        Some(steps) => SeedOutcome { seed, steps, censored: false },
        None => SeedOutcome { seed, steps: cap, censored: true },
    })
}

/// Every reset × observation × reward combination on reposition, each over
/// `seeds`. `vae` is required when the variant consumes latents.
pub fn run_matrix(base: &RunConfig, seeds: &[u64], vae: Option<Arc<VaeModel>>) -> Result<MatrixTable> {
    if base.task != TaskId::Reposition {
        return Err(Error::Config("the experiment matrix runs on the reposition task".into()));
    }
    let mut cells = Vec::new();
    for resets in [Resets::Episodic, Resets::Free] {
        for obs in [ObsMode::State, ObsMode::Image] {
            for reward in [RewardMode::True, RewardMode::Vice] {
                let mut outcomes = Vec::new();
                for &seed in seeds {
                    let mut c = base.clone();
                    c.resets = resets;
                    c.obs = obs;
                    c.reward = reward;
                    c.loop_.seed = seed;
                    let v = if c.uses_vae() { vae.clone() } else { None };
                    outcomes.push(matrix_run(c, v)?);
                }
                cells.push(MatrixCell {
                    resets,
                    obs,
                    reward,
                    seeds: outcomes,
                });
            }
        }
    }
    Ok(MatrixTable {
        cap: base.harness.matrix_step_cap,
        threshold: base.harness.pose_threshold,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub variant: String,
    pub seed: u64,
    pub env_steps: u64,
    /// Mean pose distance over the last task-policy training epoch.
    pub train: f64,
    /// Mean final pose distance over the evaluation grid.
    pub eval: f64,
}

/// Trains a reset-free reposition run and sets its final training pose
/// distance beside the grid evaluation of the final policy.
pub fn train_eval_gap(config: RunConfig, vae: Option<Arc<VaeModel>>) -> Result<GapReport> {
    if config.task != TaskId::Reposition || config.resets != Resets::Free {
        return Err(Error::Config("the gap probe needs reset-free reposition".into()));
    }
    let rollout = config.harness.eval_rollout;
    let mut t = Trainer::new(config, vae, None)?;
    t.run(|_| true)?;
    gap_of(&t, rollout)
}

pub fn gap_of(t: &Trainer, rollout: usize) -> Result<GapReport> {
    let train = forward_curve(&t.rows)
        .last()
        .map(|&(_, _, v)| v)
        .ok_or_else(|| Error::Invalid("no task-policy epoch ran".into()))?;
    let report = evaluate(&EvalPolicy::from_trainer(t)?, t.config.task, rollout, t.epoch)?;
    Ok(GapReport {
        variant: t.config.variant.name().to_string(),
        seed: t.config.loop_.seed,
        env_steps: t.env_steps,
        train,
        eval: report.mean_metric(),
    })
}

/// Percentile bootstrap interval for the mean of `values` at confidence
/// `level`, from `resamples` draws of a seeded generator.
pub fn bootstrap_mean_ci(values: &[f64], level: f64, resamples: usize, seed: u64) -> (f64, f64) {
    use rand::{Rng, SeedableRng};
    if values.is_empty() || resamples == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(tail), at(1.0 - tail))
}

/// Trains `config` to completion and evaluates the final task policy.
pub fn train_and_evaluate(config: RunConfig, vae: Option<Arc<VaeModel>>) -> Result<super::eval::EvalReport> {
    let rollout = config.harness.eval_rollout;
    let task = config.task;
    let mut t = Trainer::new(config, vae, None)?;
    t.run(|_| true)?;
    evaluate(&EvalPolicy::from_trainer(&t)?, task, rollout, t.epoch)
}
