//! Post-training evaluation on the fixed start-state grids.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tensorcore::ParamSet;

use crate::config::RunConfig;
use crate::env::{env_step, eval_grid, success, task_metric, EnvState, TaskId};
use crate::sac::{vector_dim, Actor};
use crate::training::{frame_for, policy_input, Trainer};
use crate::vae::VaeModel;
use crate::{Error, Result};

/// A deterministic task policy with everything needed to observe.
pub struct EvalPolicy {
    pub config: RunConfig,
    pub actor: Actor,
    pub vae: Option<Arc<VaeModel>>,
}

impl EvalPolicy {
    pub fn new(config: RunConfig, actor_params: ParamSet, vae: Option<Arc<VaeModel>>) -> Result<Self> {
        if config.uses_vae() && vae.is_none() {
            return Err(Error::Config("evaluating a latent policy needs its vae".into()));
        }
        let probe = frame_for(&config, vae.as_deref(), EnvState::canonical(config.task))?;
        let input = policy_input(&config);
        let actor = Actor::new(
            &config.sac,
            input,
            vector_dim(&probe, input)?,
            config.task.action_dim(),
            actor_params,
        )?;
        Ok(Self { config, actor, vae })
    }

    /// The current task policy of a trainer.
    pub fn from_trainer(t: &Trainer) -> Result<Self> {
        Self::new(t.config.clone(), t.policies[0].params.actor.clone(), t.vae.clone())
    }

    pub fn act(&self, state: &EnvState) -> Result<Vec<f32>> {
        let frame = frame_for(&self.config, self.vae.as_deref(), *state)?;
        self.actor.act(&frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub init: EnvState,
    pub success: bool,
    pub final_metric: f64,
}

/// Per-start-state outcomes; aggregates are always recomputed from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskId,
    pub variant: String,
    pub seed: u64,
    pub epoch: usize,
    pub outcomes: Vec<EvalOutcome>,
}

impl EvalReport {
    pub fn successes(&self) -> usize {
        self.outcomes.iter().filter(|o| o.success).count()
    }

    pub fn success_rate(&self) -> f64 {
        self.successes() as f64 / self.outcomes.len().max(1) as f64
    }

    /// Mean final task metric (pose distance on reposition).
    pub fn mean_metric(&self) -> f64 {
        self.outcomes.iter().map(|o| o.final_metric).sum::<f64>() / self.outcomes.len().max(1) as f64
    }
}

/// Rolls `policy` for `rollout_len` steps from each grid start and judges
/// the last state only.
pub fn evaluate_with(
    task: TaskId,
    rollout_len: usize,
    mut policy: impl FnMut(&EnvState) -> Result<Vec<f32>>,
) -> Result<Vec<EvalOutcome>> {
    let goal = EnvState::goal(task);
    eval_grid(task)
        .inits
        .into_iter()
        .map(|init| {
            let mut s = init;
            for _ in 0..rollout_len {
                s = env_step(&s, &policy(&s)?);
            }
            Ok(EvalOutcome {
                init,
                success: success(task, &s, &goal),
                final_metric: task_metric(task, &s, &goal),
            })
        })
        .collect()
}

pub fn evaluate(policy: &EvalPolicy, task: TaskId, rollout_len: usize, epoch: usize) -> Result<EvalReport> {
    if policy.config.task != task {
        return Err(Error::Invalid(format!(
            "policy was trained on {} but evaluation asked for {task}",
            policy.config.task
        )));
    }
    Ok(EvalReport {
        task,
        variant: policy.config.variant.name().to_string(),
        seed: policy.config.loop_.seed,
        epoch,
        outcomes: evaluate_with(task, rollout_len, |s| policy.act(s))?,
    })
}
