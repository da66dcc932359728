//! Binary checkpoint container and full trainer snapshots.
//!
//! Layout, all integers little-endian: the magic `R3L1`, a `u32` format
//! version, a length-prefixed header tag (`run`, `policy` or `vae`), the
//! 32-byte config digest, a `u64` epoch, a `u32` section count, then per
//! section a length-prefixed name and a `u64`-length payload.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tensorcore::{AdamState, ParamSet};

use crate::config::RunConfig;
use crate::env::EnvState;
use crate::rnd::RunningStd;
use crate::sac::{ReplayBuffer, Transition};
use crate::training::{stream_rng, streams, LoggedTransition, MetricRow, PolicyCheckpoint, RewardCounters, Trainer};
use crate::vae::{VaeConfig, VaeModel};
use crate::vice::GoalPool;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"R3L1";
pub const FORMAT_VERSION: u32 = 1;
pub const TAG_RUN: &str = "run";
pub const TAG_POLICY: &str = "policy";
pub const TAG_VAE: &str = "vae";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    pub config_digest: [u8; 32],
    pub epoch: u64,
    pub sections: BTreeMap<String, Vec<u8>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("section name is not utf-8"))
    }
}

impl Checkpoint {
    pub fn new(tag: &str, config_digest: [u8; 32], epoch: u64) -> Self {
        Self {
            tag: tag.to_string(),
            config_digest,
            epoch,
            sections: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tag.len() as u32).to_le_bytes());
        out.extend_from_slice(self.tag.as_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(bad("not an R3L1 checkpoint"));
        }
        let version = c.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let tag = c.string()?;
        let config_digest: [u8; 32] = c.take(32)?.try_into().unwrap();
        let epoch = c.u64()?;
        let n = c.u32()?;
        let mut sections = BTreeMap::new();
        for _ in 0..n {
            let name = c.string()?;
            let len = usize::try_from(c.u64()?).map_err(|_| bad("section too large"))?;
            if sections.insert(name.clone(), c.take(len)?.to_vec()).is_some() {
                return Err(bad(format!("duplicate section {name}")));
            }
        }
        if c.pos != bytes.len() {
            return Err(bad("trailing bytes after the last section"));
        }
        Ok(Self { tag, config_digest, epoch, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_tag(&self, tag: &str) -> Result<()> {
        if self.tag != tag {
            return Err(bad(format!("expected a {tag} checkpoint, found {}", self.tag)));
        }
        Ok(())
    }

    pub fn section(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| bad(format!("missing section {name}")))
    }

    pub fn put(&mut self, name: impl Into<String>, payload: Vec<u8>) {
        self.sections.insert(name.into(), payload);
    }

    pub fn put_params(&mut self, name: impl Into<String>, params: &ParamSet) {
        self.put(name, params.to_bytes());
    }

    pub fn params(&self, name: &str) -> Result<ParamSet> {
        Ok(ParamSet::from_bytes(self.section(name)?)?)
    }

    pub fn put_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec(value).map_err(|e| bad(e.to_string()))?;
        self.put(name, bytes);
        Ok(())
    }

    pub fn json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        serde_json::from_slice(self.section(name)?).map_err(|e| bad(format!("section {name}: {e}")))
    }

    fn put_adam(&mut self, prefix: &str, a: &AdamState, steps: &mut BTreeMap<String, u64>) {
        self.put_params(format!("{prefix}.adam_m"), a.first_moment());
        self.put_params(format!("{prefix}.adam_v"), a.second_moment());
        steps.insert(prefix.to_string(), a.step_count());
    }

    fn adam(&self, prefix: &str, like: &AdamState, steps: &BTreeMap<String, u64>) -> Result<AdamState> {
        let step = *steps.get(prefix).ok_or_else(|| bad(format!("missing optimizer step for {prefix}")))?;
        let m = self.params(&format!("{prefix}.adam_m"))?;
        let v = self.params(&format!("{prefix}.adam_v"))?;
        like.first_moment().check_same_layout(&m)?;
        Ok(AdamState::from_parts(like.config, m, v, step)?)
    }
}

/// A pretrained representation as a standalone file.
pub fn vae_checkpoint(vae: &VaeModel) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(TAG_VAE, vae.encoder_digest(), 0);
    put_vae(&mut ck, vae)?;
    Ok(ck)
}

pub fn load_vae(ck: &Checkpoint) -> Result<VaeModel> {
    ck.expect_tag(TAG_VAE)?;
    read_vae(ck)
}

fn put_vae(ck: &mut Checkpoint, vae: &VaeModel) -> Result<()> {
    ck.put_json("vae.config", &vae.config)?;
    ck.put_json("vae.frozen", &vae.is_frozen())?;
    ck.put_params("vae.params", &vae.params);
    let mut steps = BTreeMap::new();
    ck.put_adam("vae", &vae.optim, &mut steps);
    ck.put_json("vae.adam_steps", &steps)
}

fn read_vae(ck: &Checkpoint) -> Result<VaeModel> {
    let config: VaeConfig = ck.json("vae.config")?;
    let frozen: bool = ck.json("vae.frozen")?;
    let params = ck.params("vae.params")?;
    let steps: BTreeMap<String, u64> = ck.json("vae.adam_steps")?;
    let like = AdamState::new(&params, tensorcore::AdamConfig::with_lr(config.lr));
    let optim = ck.adam("vae", &like, &steps)?;
    VaeModel::from_parts(config, params, optim, frozen)
}

/// Forward policy parameters alone, for evaluation.
pub fn policy_checkpoint(config: &RunConfig, cp: &PolicyCheckpoint, vae: Option<&VaeModel>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(TAG_POLICY, config.digest(), cp.epoch as u64);
    ck.put_json("config", config)?;
    ck.put_json("env_steps", &cp.env_steps)?;
    ck.put_params("actor", &cp.actor);
    if let Some(v) = vae {
        put_vae(&mut ck, v)?;
    }
    Ok(ck)
}

/// Configuration, actor parameters and representation stored in a policy
/// or run checkpoint.
pub fn read_policy(ck: &Checkpoint) -> Result<(RunConfig, ParamSet, Option<VaeModel>)> {
    let config: RunConfig = ck.json("config")?;
    let actor = match ck.tag.as_str() {
        TAG_POLICY => ck.params("actor")?,
        TAG_RUN => ck.params("policy0.actor")?,
        other => return Err(bad(format!("a {other} checkpoint holds no policy"))),
    };
    let vae = if ck.sections.contains_key("vae.params") {
        Some(read_vae(ck)?)
    } else {
        None
    };
    Ok((config, actor, vae))
}

#[derive(Serialize, Deserialize)]
struct StoredTransition {
    state: EnvState,
    action: Vec<f32>,
    next_state: EnvState,
    step_index: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    state: EnvState,
    last_end: Option<EnvState>,
    epoch: usize,
    env_steps: u64,
    grad_steps: u64,
    counters: RewardCounters,
    hidden_resets: u64,
    warnings: Vec<String>,
    policy_epochs: Vec<usize>,
    agent_updates: Vec<u64>,
    vice_std: Vec<RunningStd>,
    rnd_std: RunningStd,
    act_word_pos: String,
    learn_word_pos: String,
    pools: Vec<Vec<EnvState>>,
    adam_steps: BTreeMap<String, u64>,
    checkpoints: Vec<(usize, u64)>,
    buffer_capacity: usize,
    buffer_cursor: usize,
    buffer_inserted: u64,
    buffer: Vec<StoredTransition>,
    transition_log: Vec<LoggedTransition>,
    rows: Vec<MetricRow>,
}

/// Everything needed to continue a run exactly where it stopped. Frames are
/// stored as simulator states and re-rendered on restore.
pub fn snapshot(t: &Trainer) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(TAG_RUN, t.config.digest(), t.epoch as u64);
    ck.put_json("config", &t.config)?;
    let mut adam_steps = BTreeMap::new();
    for (p, agent) in t.policies.iter().enumerate() {
        let sp = &agent.params;
        for (name, set) in [
            ("actor", &sp.actor),
            ("critic1", &sp.critic1),
            ("critic2", &sp.critic2),
            ("target1", &sp.target1),
            ("target2", &sp.target2),
            ("log_alpha", &sp.log_alpha),
        ] {
            ck.put_params(format!("policy{p}.{name}"), set);
        }
        for (name, a) in ["actor", "critic1", "critic2", "log_alpha"].iter().zip(&agent.optim) {
            ck.put_adam(&format!("policy{p}.{name}"), a, &mut adam_steps);
        }
    }
    for (j, c) in t.classifiers.iter().enumerate() {
        ck.put_params(format!("classifier{j}.params"), &c.params);
        ck.put_adam(&format!("classifier{j}"), &c.optim, &mut adam_steps);
    }
    if let Some(rnd) = &t.rnd {
        ck.put_params("rnd.target", rnd.target());
        ck.put_params("rnd.predictor", &rnd.predictor);
        ck.put_adam("rnd.predictor", &rnd.optim, &mut adam_steps);
    }
    if let Some(v) = &t.vae {
        put_vae(&mut ck, v)?;
    }
    for cp in &t.checkpoints {
        ck.put_params(format!("checkpoint{:06}.actor", cp.epoch), &cp.actor);
    }
    let (items, cursor) = t.buffer.raw_parts();
    let state = TrainerState {
        state: t.state,
        last_end: t.last_end,
        epoch: t.epoch,
        env_steps: t.env_steps,
        grad_steps: t.grad_steps,
        counters: t.counters,
        hidden_resets: t.hidden_resets,
        warnings: t.warnings.clone(),
        policy_epochs: t.policy_epochs.clone(),
        agent_updates: t.policies.iter().map(|a| a.updates()).collect(),
        vice_std: t.vice_std.clone(),
        rnd_std: t.rnd_std,
        act_word_pos: t.act_rng.get_word_pos().to_string(),
        learn_word_pos: t.learn_rng.get_word_pos().to_string(),
        pools: t
            .pools
            .iter()
            .map(|p| p.frames().iter().map(|f| f.state).collect())
            .collect(),
        adam_steps,
        checkpoints: t.checkpoints.iter().map(|c| (c.epoch, c.env_steps)).collect(),
        buffer_capacity: t.buffer.capacity(),
        buffer_cursor: cursor,
        buffer_inserted: t.buffer.inserted(),
        buffer: items
            .iter()
            .map(|tr| StoredTransition {
                state: tr.obs.state,
                action: tr.action.clone(),
                next_state: tr.next_obs.state,
                step_index: tr.step_index,
            })
            .collect(),
        transition_log: t.transition_log.clone(),
        rows: t.rows.clone(),
    };
    ck.put_json("trainer", &state)?;
    Ok(ck)
}

fn word_pos(s: &str) -> Result<u128> {
    s.parse().map_err(|_| bad("bad random stream position"))
}

fn positioned(seed: u64, stream: u64, pos: u128) -> ChaCha8Rng {
    let mut r = stream_rng(seed, stream);
    r.set_word_pos(pos);
    r
}

/// Rebuilds a trainer from [`snapshot`]. When `expected` is given and its
/// digest differs from the stored one, a warning is recorded and the stored
/// configuration wins.
pub fn restore(ck: &Checkpoint, expected: Option<&RunConfig>) -> Result<Trainer> {
    ck.expect_tag(TAG_RUN)?;
    let config: RunConfig = ck.json("config")?;
    if config.digest() != ck.config_digest {
        return Err(bad("stored configuration does not match the header digest"));
    }
    let s: TrainerState = ck.json("trainer")?;
    let vae = if ck.sections.contains_key("vae.params") {
        Some(Arc::new(read_vae(ck)?))
    } else {
        None
    };
    let task = config.task;
    let obs = config.obs;
    let seed = config.loop_.seed;
    let pools = s
        .pools
        .iter()
        .map(|states| GoalPool::from_states(task, states, obs))
        .collect::<Result<Vec<_>>>()?;
    let mut t = Trainer::build(config, vae, Some(pools))?;
    if let Some(e) = expected {
        if e.digest() != ck.config_digest {
            t.warnings
                .push("configuration differs from the one stored in the checkpoint; resuming with the stored one".into());
        }
    }

    let steps = &s.adam_steps;
    for (p, agent) in t.policies.iter_mut().enumerate() {
        let sp = &mut agent.params;
        for (name, set) in [
            ("actor", &mut sp.actor),
            ("critic1", &mut sp.critic1),
            ("critic2", &mut sp.critic2),
            ("target1", &mut sp.target1),
            ("target2", &mut sp.target2),
            ("log_alpha", &mut sp.log_alpha),
        ] {
            let loaded = ck.params(&format!("policy{p}.{name}"))?;
            set.check_same_layout(&loaded)?;
            *set = loaded;
        }
        for (name, a) in ["actor", "critic1", "critic2", "log_alpha"].iter().zip(agent.optim.iter_mut()) {
            *a = ck.adam(&format!("policy{p}.{name}"), a, steps)?;
        }
        agent.set_updates(*s.agent_updates.get(p).ok_or_else(|| bad("missing update count"))?);
    }
    for (j, c) in t.classifiers.iter_mut().enumerate() {
        let loaded = ck.params(&format!("classifier{j}.params"))?;
        c.params.check_same_layout(&loaded)?;
        c.params = loaded;
        c.optim = ck.adam(&format!("classifier{j}"), &c.optim, steps)?;
    }
    if let Some(rnd) = t.rnd.as_mut() {
        rnd.restore_target(ck.params("rnd.target")?)?;
        let loaded = ck.params("rnd.predictor")?;
        rnd.predictor.check_same_layout(&loaded)?;
        rnd.predictor = loaded;
        rnd.optim = ck.adam("rnd.predictor", &rnd.optim, steps)?;
    }

    let mut items = Vec::with_capacity(s.buffer.len());
    for st in &s.buffer {
        items.push(Transition {
            obs: t.make_frame(st.state)?,
            action: st.action.clone(),
            next_obs: t.make_frame(st.next_state)?,
            step_index: st.step_index,
        });
    }
    t.buffer = ReplayBuffer::from_raw_parts(s.buffer_capacity, items, s.buffer_cursor, s.buffer_inserted)?;
    t.checkpoints = s
        .checkpoints
        .iter()
        .map(|&(epoch, env_steps)| {
            Ok(PolicyCheckpoint {
                epoch,
                env_steps,
                actor: ck.params(&format!("checkpoint{epoch:06}.actor"))?,
            })
        })
        .collect::<Result<_>>()?;
    t.current = t.make_frame(s.state)?;
    t.state = s.state;
    t.last_end = s.last_end;
    t.epoch = s.epoch;
    t.env_steps = s.env_steps;
    t.grad_steps = s.grad_steps;
    t.counters = s.counters;
    t.hidden_resets = s.hidden_resets;
    t.warnings.extend(s.warnings);
    t.policy_epochs = s.policy_epochs;
    t.vice_std = s.vice_std;
    t.rnd_std = s.rnd_std;
    t.act_rng = positioned(seed, streams::ACT, word_pos(&s.act_word_pos)?);
    t.learn_rng = positioned(seed, streams::LEARN, word_pos(&s.learn_word_pos)?);
    t.transition_log = s.transition_log;
    t.rows = s.rows;
    Ok(t)
}
