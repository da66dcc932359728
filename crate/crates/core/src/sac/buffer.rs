use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tensorcore::Tensor;

use crate::env::{EnvState, Observation, IMAGE_CHANNELS, IMAGE_SIZE};
use crate::{Error, Result};

/// One perceived moment: the observation, the cached frozen-encoder latent
/// when a representation is in use, and the simulator state behind it.
///
/// The state is never shown to learned-reward agents; it serves the
/// ground-truth reward mode and metric logging.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub state: EnvState,
    pub observation: Observation,
    pub latent: Option<Vec<f32>>,
}

/// Which slice of a [`Frame`] a network consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Low-dimensional state followed by proprioception.
    State,
    /// Encoder latent followed by proprioception.
    Latent,
    /// Raw image through a conv trunk, proprioception as side vector.
    Pixels,
    /// Low-dimensional state alone; reward models ignore proprioception.
    StateOnly,
    /// Raw image alone.
    ImageOnly,
}

impl InputKind {
    pub fn uses_image(self) -> bool {
        matches!(self, InputKind::Pixels | InputKind::ImageOnly)
    }
}

/// Batched network input assembled from frames.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub image: Option<Tensor<f32>>,
    pub vector: Tensor<f32>,
}

impl NetInput {
    pub fn batch(&self) -> usize {
        self.vector.batch()
    }
}

fn vector_part<'a>(frame: &'a Frame, kind: InputKind) -> Result<[&'a [f32]; 2]> {
    let o = &frame.observation;
    Ok(match kind {
        InputKind::State => [&o.state_vec, &o.proprio],
        InputKind::StateOnly => [&o.state_vec, &[]],
        InputKind::Pixels => [&o.proprio, &[]],
        InputKind::ImageOnly => [&[], &[]],
        InputKind::Latent => [
            frame
                .latent
                .as_deref()
                .ok_or_else(|| Error::Invalid("frame has no cached latent".into()))?,
            &[],
        ],
    })
}

pub fn vector_dim(frame: &Frame, kind: InputKind) -> Result<usize> {
    Ok(vector_part(frame, kind)?.iter().map(|p| p.len()).sum())
}

/// Stacks frames into `[batch, ...]` tensors for a network of input `kind`.
pub fn assemble(frames: &[&Frame], kind: InputKind) -> Result<NetInput> {
    let b = frames.len();
    if b == 0 {
        return Err(Error::Invalid("cannot assemble an empty batch".into()));
    }
    let dim = vector_dim(frames[0], kind)?;
    let mut vector = Vec::with_capacity(b * dim);
    let pix = IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS;
    let mut image = kind.uses_image().then(|| Vec::with_capacity(b * pix));
    for f in frames {
        let parts = vector_part(f, kind)?;
        let before = vector.len();
        for p in parts {
            vector.extend_from_slice(p);
        }
        if vector.len() - before != dim {
            return Err(Error::Invalid("frames with differing input widths in one batch".into()));
        }
        if let Some(img) = image.as_mut() {
            let src = f
                .observation
                .image
                .as_ref()
                .ok_or_else(|| Error::Invalid("pixel input requested from a state observation".into()))?;
            img.extend(src.pixels_f32());
        }
    }
    Ok(NetInput {
        image: image
            .map(|d| Tensor::new(vec![b, IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS], d))
            .transpose()?,
        vector: Tensor::new(vec![b, dim], vector)?,
    })
}

/// An environment transition. Rewards are deliberately absent: they are
/// recomputed from the current reward models whenever a batch is drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Arc<Frame>,
    pub action: Vec<f32>,
    pub next_obs: Arc<Frame>,
    pub step_index: u64,
}

/// Fixed-capacity FIFO of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            cursor: 0,
            inserted: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total insertions, including evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.inserted += 1;
    }

    /// Storage order and write cursor, for persistence.
    pub fn raw_parts(&self) -> (&[Transition], usize) {
        (&self.items, self.cursor)
    }

    pub fn from_raw_parts(capacity: usize, items: Vec<Transition>, cursor: usize, inserted: u64) -> Result<Self> {
        if capacity == 0 || items.len() > capacity || cursor >= capacity || inserted < items.len() as u64 {
            return Err(Error::Invalid("inconsistent replay buffer layout".into()));
        }
        Ok(Self { capacity, items, cursor, inserted })
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Stored transitions from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Uniform indices, with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::Invalid("sampling from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    /// SHA-256 over every stored byte, oldest first.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in self.iter() {
            hash_frame(&mut h, &t.obs);
            for a in &t.action {
                h.update(a.to_le_bytes());
            }
            hash_frame(&mut h, &t.next_obs);
            h.update(t.step_index.to_le_bytes());
        }
        h.finalize().into()
    }
}

fn hash_frame(h: &mut Sha256, f: &Frame) {
    let o = &f.observation;
    for v in o.state_vec.iter().chain(&o.proprio).chain(f.latent.iter().flatten()) {
        h.update(v.to_le_bytes());
    }
    if let Some(img) = &o.image {
        h.update(&img.data);
    }
    for v in f.state.beads.iter().chain([
        &f.state.valve_angle,
        &f.state.object.x,
        &f.state.object.y,
        &f.state.object.theta,
        &f.state.pusher,
    ]) {
        h.update(v.to_le_bytes());
    }
}
