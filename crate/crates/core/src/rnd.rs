//! Random network distillation novelty reward and the running standard
//! deviation used to normalize both learned rewards.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorcore::{AdamConfig, AdamState, FeatureNet, ParamSet, Tensor};

use crate::error::finite;
use crate::sac::{assemble, build_net, Frame, InputKind, NetInput};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdEstimator {
    /// Exponential moving average of per-batch variances.
    Ema,
    /// Exact pooled variance over every value seen so far.
    Welford,
}

/// Running spread estimate of a reward stream. Before the first update
/// [`std`](Self::std) reports 1 so normalization is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningStd {
    pub coefficient: f64,
    pub estimator: StdEstimator,
    pub variance: f64,
    pub initialized: bool,
    mean: f64,
    count: u64,
}

/// Variances below this are treated as degenerate and fall back to unit
/// scale rather than amplifying rewards without bound.
const MIN_VARIANCE: f64 = 1e-12;

impl RunningStd {
    pub fn new(coefficient: f64, estimator: StdEstimator) -> Self {
        Self {
            coefficient,
            estimator,
            variance: 0.0,
            initialized: false,
            mean: 0.0,
            count: 0,
        }
    }

    pub fn std(&self) -> f64 {
        if self.initialized && self.variance > MIN_VARIANCE {
            self.variance.sqrt()
        } else {
            1.0
        }
    }

    pub fn normalize(&self, x: f32) -> f32 {
        (x as f64 / self.std()) as f32
    }

    /// Folds in one batch. Only the batch's mean and population variance are
    /// used, so the result does not depend on the order of values.
    pub fn update(&mut self, batch: &[f32]) {
        if batch.is_empty() {
            return;
        }
        let n = batch.len() as f64;
        let mean = batch.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = batch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        match self.estimator {
            StdEstimator::Ema => {
                self.variance = if self.initialized {
                    self.coefficient * self.variance + (1.0 - self.coefficient) * var
                } else {
                    var
                };
            }
            StdEstimator::Welford => {
                let m = self.count as f64;
                let total = m + n;
                let delta = mean - self.mean;
                let m2 = self.variance * m + var * n + delta * delta * m * n / total;
                self.mean += delta * n / total;
                self.variance = m2 / total;
            }
        }
        self.count += batch.len() as u64;
        self.initialized = true;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RndConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub embedding_dim: usize,
    pub conv_filters: Vec<usize>,
    pub pooling: bool,
    pub hidden: Vec<usize>,
}

impl Default for RndConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 256,
            embedding_dim: 64,
            conv_filters: vec![16, 32, 64],
            pooling: false,
            hidden: vec![256, 256],
        }
    }
}

/// A frozen random target network and a predictor trained to imitate it.
pub struct RndPair {
    pub config: RndConfig,
    pub input: InputKind,
    net: FeatureNet,
    target: ParamSet,
    pub predictor: ParamSet,
    pub optim: AdamState,
}

impl RndPair {
    pub fn new<R: Rng + ?Sized>(config: RndConfig, input: InputKind, vector_dim: usize, rng: &mut R) -> Result<Self> {
        let net = build_net(
            input,
            vector_dim,
            0,
            &config.conv_filters,
            config.pooling,
            &config.hidden,
            config.embedding_dim,
        )?;
        let target = net.init_params(rng);
        let predictor = net.init_params(rng);
        let optim = AdamState::new(&predictor, AdamConfig::with_lr(config.lr));
        Ok(Self {
            config,
            input,
            net,
            target,
            predictor,
            optim,
        })
    }

    pub fn target(&self) -> &ParamSet {
        &self.target
    }

    /// Replaces the target, e.g. when restoring a checkpoint.
    pub fn restore_target(&mut self, target: ParamSet) -> Result<()> {
        self.net.check_params(&target)?;
        self.target = target;
        Ok(())
    }

    pub fn network(&self) -> &FeatureNet {
        &self.net
    }

    fn errors_on(&self, input: &NetInput) -> Result<Vec<f32>> {
        let f = self.net.infer(&self.target, input.image.as_ref(), &input.vector)?;
        let g = self.net.infer(&self.predictor, input.image.as_ref(), &input.vector)?;
        Ok((0..f.batch())
            .map(|i| f.row(i).iter().zip(g.row(i)).map(|(a, b)| (b - a) * (b - a)).sum())
            .collect())
    }

    /// Squared prediction error per frame.
    pub fn raw_errors(&self, frames: &[&Frame]) -> Result<Vec<f32>> {
        self.errors_on(&assemble(frames, self.input)?)
    }

    pub fn raw_error(&self, frame: &Frame) -> Result<f32> {
        Ok(self.raw_errors(&[frame])?[0])
    }

    /// Errors divided by the running standard deviation.
    pub fn rewards(&self, frames: &[&Frame], running: &RunningStd) -> Result<Vec<f32>> {
        Ok(self
            .raw_errors(frames)?
            .into_iter()
            .map(|e| running.normalize(e))
            .collect())
    }

    /// One Adam step of the predictor on `frames`; returns the mean squared
    /// embedding error before the step.
    pub fn update(&mut self, frames: &[&Frame]) -> Result<f32> {
        let input = assemble(frames, self.input)?;
        self.update_on(&input)
    }

    pub fn update_on(&mut self, input: &NetInput) -> Result<f32> {
        let f = self.net.infer(&self.target, input.image.as_ref(), &input.vector)?;
        let (g, cache) = self.net.forward(&self.predictor, input.image.as_ref(), &input.vector)?;
        let b = g.batch() as f32;
        let mut loss = 0.0f32;
        let grad: Vec<f32> = g
            .data()
            .iter()
            .zip(f.data())
            .map(|(p, t)| {
                loss += (p - t) * (p - t) / b;
                2.0 * (p - t) / b
            })
            .collect();
        finite(loss, "rnd loss")?;
        let grads = self
            .net
            .backward(&self.predictor, &cache, &Tensor::new(g.shape().to_vec(), grad)?, false)?;
        self.optim.step(&mut self.predictor, &grads.params)?;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::env::{observe, EnvState, ObsMode};

    fn ema() -> RunningStd {
        RunningStd::new(0.99, StdEstimator::Ema)
    }

    #[test]
    fn first_batch_initializes_directly() {
        let mut r = ema();
        r.update(&[-2.0, 2.0]);
        assert_eq!(r.variance, 4.0);
        assert_eq!(r.std(), 2.0);
    }

    #[test]
    fn ema_blends_batch_variance() {
        let mut r = ema();
        r.update(&[1.0, -1.0]);
        r.update(&[3.0, 3.0]);
        assert!((r.variance - 0.99).abs() < 1e-12);
    }

    #[test]
    fn constant_variance_stream_converges_geometrically() {
        let mut r = ema();
        r.update(&[0.0, 0.0, 0.0, 0.0]);
        let v = 2.25;
        let batch = [1.5, -1.5];
        for t in 1..=500 {
            r.update(&batch);
            let expected = v * (1.0 - 0.99f64.powi(t));
            assert!((r.variance - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn fallback_before_warm_up() {
        let r = ema();
        assert_eq!(r.normalize(0.3), 0.3);
        assert_eq!(r.normalize(-2.0), -2.0);
    }

    #[test]
    fn normalizes_by_running_std() {
        let mut r = ema();
        r.update(&[0.0, 4.0]);
        assert_eq!(r.normalize(4.0), 2.0);
        let mut r = ema();
        r.update(&[-3.0, 3.0]);
        assert_eq!(r.normalize(3.0), 1.0);
    }

    #[test]
    fn welford_matches_pooled_variance() {
        let mut r = RunningStd::new(0.99, StdEstimator::Welford);
        let all: Vec<f32> = (0..37).map(|i| ((i * 7) % 11) as f32 - 3.0).collect();
        for chunk in all.chunks(5) {
            r.update(chunk);
        }
        let mean = all.iter().map(|&v| v as f64).sum::<f64>() / 37.0;
        let var = all.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 37.0;
        assert!((r.variance - var).abs() < 1e-9);
    }

    #[test]
    fn normalized_stream_mean_approaches_mean_over_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dist = Normal::new(3.0f32, 0.5).unwrap();
        let mut r = ema();
        let mut acc = 0.0;
        let mut n = 0;
        for step in 0..3000 {
            let batch: Vec<f32> = (0..64).map(|_| dist.sample(&mut rng)).collect();
            r.update(&batch);
            if step >= 1000 {
                acc += batch.iter().map(|&x| r.normalize(x) as f64).sum::<f64>();
                n += 64;
            }
        }
        let avg = acc / n as f64;
        assert!((avg - 6.0).abs() < 0.1, "{avg}");
    }

    fn frames(n: usize, offset: f32, rng: &mut ChaCha8Rng) -> Vec<Arc<Frame>> {
        (0..n)
            .map(|_| {
                let s = EnvState::with_valve(0.0);
                let mut o = observe(&s, ObsMode::State);
                o.state_vec = vec![offset + rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
                Arc::new(Frame {
                    state: s,
                    observation: o,
                    latent: None,
                })
            })
            .collect()
    }

    fn small() -> RndConfig {
        RndConfig {
            hidden: vec![64, 64],
            ..RndConfig::default()
        }
    }

    use rand::Rng;

    #[test]
    fn identical_networks_have_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pair = RndPair::new(small(), InputKind::StateOnly, 2, &mut rng).unwrap();
        let fs = frames(8, 0.0, &mut rng);
        let refs: Vec<&Frame> = fs.iter().map(|f| &**f).collect();
        assert!(pair.raw_errors(&refs).unwrap().iter().all(|&e| e > 0.0));
        pair.predictor = pair.target().clone();
        assert!(pair.raw_errors(&refs).unwrap().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn zero_lr_update_leaves_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = RndConfig { lr: 0.0, ..small() };
        let mut pair = RndPair::new(cfg, InputKind::StateOnly, 2, &mut rng).unwrap();
        let before = pair.predictor.clone();
        let fs = frames(8, 0.0, &mut rng);
        let refs: Vec<&Frame> = fs.iter().map(|f| &**f).collect();
        pair.update(&refs).unwrap();
        assert_eq!(pair.predictor, before);
    }

    #[test]
    fn distillation_learns_seen_region_and_keeps_target_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pair = RndPair::new(small(), InputKind::StateOnly, 2, &mut rng).unwrap();
        let target_bytes = pair.target().to_bytes();
        let seen = frames(64, -1.0, &mut rng);
        let novel = frames(64, 1.5, &mut rng);
        let s: Vec<&Frame> = seen.iter().map(|f| &**f).collect();
        let n: Vec<&Frame> = novel.iter().map(|f| &**f).collect();
        let mean = |v: Vec<f32>| v.iter().sum::<f32>() / v.len() as f32;
        let initial = mean(pair.raw_errors(&s).unwrap());
        let mut losses = Vec::new();
        for _ in 0..1000 {
            losses.push(pair.update(&s).unwrap());
        }
        assert!(losses[..50].windows(2).all(|w| w[1] < w[0]), "{:?}", &losses[..50]);
        let trained = mean(pair.raw_errors(&s).unwrap());
        let held_out = mean(pair.raw_errors(&n).unwrap());
        assert!(trained < 0.1 * initial, "{trained} vs {initial}");
        assert!(held_out >= 2.0 * trained, "{held_out} vs {trained}");
        assert_eq!(pair.target().to_bytes(), target_bytes);

        let mut running = ema();
        running.update(&pair.raw_errors(&s).unwrap());
        let ra = mean(pair.rewards(&s, &running).unwrap());
        let rb = mean(pair.rewards(&n, &running).unwrap());
        assert!(rb > ra);
        assert!(pair.rewards(&n, &running).unwrap().iter().all(|&r| r >= 0.0));
    }
}
