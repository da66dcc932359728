//! β-VAE over rendered frames. After pretraining the encoder is frozen and
//! its posterior mean becomes the actor/critic observation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tensorcore::{AdamConfig, AdamState, LayerSpec, Network, ParamSet, Params, Scalar, Tensor};

use crate::env::{render, sample_random_state, Image, Observation, TaskId, IMAGE_CHANNELS, IMAGE_SIZE};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaeData {
    /// Renders of uniformly sampled simulator states.
    RandomStates,
    /// Frames visited by a novelty-seeking policy run reset-free.
    Exploratory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub beta: f32,
    pub encoder_filters: Vec<usize>,
    pub pooling: bool,
    pub n_samples: usize,
    pub epochs: usize,
    pub data: VaeData,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 256,
            latent_dim: 16,
            beta: 0.5,
            encoder_filters: vec![64, 64, 32],
            pooling: false,
            n_samples: 10_000,
            epochs: 50,
            data: VaeData::RandomStates,
        }
    }
}

/// Batch-mean loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLoss<T> {
    pub total: T,
    pub recon: T,
    pub kl: T,
}

/// `½·Σ(μ² + σ² − 1 − 2·log σ)` for one diagonal Gaussian.
pub fn kl_to_unit_gaussian(mu: &[f64], log_sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(log_sigma)
        .map(|(m, ls)| 0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls))
        .sum()
}

pub struct VaeModel {
    pub config: VaeConfig,
    encoder: Network,
    decoder: Network,
    /// Encoder (`enc.`) then decoder (`dec.`) parameters.
    pub params: ParamSet,
    pub optim: AdamState,
    frozen: bool,
}

/// Stacks images as a `[batch, 32, 32, 3]` tensor in [0, 1].
pub fn image_batch(images: &[&Image]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS);
    for im in images {
        data.extend(im.pixels_f32());
    }
    Ok(Tensor::new(vec![images.len(), IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS], data)?)
}

impl VaeModel {
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, rng: &mut R) -> Result<Self> {
        let l = config.latent_dim;
        if l == 0 || config.encoder_filters.is_empty() {
            return Err(Error::Config("vae needs a latent dimension and encoder filters".into()));
        }
        let mut enc_layers = Vec::new();
        for &f in &config.encoder_filters {
            enc_layers.push(LayerSpec::conv(f));
            enc_layers.push(LayerSpec::Relu);
            if config.pooling {
                enc_layers.push(LayerSpec::MaxPool { size: 2 });
            }
        }
        enc_layers.push(LayerSpec::Flatten);
        enc_layers.push(LayerSpec::dense(2 * l));
        let encoder = Network::with_prefix("enc.", &[IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS], enc_layers)?;

        // Mirror: undo each stride-2 stage with a doubling transpose conv.
        let stages = config.encoder_filters.len() * if config.pooling { 2 } else { 1 };
        let side = IMAGE_SIZE >> stages;
        if side == 0 || side << stages != IMAGE_SIZE {
            return Err(Error::Config("encoder depth does not divide the image size".into()));
        }
        let last = *config.encoder_filters.last().unwrap();
        let mut dec_layers = vec![
            LayerSpec::dense(side * side * last),
            LayerSpec::Relu,
            LayerSpec::Reshape {
                height: side,
                width: side,
                channels: last,
            },
        ];
        let mut widths: Vec<usize> = config.encoder_filters.iter().rev().skip(1).copied().collect();
        widths.resize(stages - 1, *config.encoder_filters.first().unwrap());
        for &f in &widths {
            dec_layers.push(LayerSpec::deconv(f));
            dec_layers.push(LayerSpec::Relu);
        }
        dec_layers.push(LayerSpec::deconv(IMAGE_CHANNELS));
        dec_layers.push(LayerSpec::Sigmoid);
        let decoder = Network::with_prefix("dec.", &[l], dec_layers)?;

        let mut params = encoder.init_params(rng);
        params.merge_prefixed("", decoder.init_params(rng))?;
        let optim = AdamState::new(&params, AdamConfig::with_lr(config.lr));
        Ok(Self {
            config,
            encoder,
            decoder,
            params,
            optim,
            frozen: false,
        })
    }

    /// Rebuilds a model from saved parameters and optimizer state.
    pub fn from_parts(config: VaeConfig, params: ParamSet, optim: AdamState, frozen: bool) -> Result<Self> {
        let mut m = Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        m.params.check_same_layout(&params)?;
        optim.first_moment().check_same_layout(&params)?;
        m.params = params;
        m.optim = optim;
        m.frozen = frozen;
        Ok(m)
    }

    pub fn networks(&self) -> (&Network, &Network) {
        (&self.encoder, &self.decoder)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// SHA-256 of the encoder parameters.
    pub fn encoder_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(n, _)| n.starts_with("enc.")) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Loss on `x` with the supplied reparameterization noise `eps`
    /// (`batch × latent`), plus gradients for all parameters in `params`
    /// order. Reconstruction error is summed over pixels and averaged over the
    /// batch; the KL term likewise.
    pub fn objective<T: Scalar>(
        &self,
        params: &Params<T>,
        x: &Tensor<T>,
        eps: &[T],
    ) -> Result<(VaeLoss<T>, Params<T>, u64)> {
        let l = self.config.latent_dim;
        let b = x.batch();
        let bt = T::of(b as f64);
        let beta = T::of(self.config.beta as f64);
        let half = T::of(0.5);
        let one = T::one();
        let (stats, enc_cache) = self.encoder.forward(params, x)?;
        let mut z = Vec::with_capacity(b * l);
        let mut kl = T::zero();
        for i in 0..b {
            let row = stats.row(i);
            for j in 0..l {
                let (m, ls) = (row[j], row[l + j]);
                let s = ls.exp();
                z.push(m + s * eps[i * l + j]);
                kl += half * (m * m + s * s - one - (ls + ls));
            }
        }
        kl = kl / bt;
        let z = Tensor::new(vec![b, l], z)?;
        let (xhat, dec_cache) = self.decoder.forward(params, &z)?;
        let mut recon = T::zero();
        let two = T::of(2.0);
        let dxhat: Vec<T> = xhat
            .data()
            .iter()
            .zip(x.data())
            .map(|(&p, &t)| {
                recon += (p - t) * (p - t);
                two * (p - t) / bt
            })
            .collect();
        recon = recon / bt;
        let (dec_grads, dz) = self.decoder.backward(params, &dec_cache, &Tensor::new(xhat.shape().to_vec(), dxhat)?)?;
        let mut dstats = Vec::with_capacity(b * 2 * l);
        for i in 0..b {
            let row = stats.row(i);
            let dzr = dz.row(i);
            for j in 0..l {
                dstats.push(dzr[j] + beta * row[j] / bt);
            }
            for j in 0..l {
                let s = row[l + j].exp();
                dstats.push(dzr[j] * s * eps[i * l + j] + beta * (s * s - one) / bt);
            }
        }
        let (mut grads, _) = self
            .encoder
            .backward(params, &enc_cache, &Tensor::new(vec![b, 2 * l], dstats)?)?;
        grads.merge_prefixed("", dec_grads)?;
        let sig = enc_cache.kink_signature().rotate_left(11) ^ dec_cache.kink_signature();
        Ok((
            VaeLoss {
                total: recon + beta * kl,
                recon,
                kl,
            },
            grads,
            sig,
        ))
    }

    /// One Adam step on an image batch. Rejected once frozen.
    pub fn train_step<R: Rng + ?Sized>(&mut self, x: &Tensor<f32>, rng: &mut R) -> Result<VaeLoss<f32>> {
        if self.frozen {
            return Err(Error::Invalid("vae is frozen".into()));
        }
        let eps: Vec<f32> = (0..x.batch() * self.config.latent_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let (loss, grads, _) = self.objective(&self.params, x, &eps)?;
        crate::error::finite(loss.total, "vae loss")?;
        self.optim.step(&mut self.params, &grads)?;
        Ok(loss)
    }

    /// Mean reconstruction (sum of squared errors per image) with the
    /// posterior mean as code.
    pub fn reconstruction_error(&self, x: &Tensor<f32>) -> Result<f32> {
        let l = self.config.latent_dim;
        let stats = self.encoder.infer(&self.params, x)?;
        let b = x.batch();
        let mut mu = Vec::with_capacity(b * l);
        for i in 0..b {
            mu.extend_from_slice(&stats.row(i)[..l]);
        }
        let xhat = self.decoder.infer(&self.params, &Tensor::new(vec![b, l], mu)?)?;
        let sse: f32 = xhat.data().iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(sse / b as f32)
    }

    /// Posterior means for a batch, ignoring the freeze state.
    pub fn posterior_means(&self, x: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
        let l = self.config.latent_dim;
        let stats = self.encoder.infer(&self.params, x)?;
        Ok((0..x.batch()).map(|i| stats.row(i)[..l].to_vec()).collect())
    }

    /// Latent mean of each observation followed by its proprioception.
    /// Only available on a frozen model.
    pub fn encode_batch(&self, observations: &[&Observation]) -> Result<Vec<Vec<f32>>> {
        if !self.frozen {
            return Err(Error::Invalid("encoding requires a pretrained, frozen vae".into()));
        }
        let images: Vec<&Image> = observations
            .iter()
            .map(|o| {
                o.image
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("vae encoding needs image observations".into()))
            })
            .collect::<Result<_>>()?;
        let means = self.posterior_means(&image_batch(&images)?)?;
        Ok(means
            .into_iter()
            .zip(observations)
            .map(|(mut m, o)| {
                m.extend_from_slice(&o.proprio);
                m
            })
            .collect())
    }

    pub fn encode(&self, observation: &Observation) -> Result<Vec<f32>> {
        Ok(self.encode_batch(&[observation])?.remove(0))
    }

    /// Trains on `images` for `epochs` passes of shuffled full batches and
    /// freezes the encoder. Returns the mean reconstruction term per epoch.
    pub fn fit<R: Rng + ?Sized>(&mut self, images: &[Image], epochs: usize, rng: &mut R) -> Result<Vec<f32>> {
        let bs = self.config.batch_size;
        if images.len() < bs {
            return Err(Error::Config(format!(
                "vae needs at least one batch ({bs}) of samples, got {}",
                images.len()
            )));
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut sum = 0.0;
            let mut n = 0;
            for chunk in order.chunks_exact(bs) {
                let batch: Vec<&Image> = chunk.iter().map(|&i| &images[i]).collect();
                sum += self.train_step(&image_batch(&batch)?, rng)?.recon;
                n += 1;
            }
            history.push(sum / n as f32);
        }
        self.freeze();
        Ok(history)
    }
}

/// Renders `n` uniformly sampled states of `task`.
pub fn random_state_images<R: Rng + ?Sized>(task: TaskId, n: usize, rng: &mut R) -> Vec<Image> {
    (0..n).map(|_| render(&sample_random_state(task, rng))).collect()
}

/// Pretrains on renders of random states and freezes the encoder.
pub fn pretrain<R: Rng + ?Sized>(
    model: &mut VaeModel,
    task: TaskId,
    n_samples: usize,
    epochs: usize,
    rng: &mut R,
) -> Result<Vec<f32>> {
    let images = random_state_images(task, n_samples, rng);
    model.fit(&images, epochs, rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tensorcore::{check_gradients, GradCheckOptions};

    use super::*;
    use crate::env::{observe, EnvState, ObsMode};

    fn small(beta: f32) -> VaeConfig {
        VaeConfig {
            encoder_filters: vec![8, 8, 4],
            latent_dim: 4,
            beta,
            batch_size: 32,
            lr: 1e-3,
            ..VaeConfig::default()
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_to_unit_gaussian(&[0.0], &[0.0]), 0.0);
        assert!((kl_to_unit_gaussian(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn objective_terms_match_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = VaeModel::new(small(0.0), &mut rng).unwrap();
        let images = random_state_images(TaskId::Valve, 3, &mut rng);
        let x = image_batch(&images.iter().collect::<Vec<_>>()).unwrap();
        let eps = vec![0.0f32; 12];
        let (loss, _, _) = model.objective(&model.params, &x, &eps).unwrap();
        assert_eq!(loss.total, loss.recon);

        let x64: Tensor<f64> = x.cast();
        let p64: Params<f64> = model.params.cast();
        let (loss, _, _) = model.objective(&p64, &x64, &[0.0; 12]).unwrap();
        let stats = model.encoder.infer(&p64, &x64).unwrap();
        let oracle: f64 = (0..3)
            .map(|i| kl_to_unit_gaussian(&stats.row(i)[..4], &stats.row(i)[4..]))
            .sum::<f64>()
            / 3.0;
        assert!((loss.kl - oracle).abs() < 1e-12);
        assert!(loss.kl >= 0.0);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = VaeModel::new(small(0.5), &mut rng).unwrap();
        let images = random_state_images(TaskId::Reposition, 2, &mut rng);
        let x: Tensor<f64> = image_batch(&images.iter().collect::<Vec<_>>()).unwrap().cast();
        let eps: Vec<f64> = (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let p: Params<f64> = model.params.cast();
        let (_, grads, _) = model.objective(&p, &x, &eps).unwrap();
        let report = check_gradients(
            &p,
            &grads,
            |q| {
                let (l, _, sig) = model.objective(q, &x, &eps).expect("objective");
                Ok((l.total, sig))
            },
            &GradCheckOptions {
                max_coords_per_tensor: Some(12),
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.checked > 100);
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = VaeModel::new(small(0.5), &mut rng).unwrap();
        let before = model.params.clone();
        let images = random_state_images(TaskId::Valve, 40, &mut rng);
        model.fit(&images, 0, &mut rng).unwrap();
        assert_eq!(model.params, before);
        assert!(model.is_frozen());
    }

    #[test]
    fn pretraining_improves_reconstruction_and_freezes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = VaeModel::new(small(0.5), &mut rng).unwrap();
        let untrained = VaeModel::new(small(0.5), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let probe = random_state_images(TaskId::Valve, 16, &mut rng);
        let probe = image_batch(&probe.iter().collect::<Vec<_>>()).unwrap();
        let history = pretrain(&mut model, TaskId::Valve, 256, 8, &mut rng).unwrap();
        assert!(history.last().unwrap() < &history[0], "{history:?}");
        assert!(model.reconstruction_error(&probe).unwrap() < untrained.reconstruction_error(&probe).unwrap());

        let digest = model.encoder_digest();
        assert!(model.train_step(&probe, &mut rng).is_err());
        assert_eq!(model.encoder_digest(), digest);
    }

    #[test]
    fn encoding_is_deterministic_and_carries_proprio() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = VaeModel::new(small(0.5), &mut rng).unwrap();
        let o = observe(&EnvState::canonical(TaskId::Beads), ObsMode::Image);
        assert!(model.encode(&o).is_err());
        model.freeze();
        let a = model.encode(&o).unwrap();
        assert_eq!(a.len(), 4 + 1);
        assert_eq!(a, model.encode(&o).unwrap());
        assert_eq!(a[4], o.proprio[0]);
    }

    #[test]
    fn decoder_mirrors_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = VaeModel::new(VaeConfig::default(), &mut rng).unwrap();
        let (enc, dec) = model.networks();
        assert_eq!(enc.output_shape().size(), 32);
        assert_eq!(dec.output_shape().dims(), vec![32, 32, 3]);
    }
}
