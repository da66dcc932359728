use crate::{ParamSet, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: ParamSet,
    v: ParamSet,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &ParamSet {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamSet {
        &self.v
    }

    /// Rebuilds a state from saved moments.
    pub fn from_parts(config: AdamConfig, m: ParamSet, v: ParamSet, step: u64) -> Result<Self, TensorError> {
        m.check_same_layout(&v)?;
        Ok(Self { config, m, v, step })
    }

    /// One bias-corrected Adam update, applied in place. Rejects the whole
    /// step (leaving everything untouched) if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<(), TensorError> {
        params.check_same_layout(grads)?;
        params.check_same_layout(&self.m)?;
        for (name, g) in grads.iter() {
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - (beta1 as f64).powi(t);
        let c2 = 1.0 - (beta2 as f64).powi(t);
        let (c1, c2) = (c1 as f32, c2 as f32);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
