//! AdamW with decoupled weight decay and a warmup-cosine learning-rate schedule.

use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates for every trainable tensor of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| if p.trainable { vec![0.0; p.value.numel()] } else { Vec::new() })
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. `grads` is aligned with the store;
    /// parameters without a gradient still decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(invalid(
                "optimizer",
                format!("{} gradients and {} states for {} parameters", grads.len(), self.m.len(), store.len()),
            ));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = &store.params()[i];
            if !p.trainable {
                continue;
            }
            let mut w = p.value.to_vec();
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(invalid("optimizer", format!("gradient shape {:?} for {}", g.shape(), p.name)));
                }
                let (m, v) = (&mut self.m[i], &mut self.v[i]);
                for (k, &gk) in g.data().iter().enumerate() {
                    m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                    v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                    let mhat = m[k] / bc1;
                    let vhat = v[k] / bc2;
                    w[k] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * w[k]);
                }
            } else {
                for x in &mut w {
                    *x -= lr * weight_decay * *x;
                }
            }
            let shape = p.value.shape().to_vec();
            store.set_at(i, Tensor::new(shape, w)?);
        }
        Ok(())
    }

    /// Optimizer state as named tensors, for storing next to the parameters.
    pub fn state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("optim.step".to_string(), Tensor::scalar(self.step as f64))];
        for (i, p) in store.params().iter().enumerate() {
            if p.trainable {
                let shape = p.value.shape().to_vec();
                out.push((format!("optim.m.{}", p.name), Tensor::new(shape.clone(), self.m[i].clone()).expect("shape")));
                out.push((format!("optim.v.{}", p.name), Tensor::new(shape, self.v[i].clone()).expect("shape")));
            }
        }
        out
    }

    /// Restores state written by [`AdamW::state`].
    pub fn load_state(&mut self, store: &ParamStore, state: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str| {
            state
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| invalid("optimizer state", format!("missing {name}")))
        };
        self.step = find("optim.step")?.item()? as u64;
        for (i, p) in store.params().iter().enumerate() {
            if p.trainable {
                let m = find(&format!("optim.m.{}", p.name))?;
                let v = find(&format!("optim.v.{}", p.name))?;
                if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                    return Err(invalid("optimizer state", format!("shape mismatch for {}", p.name)));
                }
                self.m[i] = m.to_vec();
                self.v[i] = v.to_vec();
            }
        }
        Ok(())
    }
}

/// Scales all gradients down so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g = g.map(|x| x * s);
        }
    }
    norm
}

/// Linear warmup to `base_lr`, then cosine decay to `min_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl WarmupCosine {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            base_lr,
            min_lr: 0.0,
            warmup_steps,
            total_steps: total_steps.max(1),
        }
    }

    /// Learning rate for the update with zero-based index `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
