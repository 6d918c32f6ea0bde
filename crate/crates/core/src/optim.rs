//! AdamW with decoupled weight decay over a [`ParamStore`].

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: 1.0,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
}

/// Matrices decay; biases, norms, embeddings and tokens do not.
pub fn decays(name: &str, rank: usize) -> bool {
    rank >= 2 && name.ends_with(".w")
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: AdamState::default(),
        }
    }

    /// Applies one update to every parameter that has a gradient and
    /// returns the global gradient norm before clipping.
    ///
    /// `only` restricts the update to names accepted by the predicate.
    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        lr: f64,
        only: &dyn Fn(&str) -> bool,
    ) -> Result<f64> {
        let mut collected: Vec<(String, Vec<f32>)> = Vec::new();
        let mut sq = 0f64;
        for (name, var) in store.iter() {
            if !only(name) {
                continue;
            }
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g: Vec<f32> = g.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            sq += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            collected.push((name.clone(), g));
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Training(format!("gradient norm is {norm}")));
        }
        let clip = if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            (self.config.grad_clip / norm) as f32
        } else {
            1.0
        };
        self.state.t += 1;
        let t = self.state.t as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, g) in collected {
            let var = store.var(&name).expect("collected from store");
            let mut w: Vec<f32> = var.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            let m = self.state.m.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
            let v = self.state.v.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
            let decay = if decays(&name, var.rank()) {
                (lr * self.config.weight_decay) as f32
            } else {
                0.0
            };
            for i in 0..w.len() {
                let gi = g[i] * clip;
                m[i] = (b1 as f32) * m[i] + (1.0 - b1 as f32) * gi;
                v[i] = (b2 as f32) * v[i] + (1.0 - b2 as f32) * gi * gi;
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                w[i] -= decay * w[i];
                w[i] -= (lr * mh / (vh.sqrt() + self.config.eps)) as f32;
            }
            let t = Tensor::from_vec(w, var.shape(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(norm)
    }
}

/// Cosine decay to zero after a linear warmup.
pub fn cosine_lr(base: f64, step: u64, total: u64, warmup_frac: f64) -> f64 {
    let warmup = ((total as f64) * warmup_frac).round() as u64;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
