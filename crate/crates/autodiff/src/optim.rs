//! Adam with bias correction and optional global-norm clipping.

use thiserror::Error;

use crate::{ParamStore, Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {name}; step rejected")]
    NonFiniteGradient { name: String },
    #[error("expected {expected} gradients, got {actual}")]
    Misaligned { expected: usize, actual: usize },
    #[error("gradient for {name} has {actual} elements, parameter has {expected}")]
    GradShape { name: String, expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    /// Rescale the whole gradient when its global L2 norm exceeds this.
    pub max_grad_norm: Option<Real>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients are aligned with the store order; `None`
    /// counts as zero. Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<Real>>]) -> Result<(), OptimError> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(OptimError::Misaligned {
                expected: store.len(),
                actual: grads.len(),
            });
        }
        let mut sq = 0.0f64;
        for (id, g) in store.ids().zip(grads) {
            let Some(g) = g else { continue };
            if g.len() != store.get(id).numel() {
                return Err(OptimError::GradShape {
                    name: store.name(id).to_string(),
                    expected: store.get(id).numel(),
                    actual: g.len(),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    name: store.name(id).to_string(),
                });
            }
            sq += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
        let clip = match self.config.max_grad_norm {
            Some(max) if sq.sqrt() > max as f64 => (max as f64 / sq.sqrt()) as Real,
            _ => 1.0,
        };

        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..param.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j] * clip) + c.weight_decay * param[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                param[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Moments and step count as a parameter set, for checkpointing.
    pub fn state(&self, store: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        out.add("adam.step", Tensor::scalar(self.step as Real));
        for (i, (name, t)) in store.iter().enumerate() {
            out.add(format!("adam.m.{name}"), Tensor::new(t.shape().to_vec(), self.m[i].clone()).expect("shape"));
            out.add(format!("adam.v.{name}"), Tensor::new(t.shape().to_vec(), self.v[i].clone()).expect("shape"));
        }
        out
    }

    /// Inverse of [`Adam::state`]. Returns `None` when the state does not fit `store`.
    pub fn from_state(config: AdamConfig, store: &ParamStore, state: &ParamStore) -> Option<Self> {
        let step = state.get(state.find("adam.step")?).item() as u64;
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (name, t) in store.iter() {
            let mt = state.get(state.find(&format!("adam.m.{name}"))?);
            let vt = state.get(state.find(&format!("adam.v.{name}"))?);
            if mt.shape() != t.shape() || vt.shape() != t.shape() {
                return None;
            }
            m.push(mt.data().to_vec());
            v.push(vt.data().to_vec());
        }
        Some(Self { config, step, m, v })
    }
}
