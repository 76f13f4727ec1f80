//! Adam with bias correction, and the staircase learning-rate decay.

use crate::params::{GradBuffers, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
    steps: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, config: AdamConfig) -> Self {
        let zeros = |_| Vec::new();
        Self {
            config,
            first: (0..store.len()).map(zeros).collect(),
            second: (0..store.len()).map(zeros).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every trainable parameter. Parameters without a
    /// gradient entry are treated as having a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &GradBuffers<F>, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let one = F::one();
        let correction1 = F::of(1.0 - beta1.powi(t));
        let correction2 = F::of(1.0 - beta2.powi(t));
        let (lr, eps) = (F::of(lr), F::of(eps));

        let ids: Vec<_> = store.iter().filter(|(_, e)| e.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let k = id.index();
            let value = store.value_mut(id).data_mut();
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            if m.is_empty() {
                m.resize(value.len(), F::zero());
                v.resize(value.len(), F::zero());
            }
            let g = grads.get(id);
            for i in 0..value.len() {
                let gi = g.map_or(F::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// `initial · decay^⌊step / every⌋`, with `step` counted from zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub initial: f64,
    pub decay: f64,
    pub every: u64,
}

impl StepDecay {
    pub fn rate(&self, step: u64) -> f64 {
        let k = step.checked_div(self.every).unwrap_or(0);
        self.initial * self.decay.powi(k as i32)
    }
}
