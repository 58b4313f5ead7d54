//! Adam with bias correction and decoupled weight decay.

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::Float;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: Float,
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
    pub weight_decay: Float,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1.0e-8,
            weight_decay: 1.0e-5,
        }
    }
}

/// Moment estimates, one pair per parameter in store order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        AdamState {
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
        }
    }
}

/// One Adam update over every parameter in `store`.
///
/// Decay is decoupled from the moments: `value -= lr * weight_decay * value`
/// runs first, then the bias-corrected Adam delta is subtracted.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(TensorError::Config(format!(
            "learning rate must be positive, got {}",
            cfg.lr
        )));
    }
    if state.first_moment.len() != store.len() || state.second_moment.len() != store.len() {
        return Err(TensorError::Contract(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.first_moment.len(),
            store.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in store
        .params_mut()
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(TensorError::dim("adam", p.value.shape(), m.shape()));
        }
        let decay = cfg.lr * cfg.weight_decay;
        let values = p.value.data_mut();
        let grads = p.grad.data();
        for (((w, &g), mi), vi) in values
            .iter_mut()
            .zip(grads)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= decay * *w;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Adam bundled with its state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(TensorError::Config(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        Ok(Adam {
            config,
            state: AdamState::new(store),
        })
    }

    pub fn set_lr(&mut self, lr: Float) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        adam_step(store, &mut self.state, &self.config)
    }
}
