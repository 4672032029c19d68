use crate::element::Element;
use crate::error::{arg_err, Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<E> {
    m: Vec<E>,
    v: Vec<E>,
    step: u64,
    pub config: AdamConfig,
}

impl<E: Element> AdamState<E> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![E::zero(); len],
            v: vec![E::zero(); len],
            step: 0,
            config,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update; clears the gradient afterwards.
    pub fn step(&mut self, name: &str, param: &mut Tensor<E>) -> Result<()> {
        if param.numel() != self.m.len() {
            return arg_err(
                "adam_step",
                format!("state sized {} for parameter of {}", self.m.len(), param.numel()),
            );
        }
        let grad = param
            .take_grad()
            .ok_or_else(|| TensorError::MissingGradient(name.to_string()))?;
        self.step += 1;
        let c = self.config;
        let b1 = E::from_f64_lossy(c.beta1);
        let b2 = E::from_f64_lossy(c.beta2);
        let one = E::one();
        let bc1 = E::from_f64_lossy(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = E::from_f64_lossy(1.0 - c.beta2.powi(self.step as i32));
        let lr = E::from_f64_lossy(c.lr);
        let eps = E::from_f64_lossy(c.eps);
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<E> {
    states: Vec<AdamState<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(store: &ParamStore<E>, config: AdamConfig) -> Self {
        Self {
            states: store
                .iter()
                .map(|(_, t)| AdamState::new(t.numel(), config))
                .collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<E>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        if names.len() != self.states.len() {
            return arg_err("Adam::step", "parameter store changed since construction");
        }
        for ((state, tensor), name) in self.states.iter_mut().zip(store.tensors_mut()).zip(&names) {
            state.step(name, tensor)?;
        }
        Ok(())
    }
}
