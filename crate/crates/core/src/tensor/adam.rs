use std::collections::BTreeMap;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam hyperparameters. The learning rate defaults to `1e-4`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub(crate) first: BTreeMap<String, Vec<T>>,
    pub(crate) second: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |n: usize| vec![T::zero(); n];
        AdamState {
            config,
            step: 0,
            first: params
                .iter()
                .map(|(k, v)| (k.to_string(), zeros(v.len())))
                .collect(),
            second: params
                .iter()
                .map(|(k, v)| (k.to_string(), zeros(v.len())))
                .collect(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.second.get(name).map(Vec::as_slice)
    }

    /// Bias-corrected Adam update of every parameter, then clear gradients.
    ///
    /// Every registered parameter must carry a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::contract(format!(
                "parameter `{name}` has no gradient"
            )));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let corr1 = T::one() - b1.powi(t);
        let corr2 = T::one() - b2.powi(t);
        for (name, tensor) in params.iter_mut() {
            let grad = tensor.grad().expect("checked above").to_vec();
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            if m.len() != grad.len() || v.len() != grad.len() {
                return Err(Error::dim("adam_step", &[m.len()], &[grad.len()]));
            }
            for (((p, &g), mi), vi) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / corr1;
                let vhat = *vi / corr2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
            tensor.clear_grad();
        }
        Ok(())
    }
}
