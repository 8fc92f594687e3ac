use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::param::{ParamKey, Parameter};
use super::tensor::{Scalar, Tensor};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// SGD or bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Scalar = f32> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: HashMap<ParamKey, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First and second moment for a parameter, once it has been stepped.
    pub fn moments(&self, key: ParamKey) -> Option<&(Tensor<T>, Tensor<T>)> {
        self.moments.get(&key)
    }

    /// Updates every trainable parameter from its gradient buffer and then
    /// clears the buffer. Frozen parameters are skipped untouched.
    ///
    /// Fails with [`crate::Error::StaleGradient`] if a trainable parameter has
    /// not received a gradient since the previous step.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Parameter<T>>,
    {
        if !(self.learning_rate > 0.0) {
            bail!(Config, "learning rate must be positive");
        }
        let params: Vec<&mut Parameter<T>> = params.into_iter().filter(|p| p.trainable).collect();
        if let Some(p) = params.iter().find(|p| !p.grad_ready()) {
            bail!(
                StaleGradient,
                "trainable parameter of shape {:?} stepped before backward",
                p.value.shape()
            );
        }
        self.steps += 1;
        let lr = T::of(self.learning_rate);
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params {
                    for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *v -= lr * g;
                    }
                    p.zero_grad();
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
                let c1 = T::of(1.0 - self.beta1.powi(t));
                let c2 = T::of(1.0 - self.beta2.powi(t));
                let eps = T::of(self.eps);
                for p in params {
                    let (m, v) = self
                        .moments
                        .entry(p.key())
                        .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
                    let it = p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((w, &g), (mi, vi)) in it {
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                    p.zero_grad();
                }
            }
        }
        Ok(())
    }
}
