//! Momentum SGD with step learning-rate decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Divide the learning rate by 10 every this many epochs (0 = never).
    pub decay_epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            decay_epochs: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SgdState<T: Scalar> {
    pub config: SgdConfig,
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        Ok(Self {
            config,
            velocity: BTreeMap::new(),
        })
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = if self.config.decay_epochs == 0 {
            0
        } else {
            epoch / self.config.decay_epochs
        };
        self.config.learning_rate / 10f64.powi(decays as i32)
    }

    /// `v <- momentum * v + grad; p <- p - lr * v` for every named parameter.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &BTreeMap<String, Tensor<T>>,
        epoch: usize,
    ) -> Result<()> {
        let lr = T::from_f64(self.learning_rate_at(epoch));
        let mu = T::from_f64(self.config.momentum);
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            p.expect_same_shape(grad, "sgd_step")?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            v.expect_same_shape(grad, "sgd_step velocity")?;
            let vd = v.data_mut();
            for (vi, &gi) in vd.iter_mut().zip(grad.data()) {
                *vi = mu * *vi + gi;
            }
            let pd = p.data_mut();
            for (pi, &vi) in pd.iter_mut().zip(v.data()) {
                *pi -= lr * vi;
            }
        }
        Ok(())
    }
}
