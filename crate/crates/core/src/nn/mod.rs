//! Dense sigmoid networks: tied-weight autoencoder layers, a softmax output
//! layer, their gradients, plain SGD and a finite-difference checker.
//!
//! Everything is `f64`.

pub mod backprop;
pub mod gradcheck;
pub mod layers;
pub mod matrix;

use serde::{Deserialize, Serialize};

pub use backprop::{ClassifierGrads, LayerGrads};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{
    reconstruction_loss, sgd_step, sigmoid, softmax, LayerParams, LogisticLayer,
};
pub use matrix::Matrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Compensated (Neumaier) summation.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}
