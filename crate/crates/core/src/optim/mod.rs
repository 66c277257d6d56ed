//! Parameter updates, learning-rate scheduling and the training loop.

mod scheduler;
mod train;

pub use scheduler::{PlateauConfig, PlateauScheduler};
pub use train::{
    epochs_until_memorized, fit, fit_with, train_epoch, EpochRecord, EpochStats, FitConfig, TrainHistory,
    HISTORY_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Parameter;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Update rule applied to every trainable parameter.
///
/// `grads` is aligned with `params`. Frozen parameters are left bitwise
/// untouched whether or not a gradient is supplied; a trainable parameter
/// without a gradient is an error. Gradients are consumed by the step.
pub trait Optimizer<T: Scalar> {
    fn step(&mut self, params: &mut [Parameter<T>], grads: Vec<Option<Tensor<T>>>) -> Result<()>;
    fn lr(&self) -> f64;
    fn set_lr(&mut self, lr: f64);
    fn kind(&self) -> OptimizerKind;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd_momentum",
        }
    }

    pub fn build<T: Scalar>(self, lr: f64) -> Box<dyn Optimizer<T>> {
        match self {
            OptimizerKind::Adam => Box::new(Adam::new(lr)),
            OptimizerKind::SgdMomentum => Box::new(SgdMomentum::new(lr)),
        }
    }
}

fn check_grads<T: Scalar>(params: &[Parameter<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        match g {
            None if p.trainable => {
                return Err(Error::InvalidArgument(format!("missing gradient for trainable {}", p.name)))
            }
            Some(g) if g.shape() != p.tensor.shape() => {
                return Err(Error::shape(
                    "optimizer",
                    format!("{}: gradient {:?} vs parameter {:?}", p.name, g.shape(), p.tensor.shape()),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// Number of steps taken.
    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut [Parameter<T>], grads: Vec<Option<Tensor<T>>>) -> Result<()> {
        check_grads(params, &grads)?;
        if self.moments.len() != params.len() {
            self.moments = (0..params.len()).map(|_| None).collect();
        }
        self.t += 1;
        let t = self.t as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            let (m, v) = slot.get_or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn kind(&self) -> OptimizerKind {
        OptimizerKind::Adam
    }
}

/// SGD with heavy-ball momentum: `v = mu v + g; w -= lr v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(lr: f64) -> Self {
        SgdMomentum {
            lr,
            momentum: 0.9,
            velocity: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for SgdMomentum<T> {
    fn step(&mut self, params: &mut [Parameter<T>], grads: Vec<Option<Tensor<T>>>) -> Result<()> {
        check_grads(params, &grads)?;
        if self.velocity.len() != params.len() {
            self.velocity = (0..params.len()).map(|_| None).collect();
        }
        let mu = T::from_f64_lossy(self.momentum);
        let lr = T::from_f64_lossy(self.lr);
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            let v = slot.get_or_insert_with(|| vec![T::zero(); g.len()]);
            for ((w, &gi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = mu * *vi + gi;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn kind(&self) -> OptimizerKind {
        OptimizerKind::SgdMomentum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn param(values: &[f64], trainable: bool) -> Parameter<f64> {
        Parameter {
            name: "w".into(),
            tensor: Tensor::new(&[values.len()], values.to_vec()).unwrap(),
            trainable,
        }
    }

    fn grad(values: &[f64]) -> Option<Tensor<f64>> {
        Some(Tensor::new(&[values.len()], values.to_vec()).unwrap())
    }

    #[test]
    fn first_adam_step_hand_trace() {
        // m_hat = 1, v_hat = 1 after bias correction: w = -lr / (1 + eps).
        let mut params = vec![param(&[0.0], true)];
        let mut adam = Adam::new(1e-3);
        adam.step(&mut params, vec![grad(&[1.0])]).unwrap();
        let w = params[0].tensor.data()[0];
        assert!((w + 0.001).abs() < 1e-10, "{w}");
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![param(&[0.5, -2.0], true)];
        let mut adam = Adam::new(1e-3);
        adam.step(&mut params, vec![grad(&[0.0, 0.0])]).unwrap();
        assert_eq!(params[0].tensor.data(), &[0.5, -2.0]);
    }

    #[test]
    fn frozen_parameters_are_bitwise_unchanged() {
        for kind in [OptimizerKind::Adam, OptimizerKind::SgdMomentum] {
            let mut params = vec![param(&[0.25, -1.0], false), param(&[1.0], true)];
            let mut opt = kind.build::<f64>(0.1);
            for _ in 0..5 {
                opt.step(&mut params, vec![grad(&[3.0, -4.0]), grad(&[1.0])]).unwrap();
            }
            assert_eq!(params[0].tensor.data()[0].to_bits(), 0.25f64.to_bits());
            assert_eq!(params[0].tensor.data()[1].to_bits(), (-1.0f64).to_bits());
            assert_ne!(params[1].tensor.data()[0], 1.0);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = vec![param(&[0.0], true)];
        assert!(Adam::new(1e-3).step(&mut params, vec![None]).is_err());
        let mut frozen = vec![param(&[0.0], false)];
        assert!(Adam::new(1e-3).step(&mut frozen, vec![None]).is_ok());
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut params = vec![param(&[0.0], true)];
        let mut sgd = SgdMomentum::new(0.1);
        sgd.step(&mut params, vec![grad(&[1.0])]).unwrap();
        sgd.step(&mut params, vec![grad(&[1.0])]).unwrap();
        // v1 = 1, v2 = 1.9 -> w = -0.1 - 0.19
        assert!((params[0].tensor.data()[0] + 0.29).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn adam_update_is_linear_in_lr(g in -10.0f64..10.0, lr in 1e-5f64..1e-1, scale in prop::sample::select(vec![0.25f64, 0.5, 2.0, 4.0])) {
            let run = |lr: f64| {
                let mut params = vec![param(&[0.0], true)];
                let mut adam = Adam::new(lr);
                adam.step(&mut params, vec![grad(&[g])]).unwrap();
                params[0].tensor.data()[0]
            };
            // Power-of-two scales from a zero start are exact.
            prop_assert_eq!(run(lr * scale), scale * run(lr));
        }
    }
}
