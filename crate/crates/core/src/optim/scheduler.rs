use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    /// Absolute improvement a new loss must beat the best by.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 3,
            threshold: 1e-4,
            min_lr: 1e-6,
        }
    }
}

/// Reduce-on-plateau learning-rate schedule driven by validation loss.
///
/// A loss improves when it is below `best - threshold`. After `patience`
/// consecutive non-improving epochs the rate is multiplied by `factor`,
/// floored at `min_lr`, and the counter restarts.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig) -> Result<Self> {
        if !(config.factor > 0.0 && config.factor < 1.0) {
            return Err(Error::InvalidArgument(format!("plateau factor {} outside (0, 1)", config.factor)));
        }
        if config.patience == 0 {
            return Err(Error::InvalidArgument("plateau patience must be at least 1".into()));
        }
        if config.threshold.is_nan() || config.threshold < 0.0 || config.min_lr.is_nan() || config.min_lr < 0.0 {
            return Err(Error::InvalidArgument("plateau threshold and min_lr must be non-negative".into()));
        }
        Ok(PlateauScheduler {
            config,
            best: f64::INFINITY,
            wait: 0,
        })
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn wait(&self) -> usize {
        self.wait
    }

    /// Records one epoch's validation loss and returns the learning rate to
    /// use next.
    pub fn step(&mut self, val_loss: f64, lr: f64) -> Result<f64> {
        if !val_loss.is_finite() {
            return Err(Error::non_finite("validation loss"));
        }
        if val_loss < self.best - self.config.threshold {
            self.best = val_loss;
            self.wait = 0;
            return Ok(lr);
        }
        self.wait += 1;
        if self.wait < self.config.patience {
            return Ok(lr);
        }
        self.wait = 0;
        Ok(if lr > self.config.min_lr {
            (lr * self.config.factor).max(self.config.min_lr)
        } else {
            lr
        })
    }
}
