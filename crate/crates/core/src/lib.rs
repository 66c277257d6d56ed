//! Facial expression recognition micro-framework.
//!
//! The crate bundles everything needed to train and evaluate the two
//! VGG-style emotion classifiers on 48x48 grayscale faces:
//!
//! * [`tensor`], [`autograd`] and [`ops`]: dense tensors with a recording tape
//!   for reverse-mode differentiation of the operator set the models use.
//! * [`model`]: the baseline VGG16-style CNN and the modified VGG16.
//! * [`optim`]: Adam / SGD with momentum, plateau learning-rate scheduling and
//!   the training loop.
//! * [`data`]: FER2013 CSV and PGM/PPM image-directory ingestion.
//! * [`metrics`]: confusion matrices, weighted precision/recall/F1 and
//!   predictive entropy.
//! * [`checkpoint`] and [`transfer`]: the binary checkpoint format and the
//!   freeze / replace-head / fine-tune workflow.
//!
//! Numerical code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checking); the aliases below name the common instantiations.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensor used for training and inference.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor used by the gradient checker.
pub type Tensor64 = Tensor<f64>;
/// Single-precision model.
pub type Model32 = model::Model<f32>;
/// Double-precision model.
pub type Model64 = model::Model<f64>;
/// Recording tape over `f32` values.
pub type Tape32<'a> = autograd::Tape<'a, f32>;
/// Recording tape over `f64` values.
pub type Tape64<'a> = autograd::Tape<'a, f64>;
