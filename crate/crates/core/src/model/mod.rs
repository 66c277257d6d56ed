//! The baseline CNN and modified VGG16 architectures.

mod spec;

pub use spec::{ArchId, LayerKind, LayerSpec, LayerSummary, ModelSpec, INPUT_SHAPE, NUM_CLASSES};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, Mode};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Frozen parameters receive neither gradients nor optimizer updates.
    pub trainable: bool,
}

/// Layer specification together with its parameters in layer order
/// (weight, then bias, for every conv and dense layer).
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: Vec<Parameter<T>>,
}

/// Seed and step label for train-mode dropout masks.
///
/// Each dropout layer draws from the stream
/// `dropout:{layer name}:{step}` under `seed`.
#[derive(Clone, Debug)]
pub struct DropoutStreams {
    pub seed: u64,
    pub step: String,
}

impl DropoutStreams {
    pub fn new(seed: u64, step: impl Into<String>) -> Self {
        DropoutStreams { seed, step: step.into() }
    }

    pub fn for_layer(&self, layer: &str) -> Rng {
        Rng::stream(self.seed, &format!("dropout:{layer}:{}", self.step))
    }
}

/// Result of a recorded forward pass.
pub struct TrainForward {
    pub logits: Var,
    /// Tape variable of every parameter, aligned with `Model::params`.
    pub params: Vec<Var>,
}

/// He-normal tensor (std `sqrt(2 / fan_in)`) drawn from `rng`.
pub(crate) fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.normal() * std))
}

fn fan_in(kind: &LayerKind) -> usize {
    match *kind {
        LayerKind::Conv3x3 { in_channels, .. } => in_channels * ops::KERNEL * ops::KERNEL,
        LayerKind::Dense { in_features, .. } => in_features,
        _ => 0,
    }
}

pub(crate) fn init_layer<T: Scalar>(layer: &LayerSpec, rng: &mut Rng) -> Option<[Parameter<T>; 2]> {
    let (wname, bname) = layer.param_names()?;
    let (wshape, bshape) = layer.kind.param_shapes()?;
    let wshape: &[usize] = match layer.kind {
        LayerKind::Dense { .. } => &wshape[..2],
        _ => &wshape,
    };
    Some([
        Parameter {
            name: wname,
            tensor: he_normal(wshape, fan_in(&layer.kind), rng),
            trainable: true,
        },
        Parameter {
            name: bname,
            tensor: Tensor::zeros(&[bshape]),
            trainable: true,
        },
    ])
}

/// Baseline VGG16-style CNN with He-normal weights from stream `"init"`.
pub fn build_baseline_cnn<T: Scalar>(num_classes: usize, seed: u64) -> Result<Model<T>> {
    Model::build(ArchId::BaselineCnn, num_classes, seed)
}

/// Modified VGG16 with He-normal weights from stream `"init"`.
pub fn build_modified_vgg16<T: Scalar>(num_classes: usize, seed: u64) -> Result<Model<T>> {
    Model::build(ArchId::ModifiedVgg16, num_classes, seed)
}

impl<T: Scalar> Model<T> {
    pub fn build(arch: ArchId, num_classes: usize, seed: u64) -> Result<Self> {
        let spec = ModelSpec::new(arch, num_classes)?;
        let mut rng = Rng::stream(seed, "init");
        let params = spec
            .layers
            .iter()
            .filter_map(|l| init_layer(l, &mut rng))
            .flatten()
            .collect();
        Ok(Model { spec, params })
    }

    /// Assembles a model from existing parameters, checking names and shapes
    /// against the specification.
    pub fn from_parts(spec: ModelSpec, params: Vec<Parameter<T>>) -> Result<Self> {
        let layout = spec.param_layout();
        if layout.len() != params.len() {
            return Err(Error::shape(
                "model",
                format!("expected {} parameters, got {}", layout.len(), params.len()),
            ));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || shape[..] != *p.tensor.shape() {
                return Err(Error::shape(
                    "model",
                    format!("expected {name} {shape:?}, got {} {:?}", p.name, p.tensor.shape()),
                ));
            }
        }
        Ok(Model { spec, params })
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(Error::shape(
                "forward",
                format!("expected [N, {:?}], got {shape:?}", self.spec.input_shape),
            ));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass producing `[N, num_classes]` logits.
    /// Dropout is the identity and nothing is recorded.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(images.shape())?;
        let mut x = images.clone();
        let mut params = self.params.iter();
        for layer in &self.spec.layers {
            let labelled = |e: Error| relabel(e, &layer.name);
            x = match &layer.kind {
                LayerKind::Conv3x3 { .. } => {
                    let (w, b) = (params.next().expect("weight"), params.next().expect("bias"));
                    ops::conv2d(&x, &w.tensor, &b.tensor).map_err(labelled)?
                }
                LayerKind::Dense { .. } => {
                    let (w, b) = (params.next().expect("weight"), params.next().expect("bias"));
                    ops::dense(&x, &w.tensor, &b.tensor).map_err(labelled)?
                }
                LayerKind::Relu => ops::relu(&x),
                LayerKind::MaxPool2x2 => ops::maxpool2d(&x).map_err(labelled)?.0,
                LayerKind::Flatten => {
                    let n = x.shape()[0];
                    let rest = x.len() / n;
                    x.reshape(&[n, rest])?
                }
                LayerKind::Dropout { .. } => x,
                LayerKind::Softmax => break,
            };
        }
        Ok(x)
    }

    /// Forward pass in the given mode; train mode applies dropout drawn from
    /// `streams` but records nothing.
    pub fn forward_mode(&self, images: &Tensor<T>, mode: Mode, streams: &DropoutStreams) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => self.forward(images),
            Mode::Train => {
                let mut tape = Tape::new();
                let x = tape.leaf(images.clone(), false);
                let fwd = self.forward_train(&mut tape, x, streams)?;
                Ok(tape.value(fwd.logits).clone())
            }
        }
    }

    /// Train-mode forward pass recorded on `tape`. Frozen parameters are
    /// recorded as constants.
    pub fn forward_train<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        images: Var,
        streams: &DropoutStreams,
    ) -> Result<TrainForward> {
        self.check_input(tape.value(images).shape())?;
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.param(&p.tensor, p.trainable))
            .collect();
        let mut next = param_vars.iter().copied();
        let mut x = images;
        for layer in &self.spec.layers {
            let labelled = |e: Error| relabel(e, &layer.name);
            x = match &layer.kind {
                LayerKind::Conv3x3 { .. } => {
                    let (w, b) = (next.next().expect("weight"), next.next().expect("bias"));
                    tape.conv2d(x, w, b).map_err(labelled)?
                }
                LayerKind::Dense { .. } => {
                    let (w, b) = (next.next().expect("weight"), next.next().expect("bias"));
                    tape.dense(x, w, b).map_err(labelled)?
                }
                LayerKind::Relu => tape.relu(x),
                LayerKind::MaxPool2x2 => tape.maxpool2d(x).map_err(labelled)?,
                LayerKind::Flatten => tape.flatten(x)?,
                LayerKind::Dropout { rate } => {
                    let mut rng = streams.for_layer(&layer.name);
                    tape.dropout(x, *rate, &mut rng)?
                }
                LayerKind::Softmax => break,
            };
        }
        Ok(TrainForward {
            logits: x,
            params: param_vars,
        })
    }

    /// Eval-mode class probabilities.
    pub fn predict_proba(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        ops::softmax(&self.forward(images)?)
    }
}

fn relabel(err: Error, layer: &str) -> Error {
    match err {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("layer {layer} ({context})"),
        },
        other => other,
    }
}
