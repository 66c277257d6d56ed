//! Dataset ingestion and batching.
//!
//! Images are normalised to a single 48x48 channel with values in `[0, 1]`
//! and labelled in the canonical seven-class emotion scheme.

mod batch;
mod fer_csv;
mod image_dir;
mod netpbm;
mod resize;

pub use batch::{batch_indices, make_batches, stack, Batch};
pub use fer_csv::{parse_fer_csv, read_fer_csv, write_fer_csv, FerSplits, FER_PIXELS};
pub use image_dir::{load_image_dir, prepare_image, LabelMap, LabelTarget, LoadFailure, LoadedDir};
pub use netpbm::{decode_grayscale, parse_pgm, parse_ppm, to_grayscale, write_pgm, write_ppm};
pub use resize::resize_bilinear;

use crate::error::{Error, Result};
use crate::model::INPUT_SHAPE;
use crate::tensor::Tensor;

/// Canonical class order, index = label.
pub const CLASS_NAMES: [&str; 7] = ["angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"];

/// Side length of preprocessed images.
pub const IMAGE_SIZE: usize = 48;

pub fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&c| c == name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Preprocessed image `[1, 48, 48]` with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
}

impl Sample {
    /// Validates the shape, the pixel range and the label.
    pub fn new(image: Tensor<f32>, label: usize, num_classes: usize) -> Result<Self> {
        if image.shape() != INPUT_SHAPE {
            return Err(Error::shape("sample", format!("{:?}", image.shape())));
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel {v} outside [0, 1]")));
        }
        if label >= num_classes {
            return Err(Error::InvalidArgument(format!("label {label} outside [0, {num_classes})")));
        }
        Ok(Sample { image, label })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, split: Split) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= class_names.len()) {
            return Err(Error::InvalidArgument(format!(
                "label {} has no class name among {}",
                s.label,
                class_names.len()
            )));
        }
        Ok(Dataset {
            samples,
            class_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}
