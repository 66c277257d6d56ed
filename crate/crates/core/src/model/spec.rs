//! Declarative layer lists for the two architectures.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::KERNEL;

/// Grayscale 48x48 input, channel first.
pub const INPUT_SHAPE: [usize; 3] = [1, 48, 48];

/// Number of emotion classes in the canonical label scheme.
pub const NUM_CLASSES: usize = 7;

const CHANNEL_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

/// Model family identifier, stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    /// VGG16-derived baseline: 13 convolutions, 3 dense layers, dropout 0.5.
    BaselineCnn,
    /// Deeper variant: 16 convolutions, 4 dense layers, dropout 0.25.
    ModifiedVgg16,
}

impl ArchId {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::BaselineCnn => "baseline_cnn",
            ArchId::ModifiedVgg16 => "modified_vgg16",
        }
    }

    /// Convolutions per block.
    pub fn block_depths(self) -> [usize; 5] {
        match self {
            ArchId::BaselineCnn => [2, 2, 3, 3, 3],
            ArchId::ModifiedVgg16 => [3, 3, 4, 3, 3],
        }
    }

    /// Hidden dense widths before the classifier.
    pub fn hidden_widths(self) -> &'static [usize] {
        match self {
            ArchId::BaselineCnn => &[4096, 4096],
            ArchId::ModifiedVgg16 => &[4096, 4096, 2048],
        }
    }

    pub fn dropout_rate(self) -> f64 {
        match self {
            ArchId::BaselineCnn => 0.5,
            ArchId::ModifiedVgg16 => 0.25,
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline_cnn" | "cnn" => Ok(ArchId::BaselineCnn),
            "modified_vgg16" | "mvgg16" => Ok(ArchId::ModifiedVgg16),
            other => Err(Error::InvalidArgument(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv3x3 { in_channels: usize, out_channels: usize },
    Relu,
    MaxPool2x2,
    Flatten,
    Dense { in_features: usize, out_features: usize },
    Dropout { rate: f64 },
    Softmax,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv3x3 { .. } => "conv3x3",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2x2 => "maxpool2x2",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Weight and bias shapes for parameterised layers.
    pub fn param_shapes(&self) -> Option<([usize; 4], usize)> {
        match *self {
            LayerKind::Conv3x3 { in_channels, out_channels } => {
                Some(([out_channels, in_channels, KERNEL, KERNEL], out_channels))
            }
            LayerKind::Dense { in_features, out_features } => {
                Some(([in_features, out_features, 1, 1], out_features))
            }
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerKind::Conv3x3 { in_channels, out_channels } => {
                KERNEL * KERNEL * in_channels * out_channels + out_channels
            }
            LayerKind::Dense { in_features, out_features } => in_features * out_features + out_features,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { name: name.into(), kind }
    }

    /// Names of the weight and bias parameters, if any.
    pub fn param_names(&self) -> Option<(String, String)> {
        self.kind
            .param_shapes()
            .map(|_| (format!("{}.weight", self.name), format!("{}.bias", self.name)))
    }
}

/// Ordered layer list plus input and output geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub arch_id: ArchId,
    pub layers: Vec<LayerSpec>,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(arch_id: ArchId, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        let mut layers = Vec::new();
        let mut channels = INPUT_SHAPE[0];
        for (b, (&depth, &width)) in arch_id.block_depths().iter().zip(&CHANNEL_WIDTHS).enumerate() {
            let block = b + 1;
            for i in 1..=depth {
                layers.push(LayerSpec::new(
                    format!("block{block}.conv{i}"),
                    LayerKind::Conv3x3 {
                        in_channels: channels,
                        out_channels: width,
                    },
                ));
                layers.push(LayerSpec::new(format!("block{block}.relu{i}"), LayerKind::Relu));
                channels = width;
            }
            layers.push(LayerSpec::new(format!("block{block}.pool"), LayerKind::MaxPool2x2));
        }
        layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
        let mut features = channels;
        let rate = arch_id.dropout_rate();
        for (i, &width) in arch_id.hidden_widths().iter().enumerate() {
            let name = format!("fc{}", i + 1);
            layers.push(LayerSpec::new(
                name.clone(),
                LayerKind::Dense {
                    in_features: features,
                    out_features: width,
                },
            ));
            layers.push(LayerSpec::new(format!("{name}.relu"), LayerKind::Relu));
            layers.push(LayerSpec::new(format!("{name}.dropout"), LayerKind::Dropout { rate }));
            features = width;
        }
        layers.push(LayerSpec::new(
            format!("fc{}", arch_id.hidden_widths().len() + 1),
            LayerKind::Dense {
                in_features: features,
                out_features: num_classes,
            },
        ));
        layers.push(LayerSpec::new("softmax", LayerKind::Softmax));
        let spec = ModelSpec {
            arch_id,
            layers,
            input_shape: INPUT_SHAPE,
            num_classes,
        };
        spec.infer_shapes()?;
        Ok(spec)
    }

    pub fn baseline_cnn(num_classes: usize) -> Result<Self> {
        Self::new(ArchId::BaselineCnn, num_classes)
    }

    pub fn modified_vgg16(num_classes: usize) -> Result<Self> {
        Self::new(ArchId::ModifiedVgg16, num_classes)
    }

    /// Per-sample output shape of every layer, checked end to end.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let bad = |detail: String| Error::shape("shape inference", format!("{}: {detail}", layer.name));
            shape = match (&layer.kind, &shape[..]) {
                (LayerKind::Conv3x3 { in_channels, out_channels }, &[c, h, w]) if c == *in_channels => {
                    vec![*out_channels, h, w]
                }
                (LayerKind::MaxPool2x2, &[c, h, w]) if h >= 2 && w >= 2 => vec![c, h / 2, w / 2],
                (LayerKind::Flatten, s) => vec![s.iter().product()],
                (LayerKind::Dense { in_features, out_features }, &[f]) if f == *in_features => {
                    vec![*out_features]
                }
                (LayerKind::Relu | LayerKind::Dropout { .. } | LayerKind::Softmax, s) => s.to_vec(),
                (kind, s) => return Err(bad(format!("{} cannot take input {s:?}", kind.label()))),
            };
            out.push(shape.clone());
        }
        if shape != [self.num_classes] {
            return Err(Error::shape(
                "shape inference",
                format!("output {shape:?} does not match {} classes", self.num_classes),
            ));
        }
        Ok(out)
    }

    pub fn count(&self, label: &str) -> usize {
        self.layers.iter().filter(|l| l.kind.label() == label).count()
    }

    pub fn conv_layers(&self) -> usize {
        self.count("conv3x3")
    }

    pub fn dense_layers(&self) -> usize {
        self.count("dense")
    }

    /// Output widths of the dense layers in order.
    pub fn dense_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Dense { out_features, .. } => Some(out_features),
                _ => None,
            })
            .collect()
    }

    pub fn dropout_rates(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Dropout { rate } => Some(rate),
                _ => None,
            })
            .collect()
    }

    /// Index of the classifier (last dense) layer.
    pub fn head_index(&self) -> usize {
        self.layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Dense { .. }))
            .expect("every architecture ends in a dense layer")
    }

    /// `(name, shape)` of every parameter in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let (Some((w, b)), Some((wshape, bshape))) = (layer.param_names(), layer.kind.param_shapes()) {
                let wshape = match layer.kind {
                    LayerKind::Dense { .. } => wshape[..2].to_vec(),
                    _ => wshape.to_vec(),
                };
                out.push((w, wshape));
                out.push((b, vec![bshape]));
            }
        }
        out
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.kind.param_count()).sum()
    }

    pub fn summary(&self) -> Result<Vec<LayerSummary>> {
        let shapes = self.infer_shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(shapes)
            .map(|(layer, output_shape)| LayerSummary {
                name: layer.name.clone(),
                kind: layer.kind.label(),
                output_shape,
                params: layer.kind.param_count(),
            })
            .collect())
    }

    /// Fixed-format architecture table: name, kind, output shape and
    /// parameter count per layer, then the total.
    pub fn summary_table(&self) -> Result<String> {
        use std::fmt::Write;
        let rows = self.summary()?;
        let mut s = String::new();
        writeln!(s, "architecture: {} ({} classes)", self.arch_id, self.num_classes).ok();
        writeln!(s, "{:<16} {:<11} {:<14} {:>12}", "layer", "kind", "output", "params").ok();
        for r in &rows {
            let shape = r.output_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            writeln!(s, "{:<16} {:<11} {:<14} {:>12}", r.name, r.kind, shape, r.params).ok();
        }
        writeln!(s, "{:<16} {:<11} {:<14} {:>12}", "total", "", "", self.total_params()).ok();
        writeln!(
            s,
            "conv layers: {}  dense layers: {}",
            self.conv_layers(),
            self.dense_layers()
        )
        .ok();
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSummary {
    pub name: String,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    pub params: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_layer_counts() {
        let spec = ModelSpec::baseline_cnn(7).unwrap();
        assert_eq!(spec.conv_layers(), 13);
        assert_eq!(spec.dense_layers(), 3);
        assert_eq!(spec.dense_widths(), vec![4096, 4096, 7]);
        assert_eq!(spec.dropout_rates(), vec![0.5, 0.5]);
    }

    #[test]
    fn modified_layer_counts() {
        let spec = ModelSpec::modified_vgg16(7).unwrap();
        assert_eq!(spec.conv_layers(), 16);
        assert_eq!(spec.dense_layers(), 4);
        assert_eq!(spec.dense_widths(), vec![4096, 4096, 2048, 7]);
        assert_eq!(spec.dropout_rates(), vec![0.25; 3]);
    }

    #[test]
    fn pooling_trace_and_flatten_width() {
        for arch in [ArchId::BaselineCnn, ArchId::ModifiedVgg16] {
            let spec = ModelSpec::new(arch, 7).unwrap();
            let shapes = spec.infer_shapes().unwrap();
            let pooled: Vec<usize> = spec
                .layers
                .iter()
                .zip(&shapes)
                .filter(|(l, _)| l.kind == LayerKind::MaxPool2x2)
                .map(|(_, s)| s[1])
                .collect();
            assert_eq!(pooled, vec![24, 12, 6, 3, 1]);
            let flat = spec.layers.iter().position(|l| l.kind == LayerKind::Flatten).unwrap();
            assert_eq!(shapes[flat], vec![512]);
        }
    }

    #[test]
    fn names_are_unique() {
        for arch in [ArchId::BaselineCnn, ArchId::ModifiedVgg16] {
            let spec = ModelSpec::new(arch, 7).unwrap();
            let mut names: Vec<&str> = spec.layers.iter().map(|l| l.name.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            assert_eq!(names.len(), spec.layers.len());
        }
    }

    #[test]
    fn parameter_counts() {
        let conv = LayerKind::Conv3x3 { in_channels: 1, out_channels: 64 };
        assert_eq!(conv.param_count(), 3 * 3 * 64 + 64);
        assert_eq!(conv.param_count(), 640);
        let dense = LayerKind::Dense { in_features: 512, out_features: 4096 };
        assert_eq!(dense.param_count(), 2_101_248);

        let modified = ModelSpec::modified_vgg16(7).unwrap();
        let dense_stage: usize = modified
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Dense { .. }))
            .map(|l| l.kind.param_count())
            .sum();
        assert_eq!(
            dense_stage,
            (512 * 4096 + 4096) + (4096 * 4096 + 4096) + (4096 * 2048 + 2048) + (2048 * 7 + 7)
        );
        let baseline = ModelSpec::baseline_cnn(7).unwrap();
        assert!(modified.total_params() > baseline.total_params());
    }

    #[test]
    fn rejects_single_class() {
        assert!(ModelSpec::baseline_cnn(1).is_err());
    }

    #[test]
    fn arch_names_round_trip() {
        for arch in [ArchId::BaselineCnn, ArchId::ModifiedVgg16] {
            assert_eq!(arch.as_str().parse::<ArchId>().unwrap(), arch);
        }
        assert_eq!("mvgg16".parse::<ArchId>().unwrap(), ArchId::ModifiedVgg16);
        assert!("resnet".parse::<ArchId>().is_err());
    }

    #[test]
    fn summary_table_lists_every_layer() {
        let spec = ModelSpec::baseline_cnn(7).unwrap();
        let table = spec.summary_table().unwrap();
        let kind_count = |k: &str| table.lines().filter(|l| l.split_whitespace().nth(1) == Some(k)).count();
        assert_eq!(kind_count("conv3x3"), 13);
        assert_eq!(kind_count("dense"), 3);
        assert!(table.ends_with("conv layers: 13  dense layers: 3\n"));
        assert!(table.contains("block1.conv1"));
    }
}
