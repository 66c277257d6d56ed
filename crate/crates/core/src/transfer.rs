//! Backbone freezing, head replacement and fine-tuning of saved models.

use std::path::Path;

use serde_json::{json, Value};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, TrainingMetadata};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{init_layer, Model, ModelSpec};
use crate::optim::{fit, FitConfig, OptimizerKind, PlateauConfig, PlateauScheduler, TrainHistory};
use crate::rng::Rng;
use crate::scalar::Scalar;

pub const DEFAULT_FINETUNE_LR: f64 = 1e-4;

/// Parameters whose name starts with any of `prefixes` are frozen; all
/// others are trainable.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezePolicy {
    pub prefixes: Vec<String>,
}

impl FreezePolicy {
    pub fn none() -> Self {
        FreezePolicy::default()
    }

    /// Every convolutional block.
    pub fn backbone() -> Self {
        FreezePolicy {
            prefixes: vec!["block".into()],
        }
    }

    pub fn freezes(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Sets every parameter's trainable flag from `policy`. A prefix that
/// matches no parameter is an error.
pub fn apply_freeze<T: Scalar>(model: &mut Model<T>, policy: &FreezePolicy) -> Result<()> {
    if let Some(p) = policy
        .prefixes
        .iter()
        .find(|p| !model.params.iter().any(|q| q.name.starts_with(p.as_str())))
    {
        return Err(Error::InvalidArgument(format!("freeze prefix {p:?} matches no parameter")));
    }
    for param in &mut model.params {
        param.trainable = !policy.freezes(&param.name);
    }
    Ok(())
}

/// Rebuilds the final dense layer with `num_classes` outputs, He-initialised
/// from stream `"head-init"`. Every other parameter is kept as is.
pub fn replace_head<T: Scalar>(model: &mut Model<T>, num_classes: usize, seed: u64) -> Result<()> {
    let spec = ModelSpec::new(model.spec.arch_id, num_classes)?;
    let head = &spec.layers[spec.head_index()];
    let [w, b] = init_layer(head, &mut Rng::stream(seed, "head-init")).expect("dense head has parameters");
    let mut params = std::mem::take(&mut model.params);
    let n = params.len();
    params[n - 2] = w;
    params[n - 1] = b;
    *model = Model::from_parts(spec, params)?;
    Ok(())
}

/// Extends or truncates class names to `k` entries, naming new ones `class{i}`.
fn resize_class_names(names: &[String], k: usize) -> Vec<String> {
    (0..k)
        .map(|i| names.get(i).cloned().unwrap_or_else(|| format!("class{i}")))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub replace_head: Option<usize>,
    pub freeze: FreezePolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub plateau: PlateauConfig,
    pub seed: u64,
}

impl FinetuneConfig {
    /// Backbone frozen, head kept, Adam at 1e-4.
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        FinetuneConfig {
            replace_head: None,
            freeze: FreezePolicy::backbone(),
            epochs,
            batch_size,
            lr: DEFAULT_FINETUNE_LR,
            optimizer: OptimizerKind::Adam,
            plateau: PlateauConfig::default(),
            seed,
        }
    }

    fn to_json(&self) -> Value {
        json!({
            "replace_head": self.replace_head,
            "freeze_prefixes": self.freeze.prefixes,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "optimizer": self.optimizer.as_str(),
            "seed": self.seed,
        })
    }
}

/// Fine-tunes an in-memory model. The returned metadata carries the
/// cumulative epoch count and the fine-tune configuration under the
/// `finetune` key.
pub fn finetune_model<T: Scalar>(
    model: &mut Model<T>,
    meta: &CheckpointMeta,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &FinetuneConfig,
) -> Result<(CheckpointMeta, TrainHistory)> {
    if config.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be at least 1".into()));
    }
    let mut class_names = meta.class_names.clone();
    if let Some(k) = config.replace_head {
        replace_head(model, k, config.seed)?;
        class_names = resize_class_names(&class_names, k);
    }
    for ds in std::iter::once(train).chain(val) {
        if ds.num_classes() != model.spec.num_classes {
            return Err(Error::ClassCount {
                model: model.spec.num_classes,
                data: ds.num_classes(),
            });
        }
    }
    apply_freeze(model, &config.freeze)?;
    let mut optimizer = config.optimizer.build::<T>(config.lr);
    let mut scheduler = PlateauScheduler::new(config.plateau)?;
    let fit_config = FitConfig::new(config.epochs, config.batch_size, config.seed);
    let history = fit(model, optimizer.as_mut(), &mut scheduler, train, val, fit_config)?;

    let mut out = meta.clone();
    out.class_names = class_names;
    out.training = TrainingMetadata {
        epochs_trained: meta.training.epochs_trained + config.epochs,
        final_lr: optimizer.lr(),
        master_seed: config.seed,
        extra: meta.training.extra.clone(),
    };
    out.extra.insert("finetune".into(), config.to_json());
    Ok((out, history))
}

/// Loads `checkpoint`, fine-tunes it and saves the result to `out`.
pub fn finetune(
    checkpoint: &Path,
    out: &Path,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &FinetuneConfig,
) -> Result<TrainHistory> {
    let (mut model, meta) = load_checkpoint::<f32>(checkpoint)?;
    let (meta, history) = finetune_model(&mut model, &meta, train, val, config)?;
    save_checkpoint(&model, &meta, out)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchId;
    use crate::synthetic::{block_patterns, PatternTask};

    fn baseline() -> Model<f32> {
        Model::build(ArchId::BaselineCnn, 7, 3).unwrap()
    }

    #[test]
    fn backbone_policy_leaves_dense_stage_trainable() {
        let mut m = baseline();
        apply_freeze(&mut m, &FreezePolicy::backbone()).unwrap();
        let trainable: Vec<&str> = m.params.iter().filter(|p| p.trainable).map(|p| p.name.as_str()).collect();
        assert_eq!(trainable, ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "fc3.weight", "fc3.bias"]);
    }

    #[test]
    fn empty_policy_unfreezes_everything() {
        let mut m = baseline();
        apply_freeze(&mut m, &FreezePolicy::backbone()).unwrap();
        apply_freeze(&mut m, &FreezePolicy::none()).unwrap();
        assert!(m.params.iter().all(|p| p.trainable));
    }

    #[test]
    fn unmatched_prefix_is_rejected() {
        let policy = FreezePolicy {
            prefixes: vec!["blok".into()],
        };
        assert!(apply_freeze(&mut baseline(), &policy).is_err());
    }

    #[test]
    fn replace_head_touches_only_the_head() {
        for (arch, fan_in, head) in [(ArchId::BaselineCnn, 4096, "fc3"), (ArchId::ModifiedVgg16, 2048, "fc4")] {
            let mut original = Model::<f32>::build(arch, 7, 1).unwrap();
            // A trained head has non-zero biases.
            let last = original.params.len() - 1;
            original.params[last].tensor = original.params[last].tensor.map(|_| 0.5);
            let mut same = original.clone();
            replace_head(&mut same, 7, 9).unwrap();
            let changed: Vec<&str> = original
                .params
                .iter()
                .zip(&same.params)
                .filter(|(a, b)| !a.tensor.bit_eq(&b.tensor))
                .map(|(a, _)| a.name.as_str())
                .collect();
            assert_eq!(changed, [format!("{head}.weight"), format!("{head}.bias")]);

            let mut wider = original.clone();
            replace_head(&mut wider, 8, 9).unwrap();
            assert_eq!(wider.param(&format!("{head}.weight")).unwrap().tensor.shape(), &[fan_in, 8]);
            let probs = wider.predict_proba(&crate::tensor::Tensor::full(&[2, 1, 48, 48], 0.5)).unwrap();
            for row in probs.data().chunks(8) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn finetune_validates_inputs() {
        let ds = block_patterns(PatternTask::Quadrants, 1, 0);
        let meta = CheckpointMeta::new(crate::data::class_names(), TrainingMetadata::default());
        let mut config = FinetuneConfig::new(0, 4, 1);
        assert!(finetune_model(&mut baseline(), &meta, &ds, None, &config).is_err());
        config.epochs = 1;
        config.replace_head = Some(8);
        assert!(matches!(
            finetune_model(&mut baseline(), &meta, &ds, None, &config),
            Err(Error::ClassCount { model: 8, data: 7 })
        ));
    }
}
