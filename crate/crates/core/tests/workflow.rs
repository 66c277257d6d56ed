//! End-to-end flows through the public API: training, checkpoints,
//! fine-tuning and directory loading.

use std::fs;

use emorec::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, TrainingMetadata};
use emorec::data::{class_names, load_image_dir, write_pgm, LabelMap, Split};
use emorec::model::{ArchId, Model};
use emorec::optim::{fit, Adam, FitConfig, PlateauConfig, PlateauScheduler, TrainHistory};
use emorec::synthetic::{block_patterns, PatternTask};
use emorec::transfer::{finetune, FinetuneConfig, FreezePolicy};
use emorec::{Rng, Tensor};

fn train_once(seed: u64) -> (Model<f32>, TrainHistory) {
    let data = block_patterns(PatternTask::Quadrants, 2, seed);
    let mut model = Model::build(ArchId::BaselineCnn, 7, seed).unwrap();
    let mut opt = Adam::new(1e-3);
    let mut sched = PlateauScheduler::new(PlateauConfig::default()).unwrap();
    let history = fit(&mut model, &mut opt, &mut sched, &data, None, FitConfig::new(2, 4, seed)).unwrap();
    (model, history)
}

#[test]
fn training_is_bitwise_reproducible() {
    let (m1, h1) = train_once(11);
    let (m2, h2) = train_once(11);
    assert_eq!(h1.to_csv(), h2.to_csv());
    for (a, b) in h1.records.iter().zip(&h2.records) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
    }
    for (a, b) in m1.params.iter().zip(&m2.params) {
        assert!(a.tensor.bit_eq(&b.tensor), "{}", a.name);
    }
    let (m3, _) = train_once(12);
    assert!(!m1.params[0].tensor.bit_eq(&m3.params[0].tensor));
}

#[test]
fn saved_model_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::<f32>::build(ArchId::ModifiedVgg16, 7, 5).unwrap();
    let mut meta = CheckpointMeta::new(
        class_names(),
        TrainingMetadata {
            epochs_trained: 3,
            final_lr: 2.5e-4,
            master_seed: 5,
            ..Default::default()
        },
    );
    meta.extra.insert("note".into(), serde_json::json!({"nested": [1, 2]}));
    save_checkpoint(&model, &meta, &path).unwrap();
    let (loaded, loaded_meta) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded_meta, meta);
    let mut rng = Rng::new(1);
    let probe = Tensor::from_fn(&[3, 1, 48, 48], |_| rng.uniform() as f32);
    assert!(model.forward(&probe).unwrap().bit_eq(&loaded.forward(&probe).unwrap()));
}

#[test]
fn file_finetune_keeps_frozen_tensors_and_records_config() {
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = (dir.path().join("src.ckpt"), dir.path().join("dst.ckpt"));
    let model = Model::<f32>::build(ArchId::BaselineCnn, 7, 2).unwrap();
    save_checkpoint(&model, &CheckpointMeta::new(class_names(), TrainingMetadata::default()), &src).unwrap();

    let target = block_patterns(PatternTask::JitteredQuadrants, 2, 2);
    let config = FinetuneConfig::new(2, 8, 2);
    let history = finetune(&src, &dst, &target, None, &config).unwrap();
    assert_eq!(history.len(), 2);

    let (tuned, meta) = load_checkpoint::<f32>(&dst).unwrap();
    for (a, b) in model.params.iter().zip(&tuned.params) {
        let frozen = FreezePolicy::backbone().freezes(&a.name);
        assert_eq!(a.tensor.bit_eq(&b.tensor), frozen, "{}", a.name);
    }
    assert_eq!(meta.training.epochs_trained, 2);
    assert_eq!(meta.extra["finetune"]["lr"], 1e-4);
    assert_eq!(meta.extra["finetune"]["freeze_prefixes"][0], "block");

    let all = FinetuneConfig {
        freeze: FreezePolicy {
            prefixes: vec!["block".into(), "fc".into()],
        },
        ..FinetuneConfig::new(1, 8, 2)
    };
    finetune(&src, &dst, &target, None, &all).unwrap();
    let (unchanged, _) = load_checkpoint::<f32>(&dst).unwrap();
    for (a, b) in model.params.iter().zip(&unchanged.params) {
        assert!(a.tensor.bit_eq(&b.tensor), "{}", a.name);
    }
}

#[test]
fn directory_loading_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for (class, shade) in [("happy", 200u8), ("sad", 40), ("angry", 120)] {
        let sub = dir.path().join(class);
        fs::create_dir(&sub).unwrap();
        for i in 0..3u8 {
            let pixels: Vec<u8> = (0..64).map(|j| shade.wrapping_add(i * 3 + j)).collect();
            fs::write(sub.join(format!("{i}.pgm")), write_pgm(8, 8, &pixels)).unwrap();
        }
    }
    let map = LabelMap::identity();
    let a = load_image_dir(dir.path(), &map, Split::Train).unwrap();
    let b = load_image_dir(dir.path(), &map, Split::Train).unwrap();
    assert!(a.failures.is_empty());
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.dataset.labels(), vec![0, 0, 0, 3, 3, 3, 4, 4, 4]);
    for s in &a.dataset.samples {
        assert_eq!(s.image.shape(), &[1, 48, 48]);
    }
}
