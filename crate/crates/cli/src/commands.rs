use std::fmt::Display;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use emorec::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, TrainingMetadata};
use emorec::data::{
    load_image_dir, prepare_image, read_fer_csv, Dataset, LabelMap, Split,
};
use emorec::gradcheck::{architecture_gradcheck, operator_suite, GradcheckResult, TOLERANCE};
use emorec::metrics::{evaluate as evaluate_model, predictive_entropy};
use emorec::model::{ArchId, Model, ModelSpec};
use emorec::optim::{fit, Adam, FitConfig, OptimizerKind, PlateauScheduler, SgdMomentum, TrainHistory};
use emorec::transfer::{finetune_model, FinetuneConfig, FreezePolicy};
use serde_json::json;

use crate::args::{
    DataArgs, EvaluateArgs, FinetuneArgs, Format, GradcheckArgs, InspectArgs, PredictArgs, SplitArg, TrainArgs,
};
use crate::{Failure, EXIT_NUMERIC};

type CmdResult = Result<(), Failure>;

/// Prints `key: value` lines under a `config` heading.
struct ConfigEcho(Vec<(&'static str, String)>);

impl ConfigEcho {
    fn new(command: &str) -> Self {
        ConfigEcho(vec![("command", command.to_string())])
    }

    fn set(&mut self, key: &'static str, value: impl Display) -> &mut Self {
        self.0.push((key, value.to_string()));
        self
    }

    fn path(&mut self, key: &'static str, value: Option<&Path>) -> &mut Self {
        let shown = value.map_or_else(|| "none".to_string(), |p| p.display().to_string());
        self.set(key, shown)
    }

    fn print(&self) {
        println!("config:");
        for (k, v) in &self.0 {
            println!("  {k} = {v}");
        }
    }
}

fn check_threads(threads: usize) -> CmdResult {
    if threads != 1 {
        return Err(Failure::usage(format!(
            "--threads {threads} is not supported; computation is single-threaded (use --threads 1)"
        )));
    }
    Ok(())
}

fn format_name(f: Format) -> &'static str {
    match f {
        Format::FerCsv => "fer-csv",
        Format::ImageDir => "image-dir",
    }
}

fn label_map(path: Option<&Path>) -> Result<LabelMap, Failure> {
    Ok(match path {
        Some(p) => LabelMap::load(p)?,
        None => LabelMap::identity(),
    })
}

fn load_dir(root: &Path, map: &LabelMap, split: Split) -> Result<Dataset, Failure> {
    let loaded = load_image_dir(root, map, split)?;
    for f in &loaded.failures {
        eprintln!("warning: skipped {}: {}", f.path.display(), f.error);
    }
    Ok(loaded.dataset)
}

/// Training data plus optional validation data.
fn load_training_data(args: &DataArgs) -> Result<(Dataset, Option<Dataset>), Failure> {
    match args.format {
        Format::FerCsv => {
            if args.val_data.is_some() {
                return Err(Failure::usage("--val-data applies to image-dir data; FER-CSV validates on PublicTest rows"));
            }
            if args.label_map.is_some() {
                return Err(Failure::usage("--label-map applies to image-dir data"));
            }
            let splits = read_fer_csv(&args.data)?;
            if splits.train.is_empty() {
                return Err(Failure::data(format!("{}: no Training rows", args.data.display())));
            }
            let val = (!splits.val.is_empty()).then_some(splits.val);
            Ok((splits.train, val))
        }
        Format::ImageDir => {
            let map = label_map(args.label_map.as_deref())?;
            let train = load_dir(&args.data, &map, Split::Train)?;
            let val = match &args.val_data {
                Some(p) => Some(load_dir(p, &map, Split::Val)?),
                None => None,
            };
            Ok((train, val))
        }
    }
}

fn merge(parts: Vec<Dataset>) -> Result<Dataset, Failure> {
    let names = parts[0].class_names.clone();
    let samples: Vec<_> = parts.into_iter().flat_map(|d| d.samples).collect();
    if samples.is_empty() {
        return Err(emorec::Error::NoSamples.into());
    }
    Ok(Dataset::new(samples, names, Split::Test)?)
}

fn write_history(history: &TrainHistory, path: &Path) -> CmdResult {
    let file = File::create(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    history.write_csv(BufWriter::new(file))?;
    Ok(())
}

fn print_history(history: &TrainHistory, total_epochs: usize) {
    for r in &history.records {
        println!(
            "epoch {}/{}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}  lr {:e}",
            r.epoch, total_epochs, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr
        );
    }
}

fn numeric_guard(history: &TrainHistory) -> CmdResult {
    match history.records.last() {
        Some(r) if !(r.train_loss.is_finite() && r.val_loss.is_finite()) => Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("non-finite loss at epoch {}", r.epoch),
        }),
        _ => Ok(()),
    }
}

fn echo_optimizer(echo: &mut ConfigEcho, kind: OptimizerKind, lr: f64) {
    echo.set("optimizer", kind.as_str()).set("lr", lr);
    match kind {
        OptimizerKind::Adam => {
            let a = Adam::<f32>::new(lr);
            echo.set("adam_beta1", a.beta1).set("adam_beta2", a.beta2).set("adam_eps", a.eps);
        }
        OptimizerKind::SgdMomentum => {
            echo.set("momentum", SgdMomentum::<f32>::new(lr).momentum);
        }
    }
}

fn echo_data(echo: &mut ConfigEcho, data: &DataArgs) {
    echo.path("data", Some(&data.data))
        .set("format", format_name(data.format))
        .path("val_data", data.val_data.as_deref())
        .path("label_map", data.label_map.as_deref());
}

pub fn train(args: TrainArgs) -> CmdResult {
    check_threads(args.threads)?;
    let arch = ArchId::from(args.arch);
    let kind = OptimizerKind::from(args.optimizer);
    let plateau = args.scheduler.config();
    let (epochs, batch) = (args.epochs as usize, args.batch as usize);

    let mut echo = ConfigEcho::new("train");
    echo.set("arch", arch);
    echo_data(&mut echo, &args.data);
    echo.set("epochs", epochs).set("batch", batch);
    echo_optimizer(&mut echo, kind, args.lr);
    echo.set("lr_factor", plateau.factor)
        .set("lr_patience", plateau.patience)
        .set("lr_threshold", plateau.threshold)
        .set("min_lr", plateau.min_lr)
        .set("seed", args.seed)
        .set("threads", args.threads)
        .path("out", Some(&args.out))
        .path("history", Some(&args.history));
    echo.print();

    let (train, val) = load_training_data(&args.data)?;
    if val.is_none() {
        println!("note: no validation data; validating on the training set");
    }
    let mut model = Model::<f32>::build(arch, train.num_classes(), args.seed)?;
    let mut optimizer = kind.build::<f32>(args.lr);
    let mut scheduler = PlateauScheduler::new(plateau)?;
    let history = fit(
        &mut model,
        optimizer.as_mut(),
        &mut scheduler,
        &train,
        val.as_ref(),
        FitConfig::new(epochs, batch, args.seed),
    )?;
    print_history(&history, epochs);
    numeric_guard(&history)?;

    let mut meta = CheckpointMeta::new(
        train.class_names.clone(),
        TrainingMetadata {
            epochs_trained: epochs,
            final_lr: optimizer.lr(),
            master_seed: args.seed,
            ..Default::default()
        },
    );
    meta.extra.insert(
        "train".into(),
        json!({
            "optimizer": kind.as_str(),
            "lr": args.lr,
            "batch": batch,
            "plateau": plateau,
            "train_samples": train.len(),
        }),
    );
    save_checkpoint(&model, &meta, &args.out)?;
    write_history(&history, &args.history)?;
    println!("wrote {} and {}", args.out.display(), args.history.display());
    Ok(())
}

pub fn finetune(args: FinetuneArgs) -> CmdResult {
    check_threads(args.threads)?;
    let kind = OptimizerKind::from(args.optimizer);
    let config = FinetuneConfig {
        replace_head: args.replace_head.map(|k| k as usize),
        freeze: if args.freeze_backbone {
            FreezePolicy::backbone()
        } else {
            FreezePolicy::none()
        },
        epochs: args.epochs as usize,
        batch_size: args.batch as usize,
        lr: args.lr,
        optimizer: kind,
        plateau: args.scheduler.config(),
        seed: args.seed,
    };

    let mut echo = ConfigEcho::new("finetune");
    echo.path("ckpt", Some(&args.ckpt));
    echo_data(&mut echo, &args.data);
    echo.set("freeze_backbone", args.freeze_backbone)
        .set("replace_head", config.replace_head.map_or("none".to_string(), |k| k.to_string()))
        .set("epochs", config.epochs)
        .set("batch", config.batch_size);
    echo_optimizer(&mut echo, kind, config.lr);
    echo.set("lr_factor", config.plateau.factor)
        .set("lr_patience", config.plateau.patience)
        .set("lr_threshold", config.plateau.threshold)
        .set("min_lr", config.plateau.min_lr)
        .set("seed", config.seed)
        .set("threads", args.threads)
        .path("out", Some(&args.out))
        .path("history", Some(&args.history));
    echo.print();

    let (mut model, meta) = load_checkpoint::<f32>(&args.ckpt)?;
    let (train, val) = load_training_data(&args.data)?;
    if val.is_none() {
        println!("note: no validation data; validating on the training set");
    }
    let (meta, history) = finetune_model(&mut model, &meta, &train, val.as_ref(), &config)?;
    print_history(&history, config.epochs);
    numeric_guard(&history)?;
    save_checkpoint(&model, &meta, &args.out)?;
    write_history(&history, &args.history)?;
    println!("wrote {} and {}", args.out.display(), args.history.display());
    Ok(())
}

fn load_eval_data(args: &EvaluateArgs) -> Result<Dataset, Failure> {
    match args.format {
        Format::FerCsv => {
            let splits = read_fer_csv(&args.data)?;
            let parts = match args.split {
                SplitArg::Train => vec![splits.train],
                SplitArg::Val => vec![splits.val],
                SplitArg::Test => vec![splits.test],
                SplitArg::All => vec![splits.train, splits.val, splits.test],
            };
            merge(parts)
        }
        Format::ImageDir => load_dir(&args.data, &label_map(args.label_map.as_deref())?, Split::Test),
    }
}

pub fn evaluate(args: EvaluateArgs) -> CmdResult {
    check_threads(args.threads)?;
    let mut echo = ConfigEcho::new("evaluate");
    echo.path("ckpt", Some(&args.ckpt))
        .path("data", Some(&args.data))
        .set("format", format_name(args.format))
        .set("split", format!("{:?}", args.split).to_lowercase())
        .path("label_map", args.label_map.as_deref())
        .set("batch", args.batch)
        .set("threads", args.threads)
        .path("report", Some(&args.report));
    echo.print();

    let (model, _) = load_checkpoint::<f32>(&args.ckpt)?;
    let data = load_eval_data(&args)?;
    let report = evaluate_model(&model, &data, args.batch as usize)?;
    let text = serde_json::to_string_pretty(&report).expect("report serialises");
    fs::write(&args.report, text + "\n").map_err(|e| Failure::data(format!("{}: {e}", args.report.display())))?;
    print!("{}", report.summary());
    println!("wrote {}", args.report.display());
    Ok(())
}

pub fn predict(args: PredictArgs) -> CmdResult {
    let (model, meta) = load_checkpoint::<f32>(&args.ckpt)?;
    let bytes = fs::read(&args.image).map_err(|e| Failure::data(format!("{}: {e}", args.image.display())))?;
    let image = prepare_image(&bytes).map_err(|e| Failure::from(e.in_file(&args.image)))?;
    let batch = image.reshape(&[1, 1, 48, 48])?;
    let probs = model.predict_proba(&batch)?;
    let entropy = predictive_entropy(&probs)?;
    let row = probs.data();
    let best = emorec::ops::argmax(row);
    println!("class: {}", meta.class_names[best]);
    println!("probabilities:");
    for (name, p) in meta.class_names.iter().zip(row) {
        println!("  {name:<10} {p:.6}");
    }
    println!("entropy: {entropy:.6}");
    Ok(())
}

pub fn inspect(args: InspectArgs) -> CmdResult {
    let spec = match (&args.arch, &args.ckpt) {
        (Some(arch), None) => ModelSpec::new(ArchId::from(*arch), args.classes as usize)?,
        (None, Some(path)) => {
            let (model, meta) = load_checkpoint::<f32>(path)?;
            println!("checkpoint: {}", path.display());
            println!("classes: {}", meta.class_names.join(", "));
            println!(
                "epochs trained: {}  final lr: {:e}  seed: {}",
                meta.training.epochs_trained, meta.training.final_lr, meta.training.master_seed
            );
            let frozen = model.params.iter().filter(|p| !p.trainable).count();
            if frozen > 0 {
                println!("frozen parameter tensors: {frozen}");
            }
            model.spec
        }
        _ => return Err(Failure::usage("pass exactly one of --arch or --ckpt")),
    };
    print!("{}", spec.summary_table()?);
    Ok(())
}

fn print_results(results: &[GradcheckResult]) -> bool {
    let mut ok = true;
    for r in results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        println!("{:<28} {:>5} coords  max rel err {:.3e}  {status}", r.name, r.coordinates, r.max_rel_error);
    }
    ok
}

pub fn gradcheck(args: GradcheckArgs) -> CmdResult {
    let mut echo = ConfigEcho::new("gradcheck");
    echo.set("epsilon", emorec::gradcheck::DEFAULT_EPSILON)
        .set("tolerance", TOLERANCE)
        .set("arch", args.arch.map_or("none".to_string(), |a| ArchId::from(a).to_string()))
        .set("seed", args.seed);
    echo.print();
    let mut ok = print_results(&operator_suite()?);
    if let Some(arch) = args.arch {
        ok &= print_results(&architecture_gradcheck(ArchId::from(arch), args.seed)?);
    }
    if ok {
        println!("all gradients within {TOLERANCE:e}");
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("gradient check exceeded relative error {TOLERANCE:e}"),
        })
    }
}

