use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use emorec::model::ArchId;
use emorec::optim::{OptimizerKind, PlateauConfig};

#[derive(Parser, Debug)]
#[command(name = "emorec", version, about = "Train, fine-tune and evaluate facial expression classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from scratch and write a checkpoint plus history CSV.
    Train(TrainArgs),
    /// Continue training a checkpoint on new data.
    Finetune(FinetuneArgs),
    /// Write a classification report for a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Classify a single PGM/PPM image.
    Predict(PredictArgs),
    /// Print an architecture table with parameter counts.
    Inspect(InspectArgs),
    /// Run the finite-difference gradient check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    Cnn,
    Mvgg16,
}

impl From<Arch> for ArchId {
    fn from(a: Arch) -> Self {
        match a {
            Arch::Cnn => ArchId::BaselineCnn,
            Arch::Mvgg16 => ArchId::ModifiedVgg16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    FerCsv,
    ImageDir,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Optim {
    Adam,
    Sgd,
}

impl From<Optim> for OptimizerKind {
    fn from(o: Optim) -> Self {
        match o {
            Optim::Adam => OptimizerKind::Adam,
            Optim::Sgd => OptimizerKind::SgdMomentum,
        }
    }
}

/// Which FER-CSV rows to evaluate on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// FER2013-style CSV file or a directory of per-class image folders.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::FerCsv)]
    pub format: Format,
    /// Validation directory for image-dir data; FER-CSV uses its PublicTest
    /// rows. Without validation data the training set is used.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// `source=target` lines mapping folder names to class names or `skip`.
    #[arg(long)]
    pub label_map: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SchedulerArgs {
    #[arg(long, default_value_t = PlateauConfig::default().factor)]
    pub lr_factor: f64,
    #[arg(long, default_value_t = PlateauConfig::default().patience)]
    pub lr_patience: usize,
    #[arg(long, default_value_t = PlateauConfig::default().threshold)]
    pub lr_threshold: f64,
    #[arg(long, default_value_t = PlateauConfig::default().min_lr)]
    pub min_lr: f64,
}

impl SchedulerArgs {
    pub fn config(&self) -> PlateauConfig {
        PlateauConfig {
            factor: self.lr_factor,
            patience: self.lr_patience,
            threshold: self.lr_threshold,
            min_lr: self.min_lr,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Arch::Mvgg16)]
    pub arch: Arch,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = Optim::Adam)]
    pub optimizer: Optim,
    #[command(flatten)]
    pub scheduler: SchedulerArgs,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
    #[arg(long, default_value = "history.csv")]
    pub history: PathBuf,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Freeze every convolutional block.
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub freeze_backbone: bool,
    /// Reinitialise the final dense layer with this many outputs.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub replace_head: Option<u64>,
    #[arg(long, default_value_t = emorec::transfer::DEFAULT_FINETUNE_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[arg(long, value_enum, default_value_t = Optim::Adam)]
    pub optimizer: Optim,
    #[command(flatten)]
    pub scheduler: SchedulerArgs,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value = "finetuned.ckpt")]
    pub out: PathBuf,
    #[arg(long, default_value = "finetune_history.csv")]
    pub history: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::FerCsv)]
    pub format: Format,
    /// FER-CSV rows to use; ignored for image directories.
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    #[arg(long)]
    pub label_map: Option<PathBuf>,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Binary PGM (P5) or PPM (P6) image of any size.
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["arch", "ckpt"])))]
pub struct InspectArgs {
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Output classes when inspecting an architecture.
    #[arg(long, default_value_t = 7, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Also check a full model on a 2-sample batch.
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}
