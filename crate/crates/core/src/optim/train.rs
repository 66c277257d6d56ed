use std::io::Write;

use super::{Optimizer, PlateauScheduler};
use crate::autograd::Tape;
use crate::data::{batch_indices, stack, Dataset};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{DropoutStreams, Model};
use crate::ops;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// Sample-weighted mean training loss.
    pub loss: f64,
    /// Fraction of samples whose train-mode prediction was correct.
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

/// Six significant digits in plain or scientific notation.
fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    // Exponent after rounding to six significant digits, as printf's %g does.
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim(format!("{v:.decimals$}"))
    } else {
        format!("{}e{exp}", trim(mantissa.to_string()))
    }
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with header [`HISTORY_HEADER`] and one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                sig6(r.train_loss),
                sig6(r.train_acc),
                sig6(r.val_loss),
                sig6(r.val_acc),
                sig6(r.lr)
            ));
        }
        out
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        out.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// One pass over `dataset` in shuffled batches.
///
/// The order comes from stream `shuffle:epoch:{epoch}`; dropout masks from
/// `dropout:{layer}:epoch:{epoch}:batch:{b}`. Trailing partial batches are
/// trained on.
pub fn train_epoch<T: Scalar, O: Optimizer<T> + ?Sized>(
    model: &mut Model<T>,
    optimizer: &mut O,
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<EpochStats> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let k = model.spec.num_classes;
    let mut shuffle = Rng::stream(seed, &format!("shuffle:epoch:{epoch}"));
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (b, indices) in batch_indices(dataset.len(), batch_size, Some(&mut shuffle)).iter().enumerate() {
        let batch = stack(dataset, indices);
        if let Some(&l) = batch.labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {l} outside the model's {k} classes")));
        }
        let streams = DropoutStreams::new(seed, format!("epoch:{epoch}:batch:{b}"));
        let (loss, hits, grads) = {
            let mut tape = Tape::new();
            let x = tape.leaf(batch.images.cast::<T>(), false);
            let fwd = model.forward_train(&mut tape, x, &streams)?;
            let (loss, probs) = tape.softmax_cross_entropy(fwd.logits, &batch.labels)?;
            let hits = probs
                .data()
                .chunks_exact(k)
                .zip(&batch.labels)
                .filter(|(row, &l)| ops::argmax(row) == l)
                .count();
            let value = tape.value(loss).data()[0].as_f64();
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Option<Tensor<T>>> = fwd.params.iter().map(|&v| grads.take(v)).collect();
            (value, hits, grads)
        };
        if let Some(g) = grads.iter().flatten().find(|g| !g.all_finite()) {
            return Err(Error::non_finite(format!("gradient of shape {:?}", g.shape())));
        }
        optimizer.step(&mut model.params, grads)?;
        loss_sum += loss * indices.len() as f64;
        correct += hits;
    }
    Ok(EpochStats {
        loss: loss_sum / dataset.len() as f64,
        accuracy: correct as f64 / dataset.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epoch index of the first epoch; stream labels continue from it.
    pub first_epoch: usize,
}

impl FitConfig {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        FitConfig {
            epochs,
            batch_size,
            seed,
            first_epoch: 0,
        }
    }
}

/// Trains for `config.epochs` epochs; after each epoch the model is
/// evaluated on `val` (or on `train` when no validation set is given), the
/// scheduler sees the validation loss, and a history record is appended.
/// The final parameters are kept.
pub fn fit<T: Scalar, O: Optimizer<T> + ?Sized>(
    model: &mut Model<T>,
    optimizer: &mut O,
    scheduler: &mut PlateauScheduler,
    train: &Dataset,
    val: Option<&Dataset>,
    config: FitConfig,
) -> Result<TrainHistory> {
    fit_with(model, optimizer, scheduler, train, val, config, |_, _| Ok(()))
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with<T: Scalar, O: Optimizer<T> + ?Sized>(
    model: &mut Model<T>,
    optimizer: &mut O,
    scheduler: &mut PlateauScheduler,
    train: &Dataset,
    val: Option<&Dataset>,
    config: FitConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model<T>) -> Result<()>,
) -> Result<TrainHistory> {
    if config.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be at least 1".into()));
    }
    let val = val.unwrap_or(train);
    let mut history = TrainHistory::default();
    for i in 0..config.epochs {
        let epoch = config.first_epoch + i;
        let lr = optimizer.lr();
        let stats = train_epoch(model, optimizer, train, config.batch_size, config.seed, epoch)?;
        let report = evaluate(model, val, config.batch_size)?;
        let next_lr = scheduler.step(report.mean_loss, lr)?;
        optimizer.set_lr(next_lr);
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            val_loss: report.mean_loss,
            val_acc: report.accuracy,
            lr,
        };
        on_epoch(&record, model)?;
        history.records.push(record);
    }
    Ok(history)
}

/// Trains epoch by epoch until the evaluation-mode accuracy on `dataset`
/// itself reaches 1.0. Returns the number of epochs taken, or `None` when
/// `max_epochs` pass without memorising the set.
pub fn epochs_until_memorized<T: Scalar, O: Optimizer<T> + ?Sized>(
    model: &mut Model<T>,
    optimizer: &mut O,
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    max_epochs: usize,
) -> Result<Option<usize>> {
    for epoch in 0..max_epochs {
        train_epoch(model, optimizer, dataset, batch_size, seed, epoch)?;
        if evaluate(model, dataset, dataset.len())?.accuracy == 1.0 {
            return Ok(Some(epoch + 1));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(1.945910149), "1.94591");
        assert_eq!(sig6(0.001), "0.001");
        assert_eq!(sig6(0.0005), "0.0005");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(1234567.0), "1.23457e6");
        assert_eq!(sig6(999999.7), "1e6");
        assert_eq!(sig6(0.000001), "1e-6");
        assert_eq!(sig6(0.0001), "0.0001");
        assert_eq!(sig6(0.6620449), "0.662045");
    }

    #[test]
    fn csv_layout() {
        let history = TrainHistory {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 1.5,
                train_acc: 0.25,
                val_loss: 1.25,
                val_acc: 0.5,
                lr: 0.001,
            }],
        };
        assert_eq!(history.to_csv(), format!("{HISTORY_HEADER}\n1,1.5,0.25,1.25,0.5,0.001\n"));
    }
}
