//! Mini-batch SGD training and top-1 evaluation.

use std::fmt;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::checkpoint::save_checkpoint;
use crate::model::{Model, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_BATCH_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::config(format!("unknown precision {s:?} (expected f32 or f64)"))),
        }
    }
}

/// Stop once an epoch reaches both accuracies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStop {
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub early_stop: Option<EarlyStop>,
    /// Written whenever validation accuracy improves.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 200,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: DEFAULT_SEED,
            precision: Precision::F32,
            early_stop: None,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// Accuracy of the predictions made during the epoch, before each update.
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,loss,train_acc,val_acc";

    pub fn csv_row(r: &EpochRecord) -> String {
        format!("{},{:.9},{:.6},{:.6}", r.epoch, r.loss, r.train_acc, r.val_acc)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{}", Self::csv_row(r));
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Highest validation accuracy and its epoch; earliest wins ties.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_acc >= r.val_acc => Some(b),
                _ => Some(r),
            })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub history: History,
    /// Parameters at the best validation epoch.
    pub best: ParamStore<T>,
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per row of `[B, K]` logits.
pub fn predictions<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.dims()[logits.rank() - 1];
    logits.data().chunks(k).map(argmax).collect()
}

const EVAL_BATCH: usize = 64;

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset) -> Result<f64> {
    data.check_geometry(model.config())?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        correct += count_correct(model, data, chunk)?;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// As [`evaluate`], spreading batches over `threads` workers. Counts are reduced in
/// batch order, so the result equals the sequential one.
pub fn evaluate_parallel<T: Real>(model: &Model<T>, data: &Dataset, threads: usize) -> Result<f64> {
    data.check_geometry(model.config())?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(EVAL_BATCH).collect();
    let per_thread = chunks.len().div_ceil(threads.max(1));
    let counts: Vec<Result<usize>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per_thread.max(1))
            .map(|group| {
                s.spawn(move || {
                    group
                        .iter()
                        .map(|c| count_correct(model, data, c))
                        .sum::<Result<usize>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let correct = counts.into_iter().sum::<Result<usize>>()?;
    Ok(correct as f64 / data.len() as f64)
}

fn count_correct<T: Real>(model: &Model<T>, data: &Dataset, indices: &[usize]) -> Result<usize> {
    let (x, y) = data.batch::<T>(indices)?;
    let pred = predictions(&model.logits(&x)?);
    Ok(pred.iter().zip(&y).filter(|(p, y)| p == y).count())
}

/// Train `model` in place with plain SGD on mean cross-entropy.
///
/// Each epoch visits `train` in an order drawn from a generator seeded once with
/// `tc.seed`. `on_epoch` sees every record as soon as it is produced.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    val: &Dataset,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    tc.validate()?;
    train.check_geometry(model.config())?;
    val.check_geometry(model.config())?;
    if tc.batch_size > train.len() {
        return Err(Error::config(format!(
            "batch_size {} exceeds the {} training samples",
            tc.batch_size,
            train.len()
        )));
    }
    let lr = T::lit(tc.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    let mut best = model.params().clone();
    let mut best_val = f64::NEG_INFINITY;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (step, chunk) in order.chunks(tc.batch_size).enumerate() {
            let (x, y) = train.batch::<T>(chunk)?;
            let (loss, logits) = model.loss_and_grads(&x, &y)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: step + 1,
                    value: loss,
                });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += predictions(&logits).iter().zip(&y).filter(|(p, y)| p == y).count();
            model.params_mut().sgd_step(lr);
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc: evaluate(model, val)?,
        };
        on_epoch(&record);
        history.records.push(record);
        if record.val_acc > best_val {
            best_val = record.val_acc;
            best = model.params().clone();
            if let Some(path) = &tc.checkpoint {
                save_checkpoint(&best, path)?;
            }
        }
        if let Some(stop) = tc.early_stop {
            if record.train_acc >= stop.train_acc && record.val_acc >= stop.val_acc {
                break;
            }
        }
    }
    Ok(TrainOutcome { history, best })
}
