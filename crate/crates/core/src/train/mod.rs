//! Training regimen (Adam, step decay, per-epoch checkpoints, best-on-
//! validation selection) and the classification metrics suite.

pub mod adam;
pub mod checkpoint;
pub mod metrics;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use adam::{adam_update, AdamConfig, AdamState, StepDecay};
pub use checkpoint::{load_checkpoint, load_weights_into, save_checkpoint, Checkpoint};
pub use metrics::{f1_score, round2, MetricRow, MetricsReport};

use crate::data::loader::{assemble_batch, epoch_order};
use crate::data::{mix_seed, LoaderConfig, Normalization, PreparedSet};
use crate::error::{invalid, Error, Result};
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::nn::{cross_entropy, ParamStore};
use crate::tensor::{Scalar, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: StepDecay,
    pub adam: AdamConfig,
    pub augment: bool,
    pub max_rotation: f64,
    pub seed: u64,
    pub workers: usize,
    pub drop_last: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            schedule: StepDecay::default(),
            adam: AdamConfig::default(),
            augment: true,
            max_rotation: 10.0,
            seed: 42,
            workers: 1,
            drop_last: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be at least 1"));
        }
        if !(self.schedule.base >= 0.0) || !(self.schedule.factor > 0.0) {
            return Err(invalid!("learning-rate schedule must be non-negative: {:?}", self.schedule));
        }
        self.adam.validate()
    }

    fn loader(&self, normalization: Normalization, augment: bool) -> LoaderConfig {
        LoaderConfig {
            batch_size: self.batch_size,
            augment,
            max_rotation: self.max_rotation,
            normalization,
            workers: self.workers,
        }
    }
}

/// One row of the per-epoch log; `epoch` counts from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub const LOG_HEADER: &str = "epoch\tlr\ttrain_loss\ttrain_acc\tval_loss\tval_acc";

impl EpochLog {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.val_loss, self.val_acc
        )
    }

    pub(crate) fn parse_record(s: &str) -> Result<Self> {
        let f: Vec<&str> = s.split(',').collect();
        let bad = || Error::Format(format!("malformed log record {s:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let n = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(EpochLog {
            epoch: f[0].parse().map_err(|_| bad())?,
            lr: n(1)?,
            train_loss: n(2)?,
            train_acc: n(3)?,
            val_loss: n(4)?,
            val_acc: n(5)?,
        })
    }
}

pub fn render_log(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for l in log {
        let _ = writeln!(s, "{}", l.tsv());
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Best {
    pub val_acc: f64,
    pub epoch: usize,
}

#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub opt: AdamState<T>,
    /// Completed epochs.
    pub epoch: usize,
    /// Seed for initialization and all per-epoch streams.
    pub seed: u64,
    pub best: Option<Best>,
    pub log: Vec<EpochLog>,
    pub classes: Vec<String>,
    pub normalization: Normalization,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(
        config: &ModelConfig,
        train: &TrainConfig,
        classes: Vec<String>,
        normalization: Normalization,
    ) -> Result<Self> {
        if classes.len() != config.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model is configured for {}",
                classes.len(),
                config.num_classes
            )));
        }
        normalization.validate()?;
        let model = Model::build(config, train.seed)?;
        let opt = AdamState::new(&model.store, train.adam, train.schedule.lr(0))?;
        Ok(TrainState {
            model,
            opt,
            epoch: 0,
            seed: train.seed,
            best: None,
            log: Vec::new(),
            classes,
            normalization,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Seed of epoch `epoch` (0-based) for stream `tag`.
pub fn epoch_seed(seed: u64, epoch: usize, tag: u64) -> u64 {
    mix_seed(mix_seed(seed, tag), epoch as u64)
}

const SHUFFLE: u64 = 1;
const AUGMENT: u64 = 2;

/// One pass over `set`: seeded shuffle, then per batch augment, train-mode
/// forward, cross-entropy, backward and an Adam step.
pub fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut AdamState<T>,
    set: &PreparedSet,
    cfg: &TrainConfig,
    normalization: Normalization,
    epoch: usize,
    seed: u64,
) -> Result<EpochStats> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(invalid!("cannot train on an empty set"));
    }
    let order = epoch_order(set.len(), Some(epoch_seed(seed, epoch, SHUFFLE)));
    let loader = cfg.loader(normalization, cfg.augment);
    let aug_seed = epoch_seed(seed, epoch, AUGMENT);
    let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
    for idx in order.chunks(cfg.batch_size) {
        if cfg.drop_last && idx.len() < cfg.batch_size && seen > 0 {
            break;
        }
        let batch = assemble_batch::<T>(set, idx, &loader, aug_seed)?;
        let (grads, updates, loss, hits) = {
            let tape = Tape::new();
            let out = model.forward(&tape, tape.constant(batch.images), ForwardOptions::train())?;
            let logits = out.logits.value();
            let k = logits.shape()[1];
            let hits = logits
                .data()
                .chunks_exact(k)
                .zip(&batch.labels)
                .filter(|(row, &t)| argmax(row) == t)
                .count();
            let loss = cross_entropy(out.logits, &batch.labels)?;
            let grads = tape.backward(loss)?;
            (grads, out.updates, loss.value().item().as_f64(), hits)
        };
        model.store.zero_grads();
        model.store.accumulate_grads(&grads);
        drop(grads);
        model.store.apply_stat_updates(updates);
        opt.step(&mut model.store)?;
        loss_sum += loss * idx.len() as f64;
        correct += hits;
        seen += idx.len();
    }
    model.store.zero_grads();
    Ok(EpochStats {
        loss: loss_sum / seen as f64,
        accuracy: correct as f64 / seen as f64,
    })
}

/// Eval-mode predictions and the mean cross-entropy over `set`.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    set: &PreparedSet,
    batch_size: usize,
    normalization: Normalization,
    workers: usize,
) -> Result<(Vec<usize>, f64)> {
    if set.is_empty() {
        return Err(invalid!("cannot evaluate an empty set"));
    }
    let loader = LoaderConfig {
        batch_size: batch_size.max(1),
        augment: false,
        max_rotation: 0.0,
        normalization,
        workers,
    };
    let order = epoch_order(set.len(), None);
    let mut preds = Vec::with_capacity(set.len());
    let mut loss_sum = 0.0;
    for idx in order.chunks(loader.batch_size) {
        let batch = assemble_batch::<T>(set, idx, &loader, 0)?;
        let tape = Tape::new();
        let out = model.forward(&tape, tape.constant(batch.images), ForwardOptions::eval())?;
        let logits = out.logits.value();
        let k = logits.shape()[1];
        preds.extend(logits.data().chunks_exact(k).map(argmax));
        loss_sum += cross_entropy(out.logits, &batch.labels)?.value().item().as_f64() * idx.len() as f64;
    }
    Ok((preds, loss_sum / set.len() as f64))
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    set: &PreparedSet,
    batch_size: usize,
    normalization: Normalization,
    workers: usize,
) -> Result<(MetricsReport, f64)> {
    let (preds, loss) = predict(model, set, batch_size, normalization, workers)?;
    Ok((MetricsReport::from_predictions(&set.classes, &set.labels, &preds)?, loss))
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

pub const BEST_MARKER: &str = "best.txt";

#[derive(Clone, Debug)]
pub struct FitOutcome<T: Scalar> {
    pub state: TrainState<T>,
    /// Weights of the best validation epoch (the initial ones if none ran).
    pub best_store: ParamStore<T>,
}

/// Runs epochs `state.epoch..cfg.epochs`. With `ckpt_dir`, a checkpoint is
/// written after every epoch along with a marker naming the best epoch;
/// `log_path` receives the log, rewritten after each epoch.
pub fn fit<T: Scalar>(
    mut state: TrainState<T>,
    fit_set: &PreparedSet,
    val_set: &PreparedSet,
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
    log_path: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    if state.seed != cfg.seed {
        return Err(Error::Config(format!(
            "state was seeded with {}, run config says {}",
            state.seed, cfg.seed
        )));
    }
    let mut best_store = match (state.best, ckpt_dir) {
        (Some(b), Some(dir)) if b.epoch != state.epoch => {
            let mut m = state.model.clone();
            load_weights_into(&mut m, &checkpoint_path(dir, b.epoch))?;
            m.store
        }
        _ => state.model.store.clone(),
    };
    if let Some(dir) = ckpt_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let write_log = |log: &[EpochLog]| -> Result<()> {
        if let Some(p) = log_path {
            std::fs::write(p, render_log(log)).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    };
    for epoch in state.epoch..cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        state.opt.lr = lr;
        let stats = train_epoch(
            &mut state.model,
            &mut state.opt,
            fit_set,
            cfg,
            state.normalization,
            epoch,
            state.seed,
        )?;
        let (report, val_loss) = evaluate(&state.model, val_set, cfg.batch_size, state.normalization, cfg.workers)?;
        let row = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            val_loss,
            val_acc: report.accuracy,
        };
        state.log.push(row);
        state.epoch = epoch + 1;
        if state.best.is_none_or(|b| row.val_acc > b.val_acc) {
            state.best = Some(Best {
                val_acc: row.val_acc,
                epoch: epoch + 1,
            });
            best_store = state.model.store.clone();
        }
        on_epoch(&row);
        if let Some(dir) = ckpt_dir {
            let saved = save_checkpoint(&state, &checkpoint_path(dir, epoch + 1));
            if let Err(e) = saved {
                write_log(&state.log)?;
                return Err(e);
            }
            let best = state.best.expect("set above").epoch;
            let marker = dir.join(BEST_MARKER);
            std::fs::write(&marker, format!("epoch_{best:03}.ckpt\n"))
                .map_err(|e| Error::io(&marker, e))?;
        }
        write_log(&state.log)?;
    }
    Ok(FitOutcome { state, best_store })
}
