//! Training loop, learning-rate schedule and the run configuration.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::metrics::Metrics;
use crate::model::{DanModel, ModelConfig};
use crate::tensor::{Adam, Tensor};

/// Linear decay for the first phase, then halving each epoch, then flat.
///
/// With `epochs_per_phase = s > 1` every schedule epoch lasts `s` training
/// epochs, which stretches the same curve over a longer run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub decrement: f64,
    pub halving: f64,
    pub linear_until: usize,
    pub halve_until: usize,
    pub epochs_per_phase: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 1e-3,
            decrement: 1e-4,
            halving: 0.5,
            linear_until: 7,
            halve_until: 12,
            epochs_per_phase: 1,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.decrement >= 0.0 && self.halving > 0.0) {
            return Err(Error::config("schedule needs base > 0, decrement >= 0, halving > 0"));
        }
        if self.linear_until < 1 || self.halve_until < self.linear_until || self.epochs_per_phase < 1 {
            return Err(Error::config("schedule needs 1 <= linear_until <= halve_until and epochs_per_phase >= 1"));
        }
        if self.base - self.decrement * (self.linear_until - 1) as f64 <= 0.0 {
            return Err(Error::config("schedule decays to a non-positive learning rate"));
        }
        Ok(())
    }

    /// Learning rate of 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch < 1 {
            return Err(Error::usage("epochs are 1-based"));
        }
        let e = ((epoch - 1) / self.epochs_per_phase + 1).min(self.halve_until);
        let linear = |e: usize| {
            if self.decrement == 0.0 {
                return self.base;
            }
            // (n - k) / (n / base) keeps decimal steps such as 4e-4 exact.
            let n = (self.base / self.decrement).round();
            (n - (e - 1) as f64) / (n / self.base)
        };
        if e <= self.linear_until {
            Ok(linear(e))
        } else {
            let k = (e - self.linear_until) as i32;
            Ok(linear(self.linear_until) * self.halving.powi(k))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    /// Save `epoch-NNN/` every this many epochs; 0 keeps only `best/` and `last/`.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 12,
            batch_size: 8,
            seed: 0,
            schedule: LrSchedule::default(),
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<Metrics>,
}

pub const LOG_HEADER: [&str; 9] = [
    "epoch",
    "lr",
    "train_loss",
    "val_mrr",
    "val_r1",
    "val_r5",
    "val_r10",
    "val_mean_rank",
    "val_ndcg",
];

impl EpochLog {
    fn record(&self) -> Vec<String> {
        let opt = |f: fn(&Metrics) -> Option<f64>| self.val.as_ref().and_then(f).map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.epoch.to_string(),
            self.lr.to_string(),
            self.train_loss.to_string(),
            opt(|m| Some(m.mrr)),
            opt(|m| Some(m.r1)),
            opt(|m| Some(m.r5)),
            opt(|m| Some(m.r10)),
            opt(|m| Some(m.mean_rank)),
            opt(|m| m.ndcg),
        ]
    }
}

pub struct TrainOutcome {
    pub model: DanModel,
    pub log: Vec<EpochLog>,
    /// Epoch of the best validation MRR, if there was a validation split.
    pub best_epoch: Option<usize>,
}

fn with_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("epoch {epoch} step {step}: {op}"),
        },
        other => other,
    }
}

/// One pass of Adam over `train`, batch by batch. Dialog gradients are
/// computed in parallel and summed in batch order, so results do not depend
/// on the thread count. Returns the mean round loss.
fn run_epoch(
    model: &mut DanModel,
    adam: &mut Adam,
    train: &Dataset,
    order: &[usize],
    batch_size: usize,
    lr: f64,
    epoch: usize,
) -> Result<f64> {
    let dialogs = &train.dialogs.dialogs;
    let mut total_loss = 0.0;
    let mut total_rounds = 0usize;
    for (step, batch) in order.chunks(batch_size).enumerate() {
        let step = step + 1;
        let frozen = &*model;
        let results = batch
            .par_iter()
            .map(|&i| frozen.dialog_gradients(train, &dialogs[i]))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| with_context(e, epoch, step))?;
        let rounds: usize = batch.iter().map(|&i| dialogs[i].rounds.len()).sum();
        let mut sum: Vec<Vec<f64>> = model.params.iter().map(|(_, _, p)| vec![0.0; p.numel()]).collect();
        let mut loss = 0.0;
        for (l, grads) in &results {
            loss += l;
            for (acc, g) in sum.iter_mut().zip(grads) {
                for (a, &x) in acc.iter_mut().zip(g.data()) {
                    *a += x as f64;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                op: format!("epoch {epoch} step {step}: training loss"),
            });
        }
        let scale = 1.0 / rounds as f64;
        let grads = model
            .params
            .iter()
            .zip(sum)
            .map(|((_, _, p), acc)| Tensor::new(p.shape().to_vec(), acc.into_iter().map(|a| (a * scale) as f32).collect()))
            .collect::<Result<Vec<_>>>()?;
        adam.step(&mut model.params, &grads, lr).map_err(|e| with_context(e, epoch, step))?;
        total_loss += loss;
        total_rounds += rounds;
    }
    Ok(total_loss / total_rounds as f64)
}

/// Trains a fresh model. With `out`, writes `config.json`, `train_log.csv`
/// and checkpoints beneath it.
pub fn train(config: &TrainConfig, train: &Dataset, val: Option<&Dataset>, out: Option<&Path>) -> Result<TrainOutcome> {
    train_with(config, train, val, out, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    config: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.dialogs.dialogs.is_empty() {
        return Err(Error::usage("training split has no dialogs"));
    }
    if train.features.feature_dim != config.model.feature_dim {
        return Err(Error::config(format!(
            "model feature_dim {} but the data has {}",
            config.model.feature_dim, train.features.feature_dim
        )));
    }
    let mut model = DanModel::new(config.model.clone(), train.dialogs.vocabulary.clone(), config.seed)?;
    let mut adam = Adam::new(&model.params);
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4521);
    let mut order: Vec<usize> = (0..train.dialogs.dialogs.len()).collect();

    let mut writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("config.json");
            let mut text = serde_json::to_string_pretty(config).map_err(|e| Error::json(&path, e))?;
            text.push('\n');
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::Writer::from_path(dir.join("train_log.csv"))?;
            w.write_record(LOG_HEADER)?;
            w.flush().map_err(|e| Error::io(dir.join("train_log.csv"), e))?;
            Some(w)
        }
        None => None,
    };

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64)> = None;
    for epoch in 1..=config.epochs {
        let lr = config.schedule.lr_at(epoch)?;
        order.shuffle(&mut shuffle);
        let train_loss = run_epoch(&mut model, &mut adam, train, &order, config.batch_size, lr, epoch)?;
        let val_metrics = match val {
            Some(v) => Some(evaluate(&model, v)?.report.overall),
            None => None,
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss,
            val: val_metrics,
        };
        let improved = match (&entry.val, best) {
            (Some(m), None) => Some(m.mrr),
            (Some(m), Some((_, b))) if m.mrr > b => Some(m.mrr),
            _ => None,
        };
        if let Some(mrr) = improved {
            best = Some((epoch, mrr));
        }
        if let (Some(dir), Some(w)) = (out, writer.as_mut()) {
            w.write_record(entry.record())?;
            w.flush().map_err(|e| Error::io(dir.join("train_log.csv"), e))?;
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                model.save(&dir.join(format!("epoch-{epoch:03}")))?;
            }
            if improved.is_some() {
                model.save(&dir.join("best"))?;
            }
        }
        on_epoch(&entry);
        log.push(entry);
    }
    if let Some(dir) = out {
        model.save(&dir.join("last"))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.map(|(e, _)| e),
    })
}
