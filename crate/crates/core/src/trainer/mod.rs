//! Mini-batch training with Adam, plateau halving and early stopping on dev
//! exact-match accuracy.

mod adam;
mod schedule;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::autodiff::{Graph, ParamStore, RngStream};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_split, model_predictor, EvalReport, Metric, ResultTable};
use crate::model::{Model, ModelConfig};
use crate::taskgen::{Dataset, DatasetSplit, Vocabulary};

pub use adam::Adam;
pub use schedule::{PlateauSchedule, ScheduleEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_epochs: usize,
    pub lr_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 100,
            early_stop_patience: 50,
            plateau_epochs: 4,
            lr_decay: 0.5,
            clip_norm: 1.0,
            seed: 0,
            eval_batch_size: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::contract("batch sizes must be positive"));
        }
        if self.plateau_epochs >= self.early_stop_patience {
            return Err(Error::contract(format!(
                "plateau_epochs {} must be below early_stop_patience {}",
                self.plateau_epochs, self.early_stop_patience
            )));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.clip_norm < 0.0 {
            return Err(Error::contract("learning rate, decay and clip must be positive"));
        }
        Ok(())
    }
}

/// A sample as vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn encode_split(vocab: &Vocabulary, split: &DatasetSplit) -> Result<Vec<Encoded>> {
    split
        .samples
        .iter()
        .map(|s| {
            Ok(Encoded {
                source: vocab.encode(&s.source)?,
                target: vocab.encode(&s.target)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the batch losses.
    pub train_loss: f64,
    pub dev_accuracy: f64,
    /// Rate used during the epoch.
    pub lr: f64,
    pub clipped_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    pub stop_reason: StopReason,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Wall-clock seconds per epoch, kept apart from the deterministic report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub epoch_seconds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters of the best epoch.
    pub best: Model<f32>,
    pub report: TrainReport,
    pub timing: Timing,
}

fn training_stream(seed: u64) -> RngStream {
    RngStream::new(seed).split("train")
}

/// A freshly initialised model for `seed`.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model<f32>> {
    Model::new(config, &mut training_stream(seed).split("init"))
}

/// Percentage of dev samples decoded exactly.
pub fn accuracy(model: &Model<f32>, data: &[Encoded], batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let mut hits = 0;
    for chunk in data.chunks(batch_size) {
        let sources: Vec<Vec<usize>> = chunk.iter().map(|s| s.source.clone()).collect();
        let out = model.greedy_decode(&sources)?;
        hits += chunk.iter().zip(&out).filter(|(s, o)| &s.target == *o).count();
    }
    Ok(100.0 * hits as f64 / data.len() as f64)
}

fn numeric(err: Error, epoch: usize, step: usize) -> Error {
    if err.is_numeric() {
        Error::Training {
            epoch,
            step,
            msg: err.to_string(),
        }
    } else {
        err
    }
}

/// One gradient step on a batch; returns the loss and whether clipping fired.
fn train_step(
    model: &mut Model<f32>,
    adam: &mut Adam<f32>,
    batch: &[&Encoded],
    lr: f64,
    clip: f64,
    rng: &mut RngStream,
) -> Result<(f64, bool)> {
    let sources: Vec<Vec<usize>> = batch.iter().map(|s| s.source.clone()).collect();
    let targets: Vec<Vec<usize>> = batch.iter().map(|s| s.target.clone()).collect();
    let mut g = Graph::new();
    let loss = model.loss_forward(&mut g, &sources, &targets, true, rng)?;
    let value = f64::from(g.value(loss).data()[0]);
    model.store.zero_grad();
    g.backward(loss, &mut model.store)?;
    let norm = model.store.grad_norm();
    if !value.is_finite() || !norm.is_finite() {
        return Err(Error::NonFinite { op: "gradient" });
    }
    let clipped = clip > 0.0 && norm > clip;
    if clipped {
        model.store.scale_grads(clip / norm);
    }
    adam.step(&mut model.store, lr)?;
    Ok((value, clipped))
}

/// Trains `model` and returns the parameters of the best dev epoch.
pub fn fit(
    mut model: Model<f32>,
    train: &[Encoded],
    dev: &[Encoded],
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::contract("empty train split"));
    }
    if dev.is_empty() {
        return Err(Error::contract("empty dev split"));
    }
    let root = training_stream(config.seed);
    let mut adam = Adam::new(&model.store, config.beta1, config.beta2, config.adam_eps);
    let mut schedule = PlateauSchedule::new(config.lr, config.lr_decay, config.plateau_epochs, config.early_stop_patience);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut epochs = Vec::new();
    let mut timing = Timing::default();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut step = 0usize;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let lr = schedule.lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.split("shuffle").split_index(epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut batches, mut clipped) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<&Encoded> = chunk.iter().map(|&i| &train[i]).collect();
            let mut rng = root.split("dropout").split_index(step as u64);
            let (loss, was_clipped) = train_step(&mut model, &mut adam, &batch, lr, config.clip_norm, &mut rng)
                .map_err(|e| numeric(e, epoch, step))?;
            loss_sum += loss;
            batches += 1;
            clipped += usize::from(was_clipped);
        }
        let dev_accuracy = accuracy(&model, dev, config.eval_batch_size).map_err(|e| numeric(e, epoch, step))?;
        if best.as_ref().is_none_or(|b| dev_accuracy > b.1) {
            best = Some((epoch, dev_accuracy, model.store.clone()));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            dev_accuracy,
            lr,
            clipped_steps: clipped,
        };
        progress(&record);
        epochs.push(record);
        timing.epoch_seconds.push(started.elapsed().as_secs_f64());
        if schedule.observe(dev_accuracy).stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    let (best_epoch, best_dev_acc, store) = best.expect("at least one epoch");
    let report = TrainReport {
        epochs,
        best_epoch,
        best_dev_acc,
        stop_reason,
        model: model.config.clone(),
        train: config.clone(),
    };
    model.store = store;
    Ok(FitResult {
        best: model,
        report,
        timing,
    })
}

/// Accuracy and edit-distance tables over kinds × seeds, plus every report.
#[derive(Debug, Clone)]
pub struct MultiseedResult {
    pub accuracy: ResultTable,
    pub edit_distance: ResultTable,
    pub reports: Vec<EvalReport>,
}

/// Trains one model per `(kind, seed)` and evaluates it on every test split.
pub fn run_multiseed(
    dataset: &Dataset,
    kinds: &[AttentionKind],
    seeds: &[u64],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    progress: &mut dyn FnMut(AttentionKind, u64, &EpochRecord),
) -> Result<MultiseedResult> {
    if seeds.is_empty() || kinds.is_empty() {
        return Err(Error::contract("need at least one kind and one seed"));
    }
    let split = |name: &str| {
        dataset
            .split(name)
            .ok_or_else(|| Error::contract(format!("dataset has no {name} split")))
    };
    let train = encode_split(&dataset.vocab, split("train")?)?;
    let dev = encode_split(&dataset.vocab, split("dev")?)?;
    let tests: Vec<String> = dataset.test_split_names().into_iter().map(str::to_string).collect();
    let mut runs: Vec<(AttentionKind, u64)> = kinds.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect();
    runs.sort();
    let mut reports = Vec::new();
    for (kind, seed) in runs {
        let config = ModelConfig {
            attention: kind,
            ..model_config.clone()
        };
        let tc = TrainConfig {
            seed,
            ..train_config.clone()
        };
        let model = init_model(config, seed)?;
        let fitted = fit(model, &train, &dev, &tc, &mut |r| progress(kind, seed, r))?;
        for name in &tests {
            let predict = model_predictor(&fitted.best, &dataset.vocab);
            let report = evaluate_split(split(name)?, tc.eval_batch_size, predict)?.with_run(kind, seed);
            reports.push(report.without_samples());
        }
    }
    Ok(MultiseedResult {
        accuracy: ResultTable::from_reports(dataset.task, Metric::Accuracy, &tests, &reports),
        edit_distance: ResultTable::from_reports(dataset.task, Metric::EditDistance, &tests, &reports),
        reports,
    })
}

#[cfg(test)]
mod tests;
