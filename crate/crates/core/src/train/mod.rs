//! Optimization, evaluation and the epoch loop.

pub mod adam;
pub mod checkpoint;
pub mod clip;
pub mod eval;

use std::path::Path;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batchify, Batch, Corpus};
use crate::error::{ConfigError, DataError, Error, Result, TensorError};
use crate::nn::params::mix_seed;
use crate::nn::{loss_and_grads, ForwardMode, ModelParams, TcanConfig};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use clip::{clip_grad_norm, ClipOutcome};
pub use eval::{evaluate, Evaluation, MetricKind};

/// Directory names under the output directory.
pub const BEST_DIR: &str = "checkpoint";
pub const LAST_DIR: &str = "last";

const DROPOUT_STREAM: u64 = 0x000D_500D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub adam: AdamConfig,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            seq_len: 320,
            epochs: 10,
            max_steps: None,
            adam: AdamConfig::default(),
            clip: Some(0.35),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::new("batch_size", "must be at least 1"));
        }
        if self.seq_len == 0 {
            return Err(ConfigError::new("seq_len", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(ConfigError::new("epochs", "must be at least 1"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(ConfigError::new("lr", "must be positive"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(ConfigError::new("clip", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed when this record was written.
    pub step: usize,
    /// True when the step budget ended the epoch early.
    pub partial: bool,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_metric: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    pub clipped_fraction: f64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct EpochAccumulator {
    loss_sum: f64,
    steps: usize,
    norm_sum: f64,
    norm_max: f64,
    clipped: usize,
}

/// Resumable position of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub step: usize,
    pub epoch: usize,
    /// Next batch within `epoch`.
    pub batch: usize,
    pub best_valid: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    acc: EpochAccumulator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metric: MetricKind,
    pub param_count: usize,
    pub seed: u64,
    pub steps: usize,
    pub initial_valid_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_valid_metric: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_metric: Option<f64>,
    pub wall_clock_secs: f64,
    pub aborted: Option<String>,
    pub model: TcanConfig,
    pub train: TrainConfig,
    /// The experiment config exactly as supplied by the caller.
    pub config: serde_json::Value,
}

impl TrainReport {
    /// `epoch,train_loss,valid_metric` rows.
    pub fn metrics_csv(&self) -> String {
        let mut out = format!("epoch,train_loss,valid_{}\n", self.metric.as_str());
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.valid_metric));
        }
        out
    }

    pub fn final_valid_metric(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.valid_metric)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub clip: Option<ClipOutcome>,
}

/// Parameters, optimizer and progress of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: TcanConfig,
    pub opts: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub progress: TrainProgress,
}

impl Trainer {
    pub fn new(model: TcanConfig, opts: TrainConfig) -> Result<Self> {
        model.validate()?;
        opts.validate()?;
        let params = ModelParams::init(&model)?;
        let adam = AdamState::new(opts.adam, params.named().into_iter().map(|(_, t)| t));
        Ok(Self {
            model,
            opts,
            params,
            adam,
            progress: TrainProgress::default(),
        })
    }

    /// Continues from a checkpoint written by [`train`]. The optimizer
    /// hyperparameters come from `opts`; moments and step count from the
    /// checkpoint.
    pub fn resume(ckpt: Checkpoint, opts: TrainConfig) -> Result<Self> {
        opts.validate()?;
        let mut adam = ckpt.optimizer.ok_or_else(|| {
            Error::Checkpoint(crate::error::CheckpointError::Malformed(
                "checkpoint has no optimizer state".into(),
            ))
        })?;
        adam.config = opts.adam;
        Ok(Self {
            model: ckpt.model,
            opts,
            params: ckpt.params,
            adam,
            progress: ckpt.progress.unwrap_or_default(),
        })
    }

    /// Forward, backward, clip and Adam on one batch; windows run in parallel.
    pub fn step(&mut self, batch: &Batch) -> Result<StepStats, TensorError> {
        let base = mix_seed(self.model.seed ^ DROPOUT_STREAM, self.progress.step as u64);
        let params = &self.params;
        let model = &self.model;
        let results = batch
            .inputs
            .par_iter()
            .zip(&batch.targets)
            .enumerate()
            .map(|(b, (inputs, targets))| {
                let mode = ForwardMode::Train {
                    dropout_seed: mix_seed(base, b as u64),
                };
                loss_and_grads(params, model, inputs, targets, mode)
            })
            .collect::<Result<Vec<_>, _>>()?;

        let n = results.len() as f64;
        let loss = results.iter().map(|(l, _)| l).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "loss" });
        }
        let mut iter = results.into_iter();
        let (_, mut grads) = iter.next().expect("batch has at least one window");
        for (_, g) in iter {
            for (acc, part) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
            }
        }
        let mut tensors = self.params.tensors_mut();
        for (t, mut g) in tensors.iter_mut().zip(grads) {
            g.iter_mut().for_each(|v| *v /= n);
            t.set_grad(g)?;
        }
        let clip = self.opts.clip.map(|max| clip_grad_norm(&mut tensors, max));
        if let Some(c) = clip {
            if !c.norm.is_finite() {
                return Err(TensorError::NonFinite { op: "gradient norm" });
            }
        }
        self.adam.step(&mut tensors)?;
        drop(tensors);
        self.params.zero_grads();
        self.progress.step += 1;
        Ok(StepStats { loss, clip })
    }

    pub fn checkpoint(&self, corpus: &Corpus, extra: &serde_json::Value) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            vocab: corpus.vocab.clone(),
            params: self.params.clone(),
            optimizer: Some(self.adam.clone()),
            progress: Some(self.progress.clone()),
            extra: extra.clone(),
        }
    }
}

/// Largest lane count not above `batch_size` that still yields one window.
pub fn eval_batches(ids: &[usize], batch_size: usize, seq_len: usize) -> Result<Vec<Batch>, DataError> {
    let fit = (ids.len() / (seq_len + 1)).min(batch_size).max(1);
    batchify(ids, fit, seq_len)
}

/// Where a run starts: fresh, or from a `last` checkpoint plus the best
/// parameters seen so far.
pub enum Start {
    Fresh,
    Resume {
        last: Checkpoint,
        best: Option<ModelParams>,
    },
}

/// Runs the epoch loop, saving the best-validation checkpoint under
/// `out_dir/checkpoint` and the final state under `out_dir/last`.
pub fn train(
    model: &TcanConfig,
    opts: &TrainConfig,
    corpus: &Corpus,
    out_dir: Option<&Path>,
    start: Start,
    echo: serde_json::Value,
) -> Result<TrainReport> {
    if model.vocab_size != corpus.vocab.len() {
        return Err(ConfigError::new(
            "vocab_size",
            format!(
                "model has {} symbols but the corpus vocabulary has {}",
                model.vocab_size,
                corpus.vocab.len()
            ),
        )
        .into());
    }
    let (mut trainer, mut best_params) = match start {
        Start::Fresh => {
            let t = Trainer::new(model.clone(), opts.clone())?;
            (t, None)
        }
        Start::Resume { last, best } => (Trainer::resume(last, opts.clone())?, best),
    };
    let metric = MetricKind::for_level(corpus.vocab.level());
    let train_batches = batchify(&corpus.train.ids, opts.batch_size, opts.seq_len)?;
    let valid_batches = eval_batches(&corpus.valid.ids, opts.batch_size, opts.seq_len)?;
    let started = Instant::now();
    let initial_valid_loss = evaluate(&trainer.params, model, &valid_batches)?.nll;

    let mut report = TrainReport {
        metric,
        param_count: trainer.params.count(),
        seed: model.seed,
        steps: 0,
        initial_valid_loss,
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: None,
        best_valid_metric: None,
        test_loss: None,
        test_metric: None,
        wall_clock_secs: 0.0,
        aborted: None,
        model: model.clone(),
        train: opts.clone(),
        config: echo.clone(),
    };
    let budget_left = |t: &Trainer| opts.max_steps.is_none_or(|m| t.progress.step < m);

    let abort = |trainer: &Trainer, mut report: TrainReport, reason: String| -> Error {
        report.epochs = trainer.progress.epochs.clone();
        report.step_losses = trainer.progress.step_losses.clone();
        report.steps = trainer.progress.step;
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        report.aborted = Some(reason.clone());
        Error::NumericAbort {
            step: trainer.progress.step,
            reason,
            report: Box::new(report),
        }
    };

    while trainer.progress.epoch < opts.epochs && budget_left(&trainer) {
        let epoch_started = Instant::now();
        while trainer.progress.batch < train_batches.len() && budget_left(&trainer) {
            let batch = &train_batches[trainer.progress.batch];
            let stats = match trainer.step(batch) {
                Ok(s) => s,
                Err(TensorError::NonFinite { op }) => {
                    let reason = format!("non-finite value in {op}");
                    return Err(abort(&trainer, report, reason));
                }
                Err(e) => return Err(e.into()),
            };
            let p = &mut trainer.progress;
            p.step_losses.push(stats.loss);
            p.acc.loss_sum += stats.loss;
            p.acc.steps += 1;
            if let Some(c) = stats.clip {
                p.acc.norm_sum += c.norm;
                p.acc.norm_max = p.acc.norm_max.max(c.norm);
                p.acc.clipped += usize::from(c.scale < 1.0);
            }
            p.batch += 1;
        }
        let complete = trainer.progress.batch >= train_batches.len();
        if trainer.progress.acc.steps == 0 {
            break;
        }
        let valid = match evaluate(&trainer.params, model, &valid_batches) {
            Ok(v) => v,
            Err(TensorError::NonFinite { op }) => {
                return Err(abort(&trainer, report, format!("non-finite value in {op} during validation")));
            }
            Err(e) => return Err(e.into()),
        };
        let p = &mut trainer.progress;
        let acc = std::mem::take(&mut p.acc);
        let record = EpochRecord {
            epoch: p.epoch + 1,
            step: p.step,
            partial: !complete,
            train_loss: acc.loss_sum / acc.steps as f64,
            valid_loss: valid.nll,
            valid_metric: valid.metric(metric),
            grad_norm_mean: acc.norm_sum / acc.steps as f64,
            grad_norm_max: acc.norm_max,
            clipped_fraction: acc.clipped as f64 / acc.steps as f64,
            wall_clock_secs: epoch_started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {} step {} train_loss {:.4} valid_{} {:.4}",
            record.epoch,
            record.step,
            record.train_loss,
            metric.as_str(),
            record.valid_metric
        );
        let improved = p.best_valid.is_none_or(|b| record.valid_metric < b);
        if improved {
            p.best_valid = Some(record.valid_metric);
            p.best_epoch = Some(record.epoch);
        }
        p.epochs.push(record);
        if complete {
            p.epoch += 1;
            p.batch = 0;
        }
        if improved {
            best_params = Some(trainer.params.clone());
            if let Some(dir) = out_dir {
                trainer.checkpoint(corpus, &echo).save(&dir.join(BEST_DIR))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        trainer.checkpoint(corpus, &echo).save(&dir.join(LAST_DIR))?;
    }
    let best = best_params.as_ref().unwrap_or(&trainer.params);
    if let Ok(test_batches) = eval_batches(&corpus.test.ids, opts.batch_size, opts.seq_len) {
        let test = evaluate(best, model, &test_batches)?;
        report.test_loss = Some(test.nll);
        report.test_metric = Some(test.metric(metric));
    }
    let p = &trainer.progress;
    report.steps = p.step;
    report.epochs = p.epochs.clone();
    report.step_losses = p.step_losses.clone();
    report.best_epoch = p.best_epoch;
    report.best_valid_metric = p.best_valid;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}
