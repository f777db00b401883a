//! Single training and evaluation runs with their on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use serde_json::Value;
use tcan_core::data::TokenStream;
use tcan_core::nn::{count_parameters, ModelParams};
use tcan_core::train::{
    eval_batches, evaluate, train, Checkpoint, MetricKind, Start, TrainReport, BEST_DIR, LAST_DIR,
};

use crate::config::LoadedConfig;
use crate::error::{CliError, Result};

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: TrainReport,
    pub out_dir: PathBuf,
}

impl RunOutput {
    pub fn report_path(&self) -> PathBuf {
        self.out_dir.join(REPORT_FILE)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join(METRICS_FILE)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join(BEST_DIR)
    }
}

/// `report.json` body: the report plus the directory relative paths in its
/// config echo resolve against.
pub fn report_json(report: &TrainReport, base_dir: &Path) -> Value {
    let mut value = serde_json::to_value(report).expect("report serializes");
    value["base_dir"] = Value::from(base_dir.to_string_lossy().into_owned());
    value
}

pub fn write_report(dir: &Path, report: &TrainReport, base_dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let body = serde_json::to_string_pretty(&report_json(report, base_dir)).map_err(tcan_core::Error::from)?;
    let path = dir.join(REPORT_FILE);
    fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
    let path = dir.join(METRICS_FILE);
    fs::write(&path, report.metrics_csv()).map_err(|e| CliError::io(&path, e))
}

/// Trains and evaluates one config, writing `report.json`, `metrics.csv` and
/// checkpoints under the config's output directory. A numeric abort still
/// writes the partial report before returning the error.
pub fn run_experiment(loaded: &LoadedConfig, resume: bool) -> Result<RunOutput> {
    let (corpus, model) = loaded.prepare()?;
    let opts = loaded.config.train();
    let out_dir = loaded.out_dir();
    fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;

    let start = if resume {
        let last = Checkpoint::load(&out_dir.join(LAST_DIR))?;
        if last.model != model {
            return Err(CliError::argument(
                "resume",
                "checkpoint under out_dir/last was trained with a different model config",
            ));
        }
        let best_dir = out_dir.join(BEST_DIR);
        let best = if best_dir.exists() {
            Some(Checkpoint::load(&best_dir)?.params)
        } else {
            None
        };
        Start::Resume { last, best }
    } else {
        Start::Fresh
    };

    info!(
        "training {} parameters on {} train tokens (vocab {})",
        count_parameters(&model),
        corpus.train.len(),
        corpus.vocab.len()
    );
    match train(&model, &opts, &corpus, Some(&out_dir), start, loaded.echo.clone()) {
        Ok(report) => {
            write_report(&out_dir, &report, &loaded.base_dir)?;
            Ok(RunOutput { report, out_dir })
        }
        Err(tcan_core::Error::NumericAbort { step, reason, report }) => {
            warn!("numeric abort at step {step}: {reason}");
            write_report(&out_dir, &report, &loaded.base_dir)?;
            Err(tcan_core::Error::NumericAbort { step, reason, report }.into())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub metric: MetricKind,
    pub param_count: usize,
    pub valid_loss: f64,
    pub valid_metric: f64,
    pub test_loss: f64,
    pub test_metric: f64,
}

/// Scores a saved checkpoint on the config's validation and test splits,
/// encoded with the checkpoint's own vocabulary.
pub fn evaluate_checkpoint(loaded: &LoadedConfig, checkpoint_dir: &Path) -> Result<EvalSummary> {
    loaded.config.validate()?;
    let ckpt = Checkpoint::load(checkpoint_dir)?;
    let c = &loaded.config;
    let read = |p: &Path| {
        let p = loaded.resolve(p);
        fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))
    };
    let valid = TokenStream::encode(&read(&c.valid_path)?, &ckpt.vocab, tcan_core::data::Split::Valid)?;
    let test = TokenStream::encode(&read(&c.test_path)?, &ckpt.vocab, tcan_core::data::Split::Test)?;
    let metric = MetricKind::for_level(ckpt.vocab.level());
    let score = |ids: &[usize]| -> Result<(f64, f64)> {
        let batches = eval_batches(ids, c.batch_size, c.seq_len)?;
        let e = evaluate(&ckpt.params, &ckpt.model, &batches)?;
        Ok((e.nll, e.metric(metric)))
    };
    let (valid_loss, valid_metric) = score(&valid.ids)?;
    let (test_loss, test_metric) = score(&test.ids)?;
    Ok(EvalSummary {
        metric,
        param_count: ckpt.params.count(),
        valid_loss,
        valid_metric,
        test_loss,
        test_metric,
    })
}

/// Per-tensor parameter counts in named order, then the total.
pub fn parameter_breakdown(loaded: &LoadedConfig) -> Result<(Vec<(String, usize)>, usize)> {
    let (_, model) = loaded.prepare()?;
    let params = ModelParams::init(&model)?;
    let rows: Vec<(String, usize)> = params
        .named()
        .into_iter()
        .map(|(name, t)| (name, t.numel()))
        .collect();
    let total = count_parameters(&model);
    debug_assert_eq!(total, rows.iter().map(|(_, n)| n).sum::<usize>());
    Ok((rows, total))
}
