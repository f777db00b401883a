use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Level};
use crate::error::TensorError;
use crate::nn::{sequence_loss, ModelParams, TcanConfig};

/// Perplexity for word-level corpora, bits per character for char-level ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Ppl,
    Bpc,
}

impl MetricKind {
    pub fn for_level(level: Level) -> Self {
        match level {
            Level::Char => MetricKind::Bpc,
            Level::Word => MetricKind::Ppl,
        }
    }

    /// Converts a mean NLL in nats.
    pub fn from_nll(self, nll: f64) -> f64 {
        match self {
            MetricKind::Ppl => nll.exp(),
            MetricKind::Bpc => nll / std::f64::consts::LN_2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Ppl => "ppl",
            MetricKind::Bpc => "bpc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean negative log-likelihood per supervised position, in nats.
    pub nll: f64,
    pub positions: usize,
}

impl Evaluation {
    pub fn ppl(&self) -> f64 {
        MetricKind::Ppl.from_nll(self.nll)
    }

    pub fn bpc(&self) -> f64 {
        MetricKind::Bpc.from_nll(self.nll)
    }

    pub fn metric(&self, kind: MetricKind) -> f64 {
        kind.from_nll(self.nll)
    }
}

/// Mean NLL over every position of every window. Parameters are only read.
pub fn evaluate(
    params: &ModelParams,
    cfg: &TcanConfig,
    batches: &[Batch],
) -> Result<Evaluation, TensorError> {
    let windows: Vec<(&[usize], &[usize])> = batches
        .iter()
        .flat_map(|b| b.inputs.iter().zip(&b.targets))
        .map(|(i, t)| (i.as_slice(), t.as_slice()))
        .collect();
    if windows.is_empty() {
        return Err(TensorError::Contract("evaluate needs at least one window".into()));
    }
    let losses = windows
        .par_iter()
        .map(|(inputs, targets)| {
            sequence_loss(params, cfg, inputs, targets).map(|l| l * inputs.len() as f64)
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let positions: usize = windows.iter().map(|(i, _)| i.len()).sum();
    Ok(Evaluation {
        nll: losses.iter().sum::<f64>() / positions as f64,
        positions,
    })
}
