//! Temporal attention and the enhanced residual, expressed as tape ops.

use crate::error::TensorError;
use crate::nn::config::SoftmaxDirection;
use crate::nn::params::BoundAttention;
use crate::tape::{MaskMode, Tape, Var};
use crate::tensor::Tensor;

/// Keys, queries, values and the raw score matrix of one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct Scores {
    pub keys: Var,
    pub queries: Var,
    pub values: Var,
    /// `W[i][j] = k_i . q_j / sqrt(d_attn)`, full `[T, T]`.
    pub raw: Var,
}

pub fn attention_scores(
    tape: &mut Tape,
    s: Var,
    maps: &BoundAttention,
) -> Result<Scores, TensorError> {
    let keys = tape.matmul(s, maps.key)?;
    let queries = tape.matmul(s, maps.query)?;
    let values = tape.matmul(s, maps.value)?;
    let d_attn = tape.value(keys).shape()[1];
    let qt = tape.transpose(queries)?;
    let dots = tape.matmul(keys, qt)?;
    let raw = tape.scale(dots, 1.0 / (d_attn as f64).sqrt())?;
    Ok(Scores {
        keys,
        queries,
        values,
        raw,
    })
}

pub fn apply_causal_mask(tape: &mut Tape, raw: Var, mode: MaskMode) -> Result<Var, TensorError> {
    tape.causal_mask(raw, mode)
}

pub fn directional_softmax(
    tape: &mut Tape,
    masked: Var,
    direction: SoftmaxDirection,
) -> Result<Var, TensorError> {
    match direction {
        SoftmaxDirection::Vertical => tape.softmax(masked, 0),
        SoftmaxDirection::Horizontal => tape.softmax(masked, 1),
        SoftmaxDirection::Mixed => {
            let v = tape.softmax(masked, 0)?;
            let h = tape.softmax(masked, 1)?;
            let sum = tape.add(v, h)?;
            tape.scale(sum, 0.5)
        }
    }
}

/// `sa_t = sum_{i <= t} Wa[t][i] * source_i`, where the source is `s` or,
/// when `value_out` is given, the values mapped back to `d_embed`.
pub fn attention_output(
    tape: &mut Tape,
    weights: Var,
    s: Var,
    values: Var,
    value_out: Option<Var>,
) -> Result<Var, TensorError> {
    match value_out {
        None => tape.causal_weighted_sum(weights, s),
        Some(proj) => {
            let mixed = tape.causal_weighted_sum(weights, values)?;
            tape.matmul(mixed, proj)
        }
    }
}

/// Returns `(sr, M)` with `M_t = sum_{j <= t} Wa[t][j]` and `sr_t = M_t * s_t`.
pub fn enhanced_residual(tape: &mut Tape, weights: Var, s: Var) -> Result<(Var, Var), TensorError> {
    let importance = tape.lower_row_sum(weights)?;
    let sr = tape.scale_rows(s, importance)?;
    Ok((sr, importance))
}

/// Attention matrices of one layer captured for export.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    /// 1-indexed level.
    pub layer: usize,
    pub raw: Tensor,
    pub masked: Tensor,
    pub weights: Tensor,
    pub importance: Tensor,
}

impl AttentionRecord {
    /// `Wa` with the entries the output sum never reads (`i > t`) set to zero.
    pub fn effective_weights(&self) -> Tensor {
        let n = self.weights.shape()[0];
        let mut out = self.weights.clone();
        let data = out.data_mut();
        for t in 0..n {
            data[t * n + t + 1..(t + 1) * n].fill(0.0);
        }
        out
    }
}
