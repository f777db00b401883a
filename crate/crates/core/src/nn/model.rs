//! The stacked network: embedding, `L` blocks, linear decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::nn::attention::{
    apply_causal_mask, attention_output, attention_scores, directional_softmax,
    enhanced_residual, AttentionRecord,
};
use crate::nn::config::{Activation, TcanConfig};
use crate::nn::params::{mix_seed, BoundLayer, BoundParams, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// No dropout.
    Eval,
    /// Dropout masks drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var, TensorError> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Gelu => tape.gelu(x),
    }
}

fn dropout(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    mode: ForwardMode,
    stream: u64,
) -> Result<Var, TensorError> {
    let ForwardMode::Train { dropout_seed } = mode else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(dropout_seed, stream));
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Tensor::from_vec(&shape, mask)?);
    tape.mul(x, mask)
}

/// One block at 1-indexed `level`: attention, causal dilated convolution(s),
/// `s + sc (+ sr)`, activation.
pub fn tcan_block(
    tape: &mut Tape,
    s: Var,
    level: usize,
    layer: &BoundLayer,
    cfg: &TcanConfig,
    mode: ForwardMode,
) -> Result<(Var, Option<AttentionRecord>), TensorError> {
    let dilation = cfg.dilation(level);
    let mut record = None;
    let mut residual = None;

    let mut chain: Vec<Var> = Vec::with_capacity(layer.convs.len() + 1);
    let conv_input = match &layer.attention {
        Some(maps) => {
            let scores = attention_scores(tape, s, maps)?;
            let masked = apply_causal_mask(tape, scores.raw, cfg.mask_mode)?;
            let weights = directional_softmax(tape, masked, cfg.softmax_direction)?;
            let sa = attention_output(tape, weights, s, scores.values, maps.value_out)?;
            let (sr, importance) = enhanced_residual(tape, weights, s)?;
            if cfg.use_enhanced_residual {
                residual = Some(sr);
            }
            record = Some(AttentionRecord {
                layer: level,
                raw: tape.value(scores.raw).clone(),
                masked: tape.value(masked).clone(),
                weights: tape.value(weights).clone(),
                importance: tape.value(importance).clone(),
            });
            sa
        }
        None => {
            chain.extend(layer.conv_replace);
            s
        }
    };
    chain.extend(layer.convs.iter().copied());

    // convolutions run channel-major
    let mut x = tape.transpose(conv_input)?;
    for (i, &kernel) in chain.iter().enumerate() {
        if i > 0 {
            x = activate(tape, x, cfg.activation)?;
        }
        x = tape.causal_conv1d(x, kernel, dilation)?;
    }
    let sc = tape.transpose(x)?;

    let mut sum = tape.add(s, sc)?;
    if let Some(sr) = residual {
        sum = tape.add(sum, sr)?;
    }
    let out = activate(tape, sum, cfg.activation)?;
    let out = dropout(tape, out, cfg.dropout, mode, level as u64)?;
    Ok((out, record))
}

/// Runs the full model on `tape` and returns the `[T, V]` logits.
pub fn forward_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    ids: &[usize],
    cfg: &TcanConfig,
    mode: ForwardMode,
) -> Result<(Var, Vec<AttentionRecord>), TensorError> {
    if ids.is_empty() {
        return Err(TensorError::Shape("empty input sequence".into()));
    }
    let mut s = tape.gather_rows(bound.embedding, ids)?;
    s = dropout(tape, s, cfg.dropout, mode, 0)?;
    let mut records = Vec::new();
    for (l, layer) in bound.layers.iter().enumerate() {
        let (next, record) = tcan_block(tape, s, l + 1, layer, cfg, mode)?;
        records.extend(record);
        s = next;
    }
    let decoder = match bound.decoder {
        Some(w) => w,
        None => tape.transpose(bound.embedding)?,
    };
    let projected = tape.matmul(s, decoder)?;
    let logits = tape.add_row_bias(projected, bound.decoder_bias)?;
    Ok((logits, records))
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub records: Vec<AttentionRecord>,
}

/// Inference forward pass: `logits[t]` is computed from `ids[..=t]`
/// through the convolution path and from the whole window through a
/// vertical or mixed softmax normalizer.
pub fn model_forward(
    ids: &[usize],
    params: &ModelParams,
    cfg: &TcanConfig,
) -> Result<ForwardOutput, TensorError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (logits, records) = forward_on_tape(&mut tape, &bound, ids, cfg, ForwardMode::Eval)?;
    Ok(ForwardOutput {
        logits: tape.value(logits).clone(),
        records,
    })
}

/// Mean cross-entropy of one window and its gradient for every parameter,
/// in [`ModelParams::named`] order.
pub fn loss_and_grads(
    params: &ModelParams,
    cfg: &TcanConfig,
    inputs: &[usize],
    targets: &[usize],
    mode: ForwardMode,
) -> Result<(f64, Vec<Vec<f64>>), TensorError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (logits, _) = forward_on_tape(&mut tape, &bound, inputs, cfg, mode)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    Ok((value, bound.collect_grads(&mut grads, params)))
}

/// Mean cross-entropy of one window, no gradient.
pub fn sequence_loss(
    params: &ModelParams,
    cfg: &TcanConfig,
    inputs: &[usize],
    targets: &[usize],
) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (logits, _) = forward_on_tape(&mut tape, &bound, inputs, cfg, ForwardMode::Eval)?;
    let loss = tape.cross_entropy(logits, targets)?;
    tape.value(loss).item()
}
