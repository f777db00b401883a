//! Slow reference implementations used as ground truth in tests.
//!
//! Everything here is written with explicit scalar loops over nested `Vec`s
//! and reads parameters only through [`Tensor::data`]. Nothing in this module
//! calls the tape or the `nn` forward code.

use crate::nn::params::{LayerParams, ModelParams};
use crate::nn::{Activation, MaskMode, SoftmaxDirection, TcanConfig};
use crate::tensor::Tensor;

pub type Matrix = Vec<Vec<f64>>;

/// Worst-case disagreement between two equally sized arrays.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub worst_index: usize,
}

/// Compares `actual` to `expected`. Relative differences divide by
/// `max(|actual|, |expected|, floor)`.
pub fn compare(actual: &[f64], expected: &[f64], floor: f64) -> OracleReport {
    assert_eq!(actual.len(), expected.len(), "compare: length mismatch");
    let mut report = OracleReport {
        max_abs_diff: 0.0,
        max_rel_diff: 0.0,
        worst_index: 0,
    };
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        let abs = (a - e).abs();
        let rel = abs / a.abs().max(e.abs()).max(floor);
        if abs > report.max_abs_diff {
            report.max_abs_diff = abs;
            report.worst_index = i;
        }
        report.max_rel_diff = report.max_rel_diff.max(rel);
    }
    report
}

pub fn flatten(m: &Matrix) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn to_matrix(t: &Tensor) -> Matrix {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    eps: f64,
) -> Vec<f64> {
    assert!(eps > 0.0);
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Scalar Adam trajectory: parameter value after each of `grads.len()` steps.
pub fn scalar_adam(start: f64, grads: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Vec<f64> {
    let (mut w, mut m, mut v) = (start, 0.0, 0.0);
    let mut out = Vec::new();
    for (t, &g) in grads.iter().enumerate() {
        let step = (t + 1) as i32;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        let m_hat = m / (1.0 - beta1.powi(step));
        let v_hat = v / (1.0 - beta2.powi(step));
        w -= lr * m_hat / (v_hat.sqrt() + eps);
        out.push(w);
    }
    out
}

/// Causal dilated convolution on time-major input `x[t][c]` with an explicit
/// zero-padded copy; `kernel[o][c][j]`, tap `k-1` is the newest.
pub fn naive_causal_conv(x: &Matrix, kernel: &Tensor, dilation: usize) -> Matrix {
    let (c_out, c_in, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let t_len = x.len();
    let pad = (k - 1) * dilation;
    let mut padded = vec![vec![0.0; c_in]; pad];
    padded.extend(x.iter().cloned());
    let w = kernel.data();
    let mut out = vec![vec![0.0; c_out]; t_len];
    for t in 0..t_len {
        for o in 0..c_out {
            let mut acc = 0.0;
            for c in 0..c_in {
                for j in 0..k {
                    acc += w[(o * c_in + c) * k + j] * padded[t + j * dilation][c];
                }
            }
            out[t][o] = acc;
        }
    }
    out
}

fn project(x: &Matrix, w: &Tensor) -> Matrix {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    x.iter()
        .map(|xr| {
            (0..cols)
                .map(|j| (0..rows).map(|i| xr[i] * wd[i * cols + j]).sum())
                .collect()
        })
        .collect()
}

fn act(x: f64, a: Activation) -> f64 {
    match a {
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::Gelu => {
            let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
            0.5 * x * (1.0 + inner.tanh())
        }
    }
}

/// Normalizes masked scores column by column, row by row, or both averaged.
pub fn naive_normalize(masked: &Matrix, direction: SoftmaxDirection) -> Matrix {
    let n = masked.len();
    let by_column = || {
        let mut out = vec![vec![0.0; n]; n];
        for j in 0..n {
            let m = (0..n).map(|i| masked[i][j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|i| (masked[i][j] - m).exp()).sum();
            for i in 0..n {
                out[i][j] = (masked[i][j] - m).exp() / z;
            }
        }
        out
    };
    let by_row = || {
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            let m = masked[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = masked[i].iter().map(|v| (v - m).exp()).sum();
            for j in 0..n {
                out[i][j] = (masked[i][j] - m).exp() / z;
            }
        }
        out
    };
    match direction {
        SoftmaxDirection::Vertical => by_column(),
        SoftmaxDirection::Horizontal => by_row(),
        SoftmaxDirection::Mixed => {
            let (v, h) = (by_column(), by_row());
            (0..n)
                .map(|i| (0..n).map(|j| (v[i][j] + h[i][j]) / 2.0).collect())
                .collect()
        }
    }
}

/// Attention weights and output from precomputed raw scores.
/// Returns `(Wa, sa, M)`.
pub fn naive_attention_from_scores(
    raw: &Matrix,
    source: &Matrix,
    mask: MaskMode,
    direction: SoftmaxDirection,
) -> (Matrix, Matrix, Vec<f64>) {
    let n = raw.len();
    let mut masked = raw.clone();
    for (i, row) in masked.iter_mut().enumerate() {
        for v in row.iter_mut().skip(i + 1) {
            *v = match mask {
                MaskMode::LiteralZero => 0.0,
                MaskMode::NegInf => f64::NEG_INFINITY,
            };
        }
    }
    let wa = naive_normalize(&masked, direction);
    let width = source[0].len();
    let mut sa = vec![vec![0.0; width]; n];
    let mut importance = vec![0.0; n];
    for t in 0..n {
        for i in 0..=t {
            importance[t] += wa[t][i];
            for c in 0..width {
                sa[t][c] += wa[t][i] * source[i][c];
            }
        }
    }
    (wa, sa, importance)
}

/// One block at 1-indexed `level` on time-major `s[t][c]`.
pub fn naive_tcan_block(s: &Matrix, level: usize, layer: &LayerParams, cfg: &TcanConfig) -> Matrix {
    assert!(s.len() <= 64, "naive oracle is limited to T <= 64");
    let t_len = s.len();
    let width = s[0].len();
    let dilation = 1usize << (level - 1);
    let mut kernels: Vec<&Tensor> = Vec::new();
    let mut importance = None;

    let conv_input = match &layer.attention {
        Some(maps) => {
            let keys = project(s, &maps.key);
            let queries = project(s, &maps.query);
            let values = project(s, &maps.value);
            let d_attn = keys[0].len();
            let mut raw = vec![vec![0.0; t_len]; t_len];
            for i in 0..t_len {
                for j in 0..t_len {
                    let dot: f64 = (0..d_attn).map(|a| keys[i][a] * queries[j][a]).sum();
                    raw[i][j] = dot / (d_attn as f64).sqrt();
                }
            }
            let source = if maps.value_out.is_some() { &values } else { s };
            let (_, sa, m) =
                naive_attention_from_scores(&raw, source, cfg.mask_mode, cfg.softmax_direction);
            importance = Some(m);
            match &maps.value_out {
                Some(p) => project(&sa, p),
                None => sa,
            }
        }
        None => {
            kernels.extend(layer.conv_replace.as_ref());
            s.clone()
        }
    };
    kernels.extend(layer.convs.iter());

    let mut x = conv_input;
    for (i, kernel) in kernels.iter().enumerate() {
        if i > 0 {
            for row in &mut x {
                for v in row.iter_mut() {
                    *v = act(*v, cfg.activation);
                }
            }
        }
        x = naive_causal_conv(&x, kernel, dilation);
    }

    let mut out = vec![vec![0.0; width]; t_len];
    for t in 0..t_len {
        for c in 0..width {
            let mut v = s[t][c] + x[t][c];
            if cfg.use_enhanced_residual {
                v += importance.as_ref().expect("attention present")[t] * s[t][c];
            }
            out[t][c] = act(v, cfg.activation);
        }
    }
    out
}

/// Full model logits `[T][V]` by explicit loops.
pub fn naive_model_forward(ids: &[usize], params: &ModelParams, cfg: &TcanConfig) -> Matrix {
    let emb = to_matrix(&params.embedding);
    let mut s: Matrix = ids.iter().map(|&id| emb[id].clone()).collect();
    for (l, layer) in params.layers.iter().enumerate() {
        s = naive_tcan_block(&s, l + 1, layer, cfg);
    }
    let v = cfg.vocab_size;
    let bias = params.decoder_bias.data();
    s.iter()
        .map(|row| {
            (0..v)
                .map(|o| {
                    let dot: f64 = match &params.decoder {
                        Some(dec) => row.iter().enumerate().map(|(c, x)| x * dec.data()[c * v + o]).sum(),
                        None => row.iter().zip(&emb[o]).map(|(x, e)| x * e).sum(),
                    };
                    dot + bias[o]
                })
                .collect()
        })
        .collect()
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn naive_cross_entropy(logits: &Matrix, targets: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(row, &y)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            -(row[y] - m - z.ln())
        })
        .sum();
    total / targets.len() as f64
}
