//! Attention-weight export as CSV matrices and binary PGM images.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tcan_core::nn::{model_forward, AttentionRecord};
use tcan_core::train::Checkpoint;
use tcan_core::Tensor;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapExport {
    pub layer: usize,
    pub len: usize,
    /// Kept weights: `Wa` with entries above the diagonal zeroed.
    pub csv: PathBuf,
    /// The full normalized matrix, including entries the output never reads.
    pub full_csv: PathBuf,
    pub pgm: PathBuf,
}

pub fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

/// 8-bit binary PGM with the matrix linearly rescaled from its min to its max.
pub fn matrix_pgm(m: &Tensor) -> Vec<u8> {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

/// Most common `t - argmax_j Wa[t][j]` over the given rows of the kept weights.
/// Ties between offsets go to the smaller one.
pub fn modal_offset(kept: &Tensor, rows: std::ops::Range<usize>) -> Option<usize> {
    let n = kept.shape()[0];
    let mut counts = vec![0usize; n];
    for t in rows.clone() {
        let row = &kept.data()[t * n..t * n + t + 1];
        let (arg, _) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best });
        counts[t - arg] += 1;
    }
    if rows.is_empty() {
        return None;
    }
    let max = *counts.iter().max()?;
    counts.iter().position(|&c| c == max)
}

/// Runs `text` through the checkpointed model and returns the attention
/// record of `layer` (1-indexed; defaults to the last level).
pub fn attention_for_text(ckpt: &Checkpoint, text: &str, layer: Option<usize>) -> Result<AttentionRecord> {
    let levels = ckpt.model.num_levels;
    if !ckpt.model.temporal_attention {
        return Err(CliError::argument("layer", "model has no attention layers"));
    }
    let layer = layer.unwrap_or(levels);
    if layer == 0 || layer > levels {
        return Err(CliError::argument(
            "layer",
            format!("{layer} is out of range; the model has layers 1..={levels}"),
        ));
    }
    let ids = ckpt.vocab.encode(text)?;
    if ids.is_empty() {
        return Err(CliError::argument("text", "sample encodes to no tokens"));
    }
    let out = model_forward(&ids, &ckpt.params, &ckpt.model)?;
    Ok(out
        .records
        .into_iter()
        .find(|r| r.layer == layer)
        .expect("one record per attention level"))
}

/// Writes `attn_L{n}.csv`, `attn_L{n}_full.csv` and `attn_L{n}.pgm` into `out_dir`.
pub fn export_attention_heatmap(
    checkpoint_dir: &Path,
    text: &str,
    layer: Option<usize>,
    out_dir: &Path,
) -> Result<(HeatmapExport, AttentionRecord)> {
    let ckpt = Checkpoint::load(checkpoint_dir)?;
    let record = attention_for_text(&ckpt, text, layer)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let kept = record.effective_weights();
    let n = record.layer;
    let export = HeatmapExport {
        layer: n,
        len: kept.shape()[0],
        csv: out_dir.join(format!("attn_L{n}.csv")),
        full_csv: out_dir.join(format!("attn_L{n}_full.csv")),
        pgm: out_dir.join(format!("attn_L{n}.pgm")),
    };
    let write = |p: &Path, bytes: &[u8]| fs::write(p, bytes).map_err(|e| CliError::io(p, e));
    write(&export.csv, matrix_csv(&kept).as_bytes())?;
    write(&export.full_csv, matrix_csv(&record.weights).as_bytes())?;
    write(&export.pgm, &matrix_pgm(&kept))?;
    Ok((export, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let m = Tensor::from_rows(&[vec![0.0, 0.5], vec![1.0, 0.25]]).unwrap();
        let bytes = matrix_pgm(&m);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 64]);
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        assert_eq!(matrix_csv(&m), "1,0\n0.5,0.5\n");
    }

    #[test]
    fn modal_offset_counts_argmax_distance() {
        // rows 1..4 peak one step back except row 2, which peaks on the diagonal
        let m = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.9, 0.1, 0.0, 0.0],
            vec![0.1, 0.2, 0.7, 0.0],
            vec![0.1, 0.1, 0.6, 0.2],
        ])
        .unwrap();
        assert_eq!(modal_offset(&m, 1..4), Some(1));
        assert_eq!(modal_offset(&m, 2..3), Some(0));
        assert_eq!(modal_offset(&m, 2..2), None);
    }
}
