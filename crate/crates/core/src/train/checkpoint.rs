//! `TCAN1` checkpoints: a JSON manifest plus one little-endian `f64` blob.
//!
//! ```text
//! <dir>/manifest.json   magic, model config, vocabulary, optimizer and
//!                       progress metadata, tensor table (name, shape, offset, len)
//! <dir>/tensors.bin     concatenated tensor data, 8 bytes per value
//! ```
//!
//! Offsets and lengths in the tensor table are in bytes. Parameter tensors
//! come first in model order, followed by `adam.m.<name>` and `adam.v.<name>`
//! when optimizer state is stored.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Level, Vocab};
use crate::error::{CheckpointError, Error, Result};
use crate::nn::{ModelParams, TcanConfig};
use crate::train::adam::{AdamConfig, AdamState};
use crate::train::TrainProgress;

pub const MAGIC: &str = "TCAN1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    magic: String,
    model: TcanConfig,
    level: Level,
    vocab: Vec<String>,
    optimizer: Option<OptimizerMeta>,
    progress: Option<TrainProgress>,
    #[serde(default)]
    extra: serde_json::Value,
    blob: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TcanConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    pub progress: Option<TrainProgress>,
    /// Free-form metadata, e.g. the experiment config that produced the run.
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob: Vec<u8> = Vec::new();
        let mut tensors = Vec::new();
        let mut put = |name: String, shape: Vec<usize>, data: &[f64]| {
            let offset = blob.len() as u64;
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape,
                offset,
                len: (data.len() * 8) as u64,
            });
        };
        let named = self.params.named();
        for (name, t) in &named {
            put(name.clone(), t.shape().to_vec(), t.data());
        }
        if let Some(adam) = &self.optimizer {
            for (((name, t), m), v) in named.iter().zip(&adam.m).zip(&adam.v) {
                put(format!("adam.m.{name}"), t.shape().to_vec(), m);
                put(format!("adam.v.{name}"), t.shape().to_vec(), v);
            }
        }
        let manifest = Manifest {
            magic: MAGIC.to_string(),
            model: self.model.clone(),
            level: self.vocab.level(),
            vocab: self.vocab.symbols().to_vec(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerMeta {
                config: a.config,
                step: a.step,
            }),
            progress: self.progress.clone(),
            extra: self.extra.clone(),
            blob: BLOB_FILE.to_string(),
            tensors,
        };
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.magic != MAGIC {
            return Err(CheckpointError::BadMagic(manifest.magic).into());
        }
        let blob_path = dir.join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

        let table: HashMap<&str, &TensorEntry> =
            manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        let read = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let entry = table
                .get(name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
            if entry.shape != shape {
                return Err(CheckpointError::Malformed(format!(
                    "{name}: stored shape {:?}, model expects {shape:?}",
                    entry.shape
                ))
                .into());
            }
            let numel: usize = shape.iter().product();
            let (start, len) = (entry.offset as usize, entry.len as usize);
            if len != numel * 8 || start + len > blob.len() {
                return Err(CheckpointError::Malformed(format!("{name}: bad extent")).into());
            }
            Ok(blob[start..start + len]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect())
        };

        manifest.model.validate()?;
        let mut params = ModelParams::init(&manifest.model)?;
        let names: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), t) in names.iter().zip(params.tensors_mut()) {
            let data = read(name, shape)?;
            t.data_mut().copy_from_slice(&data);
        }
        let optimizer = match &manifest.optimizer {
            None => None,
            Some(meta) => {
                let mut m = Vec::with_capacity(names.len());
                let mut v = Vec::with_capacity(names.len());
                for (name, shape) in &names {
                    m.push(read(&format!("adam.m.{name}"), shape)?);
                    v.push(read(&format!("adam.v.{name}"), shape)?);
                }
                Some(AdamState {
                    config: meta.config,
                    step: meta.step,
                    m,
                    v,
                })
            }
        };
        Ok(Self {
            vocab: Vocab::from_symbols(manifest.vocab, manifest.level),
            model: manifest.model,
            params,
            optimizer,
            progress: manifest.progress,
            extra: manifest.extra,
        })
    }
}
