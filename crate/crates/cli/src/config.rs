//! Flat experiment config, read from TOML or from a previous `report.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tcan_core::data::{Corpus, Level};
use tcan_core::error::ConfigError;
use tcan_core::nn::{Activation, MaskMode, SoftmaxDirection, TcanConfig};
use tcan_core::train::{AdamConfig, TrainConfig};

use crate::error::{CliError, Result};

/// Every model and training knob of one run. Relative paths resolve against
/// the directory of the file the config was read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train_path: PathBuf,
    pub valid_path: PathBuf,
    pub test_path: PathBuf,
    pub level: Level,
    /// Inferred from the corpus when absent; checked against it when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    pub d_embed: usize,
    pub d_attn: usize,
    pub kernel_size: usize,
    pub num_levels: usize,
    pub blocks_per_level: usize,
    pub softmax_direction: SoftmaxDirection,
    pub mask_mode: MaskMode,
    pub use_enhanced_residual: bool,
    pub use_values_for_output: bool,
    pub temporal_attention: bool,
    pub activation: Activation,
    pub dropout: f64,
    pub tie_decoder: bool,
    pub seed: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub lr: f64,
    /// Gradient-norm bound; 0 disables clipping.
    pub clip: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = TcanConfig::default();
        let train = TrainConfig::default();
        Self {
            train_path: PathBuf::new(),
            valid_path: PathBuf::new(),
            test_path: PathBuf::new(),
            level: Level::Char,
            vocab_size: None,
            d_embed: model.d_embed,
            d_attn: model.d_attn,
            kernel_size: model.kernel_size,
            num_levels: model.num_levels,
            blocks_per_level: model.blocks_per_level,
            softmax_direction: model.softmax_direction,
            mask_mode: model.mask_mode,
            use_enhanced_residual: model.use_enhanced_residual,
            use_values_for_output: model.use_values_for_output,
            temporal_attention: model.temporal_attention,
            activation: model.activation,
            dropout: model.dropout,
            tie_decoder: model.tie_decoder,
            seed: model.seed,
            batch_size: train.batch_size,
            seq_len: train.seq_len,
            epochs: train.epochs,
            max_steps: train.max_steps,
            lr: train.adam.lr,
            clip: train.clip.unwrap_or(0.0),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// One differing field between two configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldChange {
    pub field: String,
    pub from: Value,
    pub to: Value,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Parse {
            path: origin.to_path_buf(),
            message: e.message().to_string(),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn from_json(value: &Value, origin: &Path) -> Result<Self> {
        Self::deserialize(value).map_err(|e| CliError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Model hyperparameters for a corpus with `vocab_size` symbols.
    pub fn model(&self, vocab_size: usize) -> TcanConfig {
        TcanConfig {
            vocab_size,
            d_embed: self.d_embed,
            d_attn: self.d_attn,
            kernel_size: self.kernel_size,
            num_levels: self.num_levels,
            blocks_per_level: self.blocks_per_level,
            softmax_direction: self.softmax_direction,
            mask_mode: self.mask_mode,
            use_enhanced_residual: self.use_enhanced_residual,
            use_values_for_output: self.use_values_for_output,
            temporal_attention: self.temporal_attention,
            activation: self.activation,
            dropout: self.dropout,
            tie_decoder: self.tie_decoder,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            epochs: self.epochs,
            max_steps: self.max_steps,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            clip: (self.clip > 0.0).then_some(self.clip),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, path) in [
            ("train_path", &self.train_path),
            ("valid_path", &self.valid_path),
            ("test_path", &self.test_path),
        ] {
            if path.as_os_str().is_empty() {
                return Err(ConfigError::new(field, "must be set"));
            }
        }
        if self.vocab_size == Some(0) {
            return Err(ConfigError::new("vocab_size", "must be at least 1"));
        }
        if !(self.clip >= 0.0 && self.clip.is_finite()) {
            return Err(ConfigError::new("clip", "must be a finite non-negative number"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(ConfigError::new("seed", "must fit in a signed 64-bit TOML integer"));
        }
        if self.max_steps == Some(0) {
            return Err(ConfigError::new("max_steps", "must be at least 1"));
        }
        self.model(self.vocab_size.unwrap_or(1)).validate()?;
        self.train().validate()
    }

    /// Fields whose values differ, in declaration order.
    pub fn diff(&self, other: &Self) -> Vec<FieldChange> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (Value::Object(a), Value::Object(b)) = (a, b) else {
            unreachable!("config is a struct")
        };
        Self::field_names()
            .into_iter()
            .filter(|k| a.get(k) != b.get(k))
            .map(|k| FieldChange {
                from: a.get(&k).cloned().unwrap_or(Value::Null),
                to: b.get(&k).cloned().unwrap_or(Value::Null),
                field: k,
            })
            .collect()
    }

    /// Serialized field names in declaration order.
    fn field_names() -> Vec<String> {
        let probe = Self {
            vocab_size: Some(1),
            max_steps: Some(1),
            ..Self::default()
        };
        match serde_json::to_value(probe) {
            Ok(Value::Object(map)) => map.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }
}

/// A parsed config plus what is needed to run and echo it.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Directory that relative paths resolve against.
    pub base_dir: PathBuf,
    /// The config as written by the user, with command-line overrides applied.
    pub echo: Value,
}

impl LoadedConfig {
    /// Reads a TOML config, or the `config` echo of a `report.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parent = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let parent = fs::canonicalize(if parent.as_os_str().is_empty() { Path::new(".") } else { &parent })
            .map_err(|e| CliError::io(&parent, e))?;

        if path.extension().is_some_and(|e| e == "json") {
            let report: Value = serde_json::from_str(&text).map_err(|e| CliError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            let echo = report.get("config").cloned().unwrap_or(report.clone());
            let base_dir = report
                .get("base_dir")
                .and_then(Value::as_str)
                .map(PathBuf::from)
                .unwrap_or(parent);
            let config = ExperimentConfig::from_json(&echo, path)?;
            return Ok(Self {
                config,
                base_dir,
                echo,
            });
        }

        let config = ExperimentConfig::from_toml_str(&text, path)?;
        let raw: toml::Table = toml::from_str(&text).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            message: e.message().to_string(),
        })?;
        let echo = serde_json::to_value(raw).map_err(tcan_core::Error::from)?;
        Ok(Self {
            config,
            base_dir: parent,
            echo,
        })
    }

    /// Wraps an in-memory config; `echo` is its full serialization.
    pub fn from_config(config: ExperimentConfig, base_dir: impl Into<PathBuf>) -> Self {
        let echo = serde_json::to_value(&config).expect("config serializes");
        Self {
            config,
            base_dir: base_dir.into(),
            echo,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.config.seed = seed;
        self.echo["seed"] = Value::from(seed);
    }

    pub fn set_out_dir(&mut self, dir: PathBuf) {
        self.echo["out_dir"] = Value::from(dir.to_string_lossy().into_owned());
        self.config.out_dir = dir;
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.out_dir)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let c = &self.config;
        Ok(Corpus::load(
            &self.resolve(&c.train_path),
            &self.resolve(&c.valid_path),
            &self.resolve(&c.test_path),
            c.level,
        )?)
    }

    /// Validates, loads the corpus, and fixes the vocabulary size.
    pub fn prepare(&self) -> Result<(Corpus, TcanConfig)> {
        self.config.validate()?;
        let corpus = self.load_corpus()?;
        let v = corpus.vocab.len();
        if let Some(given) = self.config.vocab_size {
            if given != v {
                return Err(ConfigError::new(
                    "vocab_size",
                    format!("config says {given} but the corpus has {v} symbols"),
                )
                .into());
            }
        }
        Ok((corpus, self.config.model(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("d_embed = 4\nlearning_rate = 1.0\n", Path::new("x.toml"))
            .unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert_eq!(err.exit_code(), crate::error::EXIT_CONFIG);
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = ExperimentConfig::from_toml_str("d_embed = 4\n", Path::new("x.toml")).unwrap();
        assert_eq!(cfg.d_embed, 4);
        assert_eq!(cfg.kernel_size, ExperimentConfig::default().kernel_size);
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = ExperimentConfig {
            train_path: "a".into(),
            valid_path: "b".into(),
            test_path: "c".into(),
            dropout: 1.5,
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "dropout");
        let cfg = ExperimentConfig {
            dropout: 0.0,
            ..cfg
        };
        assert!(cfg.validate().is_ok());
        assert_eq!(ExperimentConfig::default().validate().unwrap_err().field, "train_path");
    }

    #[test]
    fn clip_zero_disables_clipping() {
        let cfg = ExperimentConfig {
            clip: 0.0,
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.train().clip, None);
    }

    #[test]
    fn diff_lists_only_changed_fields() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            softmax_direction: SoftmaxDirection::Mixed,
            max_steps: Some(5),
            ..a.clone()
        };
        let d = a.diff(&b);
        let fields: Vec<&str> = d.iter().map(|c| c.field.as_str()).collect();
        assert_eq!(fields, ["softmax_direction", "max_steps"]);
        assert_eq!(d[0].to, Value::from("mixed"));
        assert_eq!(d[1].from, Value::Null);
        assert!(a.diff(&a).is_empty());
    }
}
