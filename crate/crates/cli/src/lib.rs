//! Config-driven experiments on top of `tcan-core`: training runs,
//! ablation sweeps and attention heatmap export.

pub mod ablation;
pub mod config;
pub mod error;
pub mod heatmap;
pub mod run;

pub use ablation::{run_ablation, AblationKind, AblationTable};
pub use config::{ExperimentConfig, LoadedConfig};
pub use error::{CliError, Result};
pub use heatmap::export_attention_heatmap;
pub use run::{evaluate_checkpoint, run_experiment};
