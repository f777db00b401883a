use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use tcan_cli::ablation::{run_ablation, AblationKind, DEFAULT_STEPS};
use tcan_cli::config::LoadedConfig;
use tcan_cli::error::{CliError, Result, EXIT_OK};
use tcan_cli::heatmap::export_attention_heatmap;
use tcan_cli::run::{evaluate_checkpoint, parameter_breakdown, run_experiment};
use tcan_core::train::BEST_DIR;

#[derive(Debug, Parser)]
#[command(name = "tcan", version, about = "Train, evaluate and ablate TCAN language models")]
struct Cli {
    /// Experiment config (TOML), or a report.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train, then score the best checkpoint on the test split.
    Train {
        /// Continue from out_dir/last.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the validation and test splits.
    Eval {
        /// Defaults to out_dir/checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run an ablation sweep and write ablation.json / ablation.csv.
    Ablate {
        /// softmax_direction, ta_vs_conv or er_on_off
        #[arg(long)]
        kind: AblationKind,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
    },
    /// Export one layer's attention weights as CSV and PGM.
    ExportAttn {
        /// Defaults to out_dir/checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "text_file")]
        text: Option<String>,
        #[arg(long)]
        text_file: Option<PathBuf>,
        /// 1-indexed level; defaults to the last one.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Print per-tensor and total parameter counts.
    ParamCount,
}

fn load(cli: &Cli) -> Result<LoadedConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::argument("config", "this command needs --config"))?;
    let mut loaded = LoadedConfig::load(path)?;
    if let Some(seed) = cli.seed {
        loaded.set_seed(seed);
    }
    if let Some(dir) = &cli.out_dir {
        let dir = std::path::absolute(dir).map_err(|e| CliError::io(dir, e))?;
        loaded.set_out_dir(dir);
    }
    Ok(loaded)
}

/// Output directory from --out-dir, else from the config.
fn out_dir(cli: &Cli) -> Result<PathBuf> {
    match (&cli.out_dir, &cli.config) {
        (Some(dir), _) => Ok(dir.clone()),
        (None, Some(_)) => Ok(load(cli)?.out_dir()),
        (None, None) => Err(CliError::argument("out_dir", "give --out-dir or --config")),
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { resume } => {
            let out = run_experiment(&load(cli)?, *resume)?;
            let r = &out.report;
            println!(
                "steps {} best_valid_{m} {} test_{m} {} -> {}",
                r.steps,
                r.best_valid_metric.map_or("n/a".into(), |v| format!("{v:.4}")),
                r.test_metric.map_or("n/a".into(), |v| format!("{v:.4}")),
                out.out_dir.display(),
                m = r.metric.as_str(),
            );
        }
        Command::Eval { checkpoint } => {
            let loaded = load(cli)?;
            let dir = checkpoint.clone().unwrap_or_else(|| loaded.out_dir().join(BEST_DIR));
            print_json(&evaluate_checkpoint(&loaded, &dir)?);
        }
        Command::Ablate { kind, seeds, steps } => {
            let loaded = load(cli)?;
            let dir = loaded.out_dir().join(format!("ablation_{}", kind.as_str()));
            let table = run_ablation(*kind, &loaded, *seeds, *steps, Some(&dir))?;
            print!("{}", table.render());
            println!("wrote {}", dir.display());
        }
        Command::ExportAttn {
            checkpoint,
            text,
            text_file,
            layer,
        } => {
            let out = out_dir(cli)?;
            let dir = match checkpoint {
                Some(d) => d.clone(),
                None => out.join(BEST_DIR),
            };
            let sample = match (text, text_file) {
                (Some(t), _) => t.clone(),
                (None, Some(p)) => read(p)?,
                (None, None) => return Err(CliError::argument("text", "give --text or --text-file")),
            };
            let (export, _) = export_attention_heatmap(&dir, &sample, *layer, &out)?;
            print_json(&export);
        }
        Command::ParamCount => {
            let (rows, total) = parameter_breakdown(&load(cli)?)?;
            for (name, n) in rows {
                println!("{name:<28} {n}");
            }
            println!("{:<28} {total}", "total");
        }
    }
    Ok(())
}

fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
