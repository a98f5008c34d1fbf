//! `mlaan`: train, evaluate and analyse local-learning runs.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime
//! failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mlaan_core::checkpoint::peek_header;
use mlaan_core::config::ExperimentConfig;
use mlaan_core::data::Resize;
use mlaan_core::experiment::{self, DatasetSource};
use mlaan_core::trainer::TrainerKind;
use mlaan_core::{Element, Precision};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "mlaan", version, about = "Supervised local learning with multilaminar modules and leap-augmented heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct OutArg {
    /// Output directory [default: the config's output.dir, else ./out]
    #[arg(long, env = "MLAAN_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration, writing metrics.csv and checkpoint.mlnn after every epoch
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written under the same configuration
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Test error of a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// idx:IMAGES,LABELS | cifar10bin:FILE[,FILE...] | synthetic[:SEED]
        #[arg(long)]
        dataset: DatasetSource,
        /// none | nearest | area
        #[arg(long, default_value = "none")]
        resize: Resize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Linear-probe error of one feature layer, or of all of them
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "all", required_unless_present = "all")]
        layer: Option<usize>,
        #[arg(long)]
        all: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Layerwise linear CKA between two checkpoints with the same main path
    Cka {
        #[arg(long = "checkpoint-a")]
        checkpoint_a: PathBuf,
        #[arg(long = "checkpoint-b")]
        checkpoint_b: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Peak retained activations of one step per mode, and over K in {1,2,4,8}
    Memstat {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train every mode in the grid for every seed and summarize
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated modes, e.g. greedy_local,mlm_only,lam_only,mlaan
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<TrainerKind>,
        /// Comma-separated seeds [default: the config's run.seed]
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        out: OutArg,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // a cause is often already spelled out in its parent's message
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            let validation = e.chain().any(|c| c.downcast_ref::<mlaan_core::Error>().is_some_and(|e| e.is_validation()));
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, resume, out } => {
            let cfg = load_config(&config)?;
            let dir = out_dir(&out, Some(&cfg));
            match cfg.run.precision {
                Precision::F32 => train::<f32>(&cfg, &dir, resume.as_deref()),
                Precision::F64 => train::<f64>(&cfg, &dir, resume.as_deref()),
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            resize,
            out,
        } => {
            let report = match precision_of(&checkpoint)? {
                Precision::F32 => experiment::eval_checkpoint::<f32>(&checkpoint, &dataset, resize)?,
                Precision::F64 => experiment::eval_checkpoint::<f64>(&checkpoint, &dataset, resize)?,
            };
            emit(&out_dir(&out, None), "eval.json", &report)
        }
        Command::Probe { checkpoint, layer, out, .. } => {
            let rows = match precision_of(&checkpoint)? {
                Precision::F32 => experiment::probe_checkpoint::<f32>(&checkpoint, layer)?,
                Precision::F64 => experiment::probe_checkpoint::<f64>(&checkpoint, layer)?,
            };
            emit(&out_dir(&out, None), "probe.json", &rows)
        }
        Command::Cka {
            checkpoint_a,
            checkpoint_b,
            out,
        } => {
            let pa = precision_of(&checkpoint_a)?;
            let pb = precision_of(&checkpoint_b)?;
            if pa != pb {
                return Err(mlaan_core::Error::validation("checkpoint", "the two checkpoints use different precisions").into());
            }
            let report = match pa {
                Precision::F32 => experiment::cka_checkpoints::<f32>(&checkpoint_a, &checkpoint_b)?,
                Precision::F64 => experiment::cka_checkpoints::<f64>(&checkpoint_a, &checkpoint_b)?,
            };
            emit(&out_dir(&out, None), "cka.json", &report.layers)
        }
        Command::Memstat { config, out } => {
            let cfg = load_config(&config)?;
            let report = match cfg.run.precision {
                Precision::F32 => experiment::memstat::<f32>(&cfg)?,
                Precision::F64 => experiment::memstat::<f64>(&cfg)?,
            };
            emit(&out_dir(&out, Some(&cfg)), "memstat.json", &report)
        }
        Command::Ablate { config, grid, seeds, out } => {
            let cfg = load_config(&config)?;
            let seeds = if seeds.is_empty() { vec![cfg.run.seed] } else { seeds };
            let dir = out_dir(&out, Some(&cfg));
            let rows = match cfg.run.precision {
                Precision::F32 => experiment::ablate::<f32>(&cfg, &grid, &seeds, &dir)?,
                Precision::F64 => experiment::ablate::<f64>(&cfg, &grid, &seeds, &dir)?,
            };
            for r in &rows {
                print(&format!(
                    "{:<13} mean {:.4} std {:.4} best {:.4} peak {}",
                    r.mode.name(),
                    r.mean_test_error,
                    r.std_test_error,
                    r.best_test_error,
                    r.peak_elements
                ))?;
            }
            eprintln!("wrote {}", dir.join("summary.csv").display());
            Ok(())
        }
    }
}

fn out_dir(arg: &OutArg, cfg: Option<&ExperimentConfig>) -> PathBuf {
    arg.out
        .clone()
        .or_else(|| cfg.map(|c| c.output.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(mlaan_core::Error::validation("--config", format!("{} is not a readable file", path.display())).into());
    }
    Ok(ExperimentConfig::load(path)?)
}

fn precision_of(checkpoint: &Path) -> Result<Precision> {
    if !checkpoint.is_file() {
        return Err(mlaan_core::Error::validation("--checkpoint", format!("{} is not a readable file", checkpoint.display())).into());
    }
    Ok(peek_header(checkpoint)?.precision)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn train<T: Element>(cfg: &ExperimentConfig, dir: &Path, resume: Option<&Path>) -> Result<()> {
    let total = cfg.run.epochs;
    let outcome = experiment::train::<T>(cfg, dir, resume, |r| {
        eprintln!(
            "epoch {:>3}/{total}  loss {:.4}  test_error {:.4}  lr {:.5}  {:.1}s",
            r.epoch, r.train_loss, r.test_error, r.lr, r.wall_time_s
        );
    })?;
    print(&serde_json::to_string_pretty(&outcome.test)?)?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

/// Prints `value` as JSON and writes it to `dir/name`.
fn emit<S: Serialize>(dir: &Path, name: &str, value: &S) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
    print(&json)
}
