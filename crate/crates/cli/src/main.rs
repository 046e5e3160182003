//! `pso`: train, evaluate and diagnose probabilistic-surface models from
//! flat config files. See the repository README for the config reference.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pso_cli::runner;
use pso_core::kernel::ScanKind;

#[derive(Parser)]
#[command(name = "pso", version, about = "Probabilistic surface optimization runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum DiagModeArg {
    Scan,
    Gramian,
    Differential,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScanKindArg {
    Raw,
    Relative,
    Cosine,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training experiment from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output.dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute metrics for a checkpoint on a fresh seeded test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test-set seed (use the training seed to reproduce trainer rows).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        test_size: usize,
        /// Also write the report to this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Kernel diagnostics of a checkpoint.
    Diag {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: DiagModeArg,
        /// Number of probe points (half data draws, half down draws).
        #[arg(long, default_value_t = 100)]
        probes: usize,
        /// Similarity kind for scan mode.
        #[arg(long, value_enum, default_value_t = ScanKindArg::Raw)]
        kind: ScanKindArg,
        /// Comma-separated step sizes for differential mode.
        #[arg(long, default_value = "1e-3")]
        deltas: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Numerically check the convergence conditions of a registry instance.
    Feasibility {
        #[arg(long)]
        instance: String,
        /// Instance parameters as key=value (repeatable), e.g. --param alpha=0.25
        #[arg(long = "param")]
        params: Vec<String>,
        #[arg(long, default_value_t = 300)]
        grid_points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump distribution samples (or the embedded transform matrix) to CSV.
    Sample {
        /// Take the distribution from a config file's data section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Distribution name (columns | transformed_columns).
        #[arg(long)]
        distribution: Option<String>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Export the embedded 20x20 transform matrix instead of samples.
        #[arg(long)]
        matrix_a: bool,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Train { config, seed, out } => runner::run_train(&config, seed, out),
        Cmd::Eval {
            checkpoint,
            seed,
            test_size,
            out,
        } => runner::run_eval(&checkpoint, seed, test_size, out),
        Cmd::Diag {
            checkpoint,
            mode,
            probes,
            kind,
            deltas,
            seed,
            out,
        } => {
            let mode = match mode {
                DiagModeArg::Scan => runner::DiagMode::Scan(match kind {
                    ScanKindArg::Raw => ScanKind::Raw,
                    ScanKindArg::Relative => ScanKind::Relative,
                    ScanKindArg::Cosine => ScanKind::Cosine,
                }),
                DiagModeArg::Gramian => runner::DiagMode::Gramian,
                DiagModeArg::Differential => {
                    let deltas: Vec<f64> = deltas
                        .split(',')
                        .map(|t| {
                            t.trim()
                                .parse::<f64>()
                                .map_err(|e| anyhow!("bad --deltas entry `{t}`: {e}"))
                        })
                        .collect::<Result<_>>()?;
                    if deltas.is_empty() {
                        bail!("--deltas must name at least one step size");
                    }
                    runner::DiagMode::Differential { deltas }
                }
            };
            runner::run_diag(&checkpoint, mode, probes, seed, out)
        }
        Cmd::Feasibility {
            instance,
            params,
            grid_points,
            out,
        } => {
            let parsed: Vec<(String, f64)> = params
                .iter()
                .map(|kv| {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| anyhow!("--param expects key=value, got `{kv}`"))?;
                    Ok((
                        k.trim().to_string(),
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| anyhow!("--param {k}: {e}"))?,
                    ))
                })
                .collect::<Result<_>>()?;
            runner::run_feasibility(&instance, &parsed, grid_points, out)
        }
        Cmd::Sample {
            config,
            distribution,
            dim,
            count,
            seed,
            out,
            matrix_a,
        } => runner::run_sample(config, distribution, dim, count, seed, out, matrix_a),
    }
}
