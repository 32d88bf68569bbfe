//! Command-line experiment runner: sweeps clustering methods over
//! missing-ratio grids, or runs and inspects a single cell.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ddic::checkpoint::save_model;
use ddic::config::{
    apply_config_str, load_config, parse_label_column, parse_methods, DatasetSpec,
    ExperimentConfig, Method,
};
use ddic::experiment::{
    dump_reconstructions, load_dataset, run_cell_with_artifacts, sweep,
};
use ddic::{Error, Result};
use ddic_core::incomplete::{mean_fill, zero_fill};
use ddic_core::trainer::FillStrategy;

#[derive(Parser)]
#[command(
    name = "ddic",
    version,
    about = "Clustering experiments on feature-incomplete data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full (method x ratio x run) grid and write CSV tables.
    Sweep(SweepArgs),
    /// Run a single cell, print its metrics, and optionally save artifacts.
    Run(RunArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file of `key = value` lines; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data source: `blobs`, `idx:IMAGES:LABELS`, or `csv:PATH:LABEL`.
    #[arg(long)]
    dataset: Option<String>,
    /// Comma-separated methods, or `all`.
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated missing ratios in [0, 1].
    #[arg(long)]
    ratios: Option<String>,
    /// Independent runs per (method, ratio) cell.
    #[arg(long)]
    runs: Option<usize>,
    /// Clustering-term weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// Sinkhorn regularization strength.
    #[arg(long)]
    eps: Option<f64>,
    /// Base seed; every cell derives its own stream from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-run CSV path; aggregates land next to it as `<stem>_agg.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print per-epoch training progress and per-cell results to stderr.
    #[arg(long)]
    verbose: bool,
    /// Worker threads for independent cells.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Missing ratio for this cell.
    #[arg(long, default_value_t = 0.3)]
    ratio: f64,
    /// Run index within the cell (selects the seed stream).
    #[arg(long, default_value_t = 0)]
    run_index: usize,
    /// Save the trained model here (ddic-ot only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write original/filled/imputed rows here as CSV (ddic-ot only).
    #[arg(long)]
    dump: Option<PathBuf>,
    /// How many leading rows to dump.
    #[arg(long, default_value_t = 8)]
    dump_rows: usize,
}

fn parse_dataset_flag(value: &str, base: &DatasetSpec) -> Result<DatasetSpec> {
    if value == "blobs" {
        return Ok(match base {
            DatasetSpec::Blobs { .. } => base.clone(),
            _ => DatasetSpec::Blobs {
                n: 600,
                d: 50,
                k: 3,
                separation: 10.0,
                cluster_std: 1.0,
            },
        });
    }
    if let Some(rest) = value.strip_prefix("idx:") {
        let (images, labels) = rest.split_once(':').ok_or_else(|| {
            Error::Config("expected idx:IMAGES:LABELS with two paths".into())
        })?;
        return Ok(DatasetSpec::Idx {
            images: PathBuf::from(images),
            labels: PathBuf::from(labels),
        });
    }
    if let Some(rest) = value.strip_prefix("csv:") {
        let (path, label) = rest.split_once(':').ok_or_else(|| {
            Error::Config("expected csv:PATH:LABEL (LABEL is a header name or index)".into())
        })?;
        return Ok(DatasetSpec::Csv {
            path: PathBuf::from(path),
            label: parse_label_column(label),
            has_header: true,
        });
    }
    Err(Error::Config(format!(
        "unknown dataset '{value}' (expected blobs, idx:IMAGES:LABELS, or csv:PATH:LABEL)"
    )))
}

fn build_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(ds) = &common.dataset {
        cfg.dataset = parse_dataset_flag(ds, &cfg.dataset)?;
    }
    if let Some(methods) = &common.method {
        cfg.methods = parse_methods(methods)?;
    }
    if let Some(ratios) = &common.ratios {
        // Reuse the config-file list syntax for the flag value.
        cfg = apply_config_str(cfg, &format!("ratios = {ratios}"))?;
    }
    if let Some(runs) = common.runs {
        cfg.runs = runs;
    }
    if let Some(gamma) = common.gamma {
        cfg.train.gamma = gamma;
    }
    if let Some(eps) = common.eps {
        cfg.train.eps = eps;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if common.verbose {
        cfg.verbose = true;
    }
    if let Some(workers) = common.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_sweep(args: &SweepArgs) -> Result<ExitCode> {
    let cfg = build_config(&args.common)?;
    let summary = sweep(&cfg)?;
    println!("wrote {}", summary.data_path.display());
    println!("wrote {}", summary.agg_path.display());
    if summary.failures > 0 {
        eprintln!(
            "{} of {} cells failed",
            summary.failures,
            summary.results.len()
        );
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let cfg = build_config(&args.common)?;
    let method = match cfg.methods.as_slice() {
        [one] => *one,
        _ => Method::DdicOt,
    };
    let dataset = load_dataset(&cfg.dataset, cfg.train.seed)?;
    let artifacts = run_cell_with_artifacts(&dataset, &cfg, method, args.ratio, args.run_index)?;
    let result = &artifacts.result;
    let metrics = result.outcome.as_ref().expect("successful cell");
    println!(
        "dataset={} method={} ratio={} run={} seed={}",
        dataset.name,
        method.name(),
        result.ratio,
        result.run,
        result.seed
    );
    println!(
        "acc={:.6} nmi={:.6} purity={:.6} epochs={} wall_time_s={:.3}",
        metrics.acc, metrics.nmi, metrics.purity, metrics.epochs, metrics.wall_time_s
    );

    if args.checkpoint.is_some() || args.dump.is_some() {
        let fit = artifacts.fit.as_ref().ok_or_else(|| {
            Error::Config("checkpoints and dumps need the ddic-ot method".into())
        })?;
        if let Some(path) = &args.checkpoint {
            save_model(&fit.model, path)?;
            println!("wrote {}", path.display());
        }
        if let Some(path) = &args.dump {
            let filled = match cfg.train.fill {
                FillStrategy::Mean => mean_fill(&artifacts.masked),
                FillStrategy::Zero => zero_fill(&artifacts.masked),
            };
            let n = artifacts.masked.observed.rows();
            let rows: Vec<usize> = (0..args.dump_rows.min(n)).collect();
            dump_reconstructions(&artifacts.masked, &filled, fit, &rows, path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Sweep(args) => cmd_sweep(args),
        Command::Run(args) => cmd_run(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
