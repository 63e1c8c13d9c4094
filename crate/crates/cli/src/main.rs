//! `aero`: train, analyze, transform and report.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aero_core::cost::{self, CostReport, UnitCostTable};
use aero_core::model::transform;
use aero_core::train::{self, metrics, TrainConfig};
use aero_core::{AeroError, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "aero", version, about = "Nonlinearity-reduced transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a byte-level corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "train-config")]
        train_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// FFN and attention FLOPs for one forward pass.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        context: usize,
        #[arg(long)]
        csv: bool,
        /// Also report the vocabulary projection FLOPs.
        #[arg(long)]
        verbose: bool,
        /// Unit-cost table for a linear communication/latency estimate.
        #[arg(long)]
        units: Option<PathBuf>,
    },
    /// Nonlinear-operation census.
    Census {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        context: usize,
    },
    /// Entropy heatmap CSV and bucket summary from a metrics stream.
    EntropyReport {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge the two linear FFN layers of a checkpoint.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// FLOPs and census table for several configs.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        context: usize,
        #[arg(long)]
        csv: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Warn).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let line = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_internal() { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, train_config, out } => cmd_train(&config, &train_config, &out),
        Command::Flops { config, context, csv, verbose, units } => {
            cmd_flops(&config, context, csv, verbose, units.as_deref())
        }
        Command::Census { config, context } => cmd_census(&config, context),
        Command::EntropyReport { metrics, out } => cmd_entropy_report(&metrics, &out),
        Command::Fuse { checkpoint, config, out } => cmd_fuse(&checkpoint, &config, &out),
        Command::Compare { configs, context, csv } => cmd_compare(&configs, context, csv),
    }
}

fn cmd_train(config: &Path, train_config: &Path, out: &Path) -> Result<()> {
    let model_cfg = ModelConfig::load(config)?;
    let train_cfg = TrainConfig::load(train_config)?;
    let outcome = train::run_training_to_dir(&model_cfg, &train_cfg, out)?;
    println!(
        "{}: {} steps, train loss {:.4} -> {:.4}",
        model_cfg.display_name(),
        outcome.steps_run,
        outcome.initial_train_loss(),
        outcome.final_train_loss()
    );
    if let Some(ev) = outcome.first_nan {
        let layer = ev.layer.map_or("none".to_string(), |l| l.to_string());
        println!("first NaN at step {} (layer {layer}); {} NaN steps", ev.step, outcome.nan_steps);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_flops(config: &Path, context: usize, csv: bool, verbose: bool, units: Option<&Path>) -> Result<()> {
    let cfg = ModelConfig::load(config)?;
    let mut report = CostReport::new(&cfg, context);
    if verbose {
        report = report.with_head_flops(&cfg);
    }
    if let Some(path) = units {
        report = report.with_estimate(&UnitCostTable::load(path)?);
    }
    if csv {
        print!("{}", cost::render_csv(std::slice::from_ref(&report))?);
        return Ok(());
    }
    println!("{}  T={context}", report.config);
    println!(
        "FFN {}  Attn {}  Total {}  ffn_share {:.3}",
        cost::render_billions(report.ffn_flops),
        cost::render_billions(report.attention_flops),
        cost::render_billions(report.total_flops),
        report.ffn_share
    );
    println!(
        "exact: ffn {} attn {} total {}",
        report.ffn_flops, report.attention_flops, report.total_flops
    );
    println!("crossover 8d/3 = {:.1}", cost::crossover_context(cfg.d_model));
    if let Some(h) = report.head_flops {
        println!("vocab projection {} ({h}, not in totals)", cost::render_billions(h));
    }
    if let Some(e) = &report.estimated_cost {
        println!("estimate: {:.6e} bytes  {:.6e} s (linear unit-cost model)", e.comm_bytes, e.latency_seconds);
    }
    Ok(())
}

fn cmd_census(config: &Path, context: usize) -> Result<()> {
    let cfg = ModelConfig::load(config)?;
    for entry in cost::nonlinear_census(&cfg, context) {
        println!("{entry}");
    }
    Ok(())
}

fn cmd_entropy_report(metrics_path: &Path, out: &Path) -> Result<()> {
    let records = train::read_metrics(metrics_path)?;
    let snapshots: Vec<_> = records.iter().filter_map(|r| r.snapshot()).collect();
    if snapshots.is_empty() {
        return Err(AeroError::Ingestion(format!(
            "{} holds no entropy snapshots",
            metrics_path.display()
        )));
    }
    let heatmap = metrics::entropy_heatmap_csv(&snapshots)?;
    std::fs::write(out, heatmap).map_err(|e| AeroError::io(out, e))?;
    print!("{}", metrics::entropy_bucket_csv(&snapshots)?);
    Ok(())
}

fn cmd_fuse(checkpoint: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = ModelConfig::load(config)?;
    let model = train::load_checkpoint(checkpoint)?;
    let mut stored = model.config().clone();
    stored.name.clone_from(&cfg.name);
    if stored != cfg {
        return Err(AeroError::config(
            "config",
            format!("{} does not describe the model stored in {}", config.display(), checkpoint.display()),
        ));
    }
    let fused = transform::fuse_model(&model)?;
    let seq = cfg.max_context.min(32);
    let residual = transform::logit_residual(&model, &fused, 4, 2, seq, cfg.seed)?;
    train::save_checkpoint(&fused, out)?;
    let cfg_path = out.with_extension("cfg");
    std::fs::write(&cfg_path, fused.config().to_kv()).map_err(|e| AeroError::io(&cfg_path, e))?;
    println!("{} -> {}", cfg.display_name(), fused.config().display_name());
    println!("max |delta logits| = {residual:.3e}");
    println!("wrote {} and {}", out.display(), cfg_path.display());
    Ok(())
}

fn cmd_compare(configs: &[PathBuf], context: usize, csv: bool) -> Result<()> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut reports = Vec::with_capacity(configs.len());
    for path in configs {
        let cfg = ModelConfig::load(path)?;
        let mut report = CostReport::new(&cfg, context);
        let n = seen.entry(report.config.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            report.config = format!("{} ({n})", report.config);
        }
        reports.push(report);
    }
    if csv {
        print!("{}", cost::render_csv(&reports)?);
    } else {
        print!("{}", cost::render_table(&reports));
    }
    Ok(())
}
