use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use reidmamba::harness::bench::{bench_scaling, BENCH_HEADER};
use reidmamba::harness::checkpoint::{read_checkpoint, save_checkpoint, CheckpointError};
use reidmamba::harness::config::{parse_override, TrainConfig};
use reidmamba::harness::gradcheck::{run_gradcheck, SELECTORS};
use reidmamba::harness::train::{evaluate, output_dir, MetricsLog, Trainer};
use reidmamba::harness::data::generate_synthetic_dataset;

#[derive(Parser)]
#[command(name = "reidmamba", about = "Person re-identification with bidirectional state-space blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic dataset and write metrics, config and checkpoint.
    Train {
        /// `key = value` config file; defaults to the desk configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set steps=50`. Applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (default: ./runs).
        #[arg(long, env = "REIDMAMBA_OUTPUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the synthetic test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config file for the data settings; model settings come from the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// One of linear, dktau, ratr, triplet, scan, bimb, model, or `all`.
        #[arg(long, default_value = "all")]
        component: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Time a block forward pass against naive attention over token counts.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        tokens: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        /// CSV destination; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the manifest of a checkpoint file.
    InspectCheckpoint { path: PathBuf },
}

fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<TrainConfig> {
    let pairs = overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<reidmamba::Result<Vec<_>>>()?;
    Ok(match path {
        Some(p) => TrainConfig::from_file(p, &pairs).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::from_pairs(&pairs)?,
    })
}

fn train(config: Option<PathBuf>, overrides: Vec<String>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config.as_ref(), &overrides)?;
    cfg.validate()?;
    let dir = out.unwrap_or_else(output_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let mut log = MetricsLog::create(dir.join("metrics.csv"))?;
    let mut trainer = Trainer::new(cfg)?;
    log::info!(
        "{} parameters, {} training images",
        trainer.model.store.num_trainable(),
        trainer.data.train.samples.len()
    );
    let report = trainer.run(Some(&mut log))?;
    save_checkpoint(&trainer.model, dir.join("checkpoint.ckpt"))?;
    println!(
        "mAP {:.4}  R1 {:.4}  R5 {:.4}  R10 {:.4}  ktau_intra {}  ktau_inter {}",
        report.map,
        report.r1,
        report.r5,
        report.r10,
        fmt_opt(report.ktau_intra),
        fmt_opt(report.ktau_inter)
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn eval(checkpoint: PathBuf, config: Option<PathBuf>, overrides: Vec<String>) -> Result<()> {
    let ckpt = read_checkpoint(&checkpoint)?;
    let mut cfg = load_config(config.as_ref(), &overrides)?;
    cfg.model = ckpt.config.clone();
    cfg.data.train_identities = cfg.model.num_identities;
    cfg.data.num_cameras = cfg.model.num_cameras;
    cfg.data.height = cfg.model.image_height;
    cfg.data.width = cfg.model.image_width;
    let model = ckpt.into_model()?;
    let data = generate_synthetic_dataset(&cfg.data)?;
    let report = evaluate(&model, &data)?;
    println!(
        "mAP {:.4}  R1 {:.4}  R5 {:.4}  R10 {:.4}  ktau_intra {}  ktau_inter {}",
        report.map,
        report.r1,
        report.r5,
        report.r10,
        fmt_opt(report.ktau_intra),
        fmt_opt(report.ktau_inter)
    );
    Ok(())
}

fn gradcheck(component: &str, seed: u64, tolerance: f64) -> Result<()> {
    let selectors: Vec<&str> = if component == "all" { SELECTORS.to_vec() } else { vec![component] };
    let mut failed = Vec::new();
    for sel in selectors {
        let report = run_gradcheck(sel, seed)?;
        let worst = report.worst().map_or("-".to_string(), |w| w.name.clone());
        let err = report.max_rel_error();
        let ok = err <= tolerance;
        println!(
            "{:<8} {:>10.3e}  worst={worst}  {}",
            sel,
            err,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(sel);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn bench(tokens: Vec<usize>, width: usize, repeats: usize, out: Option<PathBuf>) -> Result<()> {
    let rows = bench_scaling(&tokens, width, repeats, 0)?;
    let mut text = format!("{BENCH_HEADER}\n");
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    match out {
        Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn inspect(path: PathBuf) -> Result<()> {
    let ckpt = read_checkpoint(&path)?;
    println!("version {}", ckpt.version);
    for (k, v) in reidmamba::harness::config::model_config_pairs(&ckpt.config) {
        println!("config {k} = {v}");
    }
    let mut total = 0;
    for e in &ckpt.entries {
        total += e.rows * e.cols;
        println!(
            "{:<40} {:>5} x {:<5} @ {:>9} {}",
            e.name,
            e.rows,
            e.cols,
            e.offset,
            if e.trainable { "param" } else { "buffer" }
        );
    }
    println!("{} tensors, {total} values", ckpt.entries.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, overrides, out } => train(config, overrides, out),
        Command::Eval { checkpoint, config, overrides } => eval(checkpoint, config, overrides),
        Command::Gradcheck { component, seed, tolerance } => gradcheck(&component, seed, tolerance),
        Command::Bench { tokens, width, repeats, out } => bench(tokens, width, repeats, out),
        Command::InspectCheckpoint { path } => inspect(path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(c) = e.downcast_ref::<CheckpointError>() {
                eprintln!("error [{}]: {c}", c.code());
                return ExitCode::from(3);
            }
            if let Some(reidmamba::Error::Checkpoint(c)) = e.downcast_ref::<reidmamba::Error>() {
                eprintln!("error [{}]: {c}", c.code());
                return ExitCode::from(3);
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
