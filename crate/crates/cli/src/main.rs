use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use fpt_core::backbone::{load_checkpoint, Variant};
use fpt_core::data::{generate_synthetic, write_csv, Dataset, SyntheticSpec};
use fpt_core::experiment::{
    run_experiment, run_probe, run_sweep, ExperimentConfig, Probe, RunMode,
};

#[derive(Parser)]
#[command(
    name = "fpt",
    version,
    about = "Frozen pretrained transformer experiments on time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    /// Few-shot fraction of the training split.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to the config's output_dir or runs/<name>-<hash>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and save a model.
    Train(Common),
    /// Evaluate a saved model on the configured dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model directory written by `train`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Evaluate a saved model on a dataset it was not trained on.
    ZeroShot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// One training run per training-data fraction.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.05,0.1,0.2,0.5,0.8,1.0"
        )]
        fractions: Vec<f64>,
    },
    /// Attention and representation probes.
    Analyze {
        #[arg(long)]
        probe: Probe,
        /// Needed by similarity, pca-sub, mix and conditioning.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
    /// Write a synthetic dataset: CSV for series, JSON for labelled sets.
    Synth {
        /// Generator spec as inline JSON or a path to a JSON file.
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint manifest summary.
    InspectCheckpoint { dir: PathBuf },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)
        .with_context(|| format!("reading {}", c.config.display()))?;
    if let Some(v) = c.variant {
        cfg.model.variant = v;
        cfg.train.variant = None;
    }
    if let Some(f) = c.fraction {
        cfg.train.few_shot_fraction = Some(f);
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &ExperimentConfig) -> Result<PathBuf> {
    if let Some(o) = &c.out {
        return Ok(o.clone());
    }
    if let Some(o) = &cfg.output_dir {
        return Ok(o.clone());
    }
    let hash = cfg.resolved().hash()?;
    Ok(Path::new("runs").join(format!("{}-{}", cfg.name, &hash[..12])))
}

fn run_mode(common: &Common, mode: RunMode) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common, &cfg)?;
    let s = run_experiment(&cfg, &mode, &out)?;
    print!(
        "{}",
        fs::read_to_string(out.join("summary.txt")).unwrap_or_default()
    );
    println!("run directory: {}", s.out_dir.display());
    Ok(())
}

fn read_spec(spec: &str) -> Result<SyntheticSpec> {
    let text = if spec.trim_start().starts_with('{') {
        spec.to_string()
    } else {
        fs::read_to_string(spec).with_context(|| format!("reading {spec}"))?
    };
    serde_json::from_str(&text).context("parsing synthetic spec")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => run_mode(&common, RunMode::Train),
        Command::Eval { common, model } => run_mode(&common, RunMode::Eval { model_dir: model }),
        Command::ZeroShot { common, model } => {
            run_mode(&common, RunMode::ZeroShot { model_dir: model })
        }
        Command::Sweep { common, fractions } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg)?;
            let rows = run_sweep(&cfg, &fractions, &out)?;
            println!(
                "{} sweep rows written to {}",
                rows.len(),
                out.join("sweep.csv").display()
            );
            Ok(())
        }
        Command::Analyze {
            probe,
            config,
            seed,
            out,
        } => {
            let cfg = config.as_deref().map(ExperimentConfig::load).transpose()?;
            if probe.needs_model() && cfg.is_none() {
                Cli::command()
                    .error(
                        ErrorKind::MissingRequiredArgument,
                        format!("probe `{probe}` needs --config"),
                    )
                    .exit();
            }
            let report = run_probe(probe, cfg.as_ref(), seed, &out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Synth { spec, seed, out } => {
            match generate_synthetic(&read_spec(&spec)?, seed)? {
                Dataset::Series(ts) => write_csv(&ts, &out)?,
                Dataset::Labeled(ls) => fs::write(&out, serde_json::to_string(&ls)?)
                    .with_context(|| format!("writing {}", out.display()))?,
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::InspectCheckpoint { dir } => {
            let ck = load_checkpoint::<f64>(&dir)?;
            let m = &ck.manifest;
            let b = &m.backbone;
            println!("version      {}", m.version);
            println!(
                "backbone     {} layers, d_model {}, {} heads, ffn {}, max_tokens {}",
                b.num_layers, b.d_model, b.num_heads, b.ffn_hidden, b.max_tokens
            );
            if let Some(c) = &m.config {
                println!("task         {}", c.task.name());
                println!("variant      {}", c.variant);
            }
            let scalars: usize = m
                .tensors
                .iter()
                .map(|t| t.shape.iter().product::<usize>())
                .sum();
            println!("tensors      {} ({} scalars)", m.tensors.len(), scalars);
            for t in &m.tensors {
                let tag = if t.trainable { "trainable" } else { "frozen" };
                println!("  {:<32} {:?} {:?} {tag}", t.name, t.shape, t.dtype);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
