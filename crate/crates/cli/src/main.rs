use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use feddisc_core::experiment::{self, SweepAxis};
use feddisc_core::{Checkpoint, Environment, ExperimentConfig, Method, RunRecord};

#[derive(Parser)]
#[command(
    name = "feddisc",
    version,
    about = "One-shot semi-supervised federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; defaults are used for anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `protocol.num_centroids=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replaces the configured seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus and encoder and write them to the output directory.
    Corpus(Common),
    /// Pre-train the conditional denoiser on the public pretraining set.
    Pretrain(Common),
    /// Run one method for every seed.
    Run {
        #[command(flatten)]
        common: Common,
        /// feddisc, finetune_centroids, proto_zeroshot or oracle_upperbound;
        /// overrides the configured method
        #[arg(long)]
        method: Option<Method>,
    },
    /// Vary L or R over a list of values.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// L (centroids per category) or R (samples per centroid)
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. `1,3,5,10`
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Full run and the two single-condition ablations.
    Ablate(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if !common.seeds.is_empty() {
        cfg.seeds = common.seeds.clone();
    }
    if let Some(out) = &common.out {
        cfg.paths.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let path = &cfg.paths.checkpoint;
    Checkpoint::load(path).with_context(|| {
        format!(
            "no usable checkpoint at {}; run `feddisc pretrain` first",
            path.display()
        )
    })
}

fn finish(dir: &Path, cfg: &ExperimentConfig, records: &[RunRecord]) -> Result<()> {
    experiment::write_outputs(dir, cfg, records)?;
    for m in experiment::variant_means(records) {
        println!(
            "{:<20} {:<14} seeds={} mean_accuracy={:.4} uplink={}B downlink={}B",
            m.method.name(),
            m.variant,
            m.seeds,
            m.mean_average_accuracy,
            m.uplink_bytes,
            m.downlink_bytes
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Corpus(common) => {
            let cfg = load_config(&common)?;
            let env = Environment::build(&cfg)?;
            let dir = &cfg.paths.out_dir;
            std::fs::create_dir_all(dir)?;
            env.corpus.save(&dir.join("corpus.bin"))?;
            env.featurizer.save(&dir.join("featurizer.bin"))?;
            println!(
                "corpus: {} categories, {} clients, {} pretraining samples; featurizer id {:016x}",
                env.corpus.num_categories(),
                env.corpus.num_clients(),
                env.corpus.pretrain_set.len(),
                env.featurizer.id()
            );
            println!("wrote {}", dir.display());
        }
        Command::Pretrain(common) => {
            let cfg = load_config(&common)?;
            let env = Environment::build(&cfg)?;
            let started = Instant::now();
            let (ckpt, report) = experiment::pretrain(&env, &cfg)?;
            let path = &cfg.paths.checkpoint;
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            ckpt.save(path)?;
            println!(
                "epochs={} first_loss={:.6} last_loss={:.6} seconds={:.1}",
                report.epoch_losses.len(),
                report.first_loss().unwrap_or(f64::NAN),
                report.last_loss().unwrap_or(f64::NAN),
                started.elapsed().as_secs_f64()
            );
            println!("wrote {}", path.display());
        }
        Command::Run { common, method } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = method {
                cfg.method = m;
            }
            let env = Environment::build(&cfg)?;
            let ckpt = match cfg.method.needs_checkpoint() {
                true => Some(load_checkpoint(&cfg)?),
                false => None,
            };
            let records = experiment::run_seeds(&env, ckpt.as_ref(), &cfg, "default")?;
            finish(&cfg.paths.out_dir, &cfg, &records)?;
        }
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let cfg = load_config(&common)?;
            let env = Environment::build(&cfg)?;
            let ckpt = match cfg.method.needs_checkpoint() {
                true => Some(load_checkpoint(&cfg)?),
                false => None,
            };
            let records = experiment::sweep(&env, ckpt.as_ref(), &cfg, axis, &values)?;
            finish(&cfg.paths.out_dir, &cfg, &records)?;
        }
        Command::Ablate(common) => {
            let cfg = load_config(&common)?;
            let env = Environment::build(&cfg)?;
            let ckpt = load_checkpoint(&cfg)?;
            let records = experiment::ablate(&env, Some(&ckpt), &cfg)?;
            finish(&cfg.paths.out_dir, &cfg, &records)?;
        }
    }
    Ok(())
}
