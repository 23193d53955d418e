//! Command-line front end: one subcommand per pipeline stage, all driven by
//! the same configuration file. Exit codes distinguish configuration errors
//! (2) and missing stage prerequisites (3) from other failures (1).

use std::path::PathBuf;
use std::process;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use pli::config::PipelineConfig;
use pli::error::{Error, Result};
use pli::pipeline;

#[derive(Parser)]
#[command(name = "pli", version, about = "Desk-scale 3D-PLI analysis pipeline")]
struct Cli {
    #[command(subcommand)]
    stage: Stage,
}

#[derive(Args)]
struct StageOpts {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override every seed in the configuration with one master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap the worker-thread count.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Stage {
    /// Generate the synthetic phantom and its ground truth.
    Phantom(StageOpts),
    /// Simulate the measurement stacks and fit parameter maps.
    Signal(StageOpts),
    /// Train the contrastive texture encoder.
    Train(StageOpts),
    /// Sliding-window encoder features for all sections.
    Featmap(StageOpts),
    /// Classical anisotropy/transmittance features.
    Baseline(StageOpts),
    /// Depth-sample features along the layered surfaces.
    Surface(StageOpts),
    /// Confound regression and principal-component projection.
    Reduce(StageOpts),
    /// Subset clustering, metrics, and unfolded maps.
    Cluster(StageOpts),
    /// The full method-comparison table.
    Table1(StageOpts),
}

impl Stage {
    fn name(&self) -> &'static str {
        match self {
            Stage::Phantom(_) => "phantom",
            Stage::Signal(_) => "signal",
            Stage::Train(_) => "train",
            Stage::Featmap(_) => "featmap",
            Stage::Baseline(_) => "baseline",
            Stage::Surface(_) => "surface",
            Stage::Reduce(_) => "reduce",
            Stage::Cluster(_) => "cluster",
            Stage::Table1(_) => "table1",
        }
    }

    fn opts(&self) -> &StageOpts {
        match self {
            Stage::Phantom(o)
            | Stage::Signal(o)
            | Stage::Train(o)
            | Stage::Featmap(o)
            | Stage::Baseline(o)
            | Stage::Surface(o)
            | Stage::Reduce(o)
            | Stage::Cluster(o)
            | Stage::Table1(o) => o,
        }
    }

    fn run(&self, cfg: &PipelineConfig) -> Result<()> {
        match self {
            Stage::Phantom(_) => pipeline::cmd_phantom(cfg),
            Stage::Signal(_) => pipeline::cmd_signal(cfg),
            Stage::Train(_) => pipeline::cmd_train(cfg),
            Stage::Featmap(_) => pipeline::cmd_featmap(cfg),
            Stage::Baseline(_) => pipeline::cmd_baseline(cfg),
            Stage::Surface(_) => pipeline::cmd_surface(cfg),
            Stage::Reduce(_) => pipeline::cmd_reduce(cfg),
            Stage::Cluster(_) => pipeline::cmd_cluster(cfg),
            Stage::Table1(_) => pipeline::cmd_table1(cfg),
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let opts = cli.stage.opts();
    if let Some(n) = opts.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))?;
    }
    let mut cfg = PipelineConfig::load(&opts.config)?;
    if let Some(dir) = &opts.out {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = opts.seed {
        cfg.set_master_seed(seed);
    }
    let name = cli.stage.name();
    println!("running {name}");
    let t0 = Instant::now();
    cli.stage.run(&cfg)?;
    println!("{name} finished in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        process::exit(err.exit_code());
    }
}
