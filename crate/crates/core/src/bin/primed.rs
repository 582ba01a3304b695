use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use primed::evalkit::Scope;
use primed::harness::{ablate, evaluate_checkpoint, train, RunConfig, SweepSpec};
use primed::synthscene::{gen_dataset, Dataset, GenConfig};

#[derive(Parser)]
#[command(
    name = "primed",
    about = "Prior-guided referring segmentation on synthetic scenes"
)]
struct Cli {
    /// Override the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pin the tensor backend to a single thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes logs and per-epoch checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, val, seen, unseen, null or mix.
        #[arg(long)]
        split: String,
        #[arg(long)]
        report: PathBuf,
        /// Also write predicted masks here.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Train and score every variant of a sweep under each seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_config(cli: &Cli, path: &PathBuf) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= cli.deterministic;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    match &cli.cmd {
        Cmd::Gen { config, out } => {
            let text = std::fs::read_to_string(config)
                .with_context(|| format!("reading {}", config.display()))?;
            let mut cfg: GenConfig =
                toml::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let m = gen_dataset(&cfg, out)?;
            println!("wrote {} samples to {}", m.samples.len(), out.display());
        }
        Cmd::Train { config, out } => {
            let cfg = run_config(&cli, config)?;
            if cfg.deterministic {
                std::env::set_var("RAYON_NUM_THREADS", "1");
            }
            let outcome = train(&cfg, Some(out))?;
            for l in &outcome.logs {
                println!("{}", serde_json::to_string(l)?);
            }
        }
        Cmd::Eval {
            ckpt,
            data,
            split,
            report,
            masks,
        } => {
            let r = evaluate_checkpoint(
                ckpt,
                data,
                Scope::parse(split)?,
                Some(report),
                masks.as_deref(),
            )?;
            match r.s {
                Some(s) => println!(
                    "{}: J {:.2} F {:.2} JF {:.2} S {:.4}",
                    r.split, r.j, r.f, r.jf, s
                ),
                None => println!("{}: J {:.2} F {:.2} JF {:.2}", r.split, r.j, r.f, r.jf),
            }
        }
        Cmd::Ablate { config, sweep, out } => {
            let cfg = run_config(&cli, config)?;
            let spec = SweepSpec::load(sweep)?;
            let ds = Dataset::open(cfg.dataset_dir()?)?;
            let table = ablate(&cfg, &spec, &ds, Some(out))?;
            print!("{}", table.to_text());
        }
    }
    Ok(())
}
