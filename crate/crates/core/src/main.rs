use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use colearn::commands::{
    eval_run, export_fusion_maps_run, gen_phantom, load_config, predict_run, train_run, EvalRunConfig,
    GenPhantomConfig, SliceRef, TrainRunConfig,
};
use colearn::model::Variant;
use colearn::Result;

/// Co-learning PET-CT fusion network: phantom data, training, evaluation
/// and inspection.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic PET-CT slice dataset.
    GenPhantom {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a slice dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute segmentation metrics of one or more trained networks.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Repeat to compare several networks.
        #[arg(long)]
        weights: Vec<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write class probability maps and the label map of one slice.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// `<study>/<index>`, e.g. `study_000/1`.
        #[arg(long)]
        slice: SliceRef,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the co-learning fusion maps of one slice.
    ExportFusionMaps {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        slice: SliceRef,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPhantom { config, seed, out } => {
            let mut cfg: GenPhantomConfig = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.phantom.seed = s;
            }
            gen_phantom(&cfg, &out)?;
        }
        Command::Train {
            config,
            seed,
            variant,
            dataset,
            out,
        } => {
            let mut cfg: TrainRunConfig = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            let outcome = train_run(&cfg, &out)?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "epoch {}: mean loss {:.5}, pixel accuracy {:.4}",
                    last.epoch, last.mean_loss, last.pixel_accuracy
                );
            }
        }
        Command::Eval {
            config,
            weights,
            dataset,
            out,
        } => {
            let mut cfg: EvalRunConfig = load_config(config.as_deref())?;
            cfg.weights.extend(weights);
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            for r in eval_run(&cfg, &out)? {
                let fmt = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.4}"));
                println!(
                    "{}: foreground dice {}, tumor dice {}",
                    r.method,
                    fmt(r.mean("foreground", "dice")),
                    fmt(r.mean("tumors", "dice"))
                );
            }
        }
        Command::Predict {
            weights,
            dataset,
            slice,
            out,
        } => {
            predict_run(&weights, &dataset, &slice, &out)?;
        }
        Command::ExportFusionMaps {
            weights,
            dataset,
            slice,
            out,
        } => {
            let channels = export_fusion_maps_run(&weights, &dataset, &slice, &out)?;
            println!("wrote {} fusion channels", channels.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
