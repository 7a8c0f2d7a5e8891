//! `illumap`: dataset generation, training, evaluation, correction,
//! baselines, and ablation from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use illumap_cli::{
    cmd_ablate, cmd_baseline, cmd_correct, cmd_eval, cmd_generate, cmd_train, reports_json,
};
use illumap_core::Error;

#[derive(Parser)]
#[command(name = "illumap", version, about = "Multi-illuminant color constancy toolkit")]
struct Cli {
    /// Base RNG seed; overrides any seed from a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread cap; 1 guarantees deterministic output.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Print progress details to the error stream.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with a 7:2:1 split manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        illuminants: usize,
    },
    /// Train the network; writes checkpoints and a training log CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Flat JSON config overriding training/model defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write report.json / report.csv into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correct one stored sample with a trained checkpoint.
    Correct {
        /// Sample directory (meta.json + image.bin).
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file for the corrected raw f32 image.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score classical global estimators on one dataset split.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated list from: gw, wp, sog, ge1, ge2, cheng.
        #[arg(long, value_delimiter = ',', default_value = "gw,wp,sog,ge1,ge2,cheng")]
        methods: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the five ablation variants; writes ablation.csv.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    if cli.threads == 0 {
        return Err(Error::ConfigError("--threads must be >= 1".into()));
    }
    let verbose = cli.verbose;
    match cli.command {
        Cmd::Generate {
            out,
            count,
            size,
            illuminants,
        } => {
            let manifest =
                cmd_generate(&out, count, size, illuminants, cli.seed.unwrap_or(0))?;
            println!(
                "wrote {count} samples to {} (train {} / val {} / test {})",
                out.display(),
                manifest.splits.train.len(),
                manifest.splits.val.len(),
                manifest.splits.test.len()
            );
        }
        Cmd::Train { data, config, out } => {
            let (best, log) = cmd_train(&data, config.as_deref(), &out, cli.seed)?;
            if verbose {
                for row in &log {
                    eprintln!(
                        "epoch {} lr {:.3e} train {:.4} val {:.4}",
                        row.epoch, row.lr, row.train_loss, row.val_mean
                    );
                }
            }
            println!(
                "best checkpoint: epoch {} val mean AE {:.4} deg -> {}",
                best.epoch,
                best.val_mean_ae,
                out.join("best").display()
            );
        }
        Cmd::Eval {
            data,
            checkpoint,
            split,
            out,
        } => {
            let report = cmd_eval(&data, &checkpoint, &split, out.as_deref())?;
            println!("{}", reports_json(std::slice::from_ref(&report)));
        }
        Cmd::Correct {
            image,
            checkpoint,
            out,
        } => {
            let written = cmd_correct(&image, &checkpoint, &out)?;
            println!(
                "wrote {} and {} ({}x{})",
                written.corrected.display(),
                written.predicted_map.display(),
                written.height,
                written.width
            );
        }
        Cmd::Baseline {
            data,
            methods,
            split,
            out,
        } => {
            let reports = cmd_baseline(&data, &methods, &split, out.as_deref())?;
            println!("{}", reports_json(&reports));
        }
        Cmd::Ablate { data, config, out } => {
            let rows = cmd_ablate(&data, config.as_deref(), &out, cli.seed)?;
            for row in &rows {
                println!("{}: mean AE {:.4} deg", row.name, row.stats.mean);
            }
            println!("wrote {}", out.join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // flag-level mistakes exit like clap usage errors
        Err(e @ Error::ConfigError(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
