//! Command-line driver: synthetic data, masks, training, evaluation and
//! single-volume reconstruction.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualdomain::Error;

use commands::{EvaluateArgs, Reporter};
use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "dualdomain", version, about = "Dual-domain compressed-sensing MR reconstruction")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Experiment config (TOML, or JSON by extension). Defaults apply without one.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for data, masks and training; overrides the config.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` (for generate-data: the dataset directory).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and its split manifest.
    GenerateData,
    /// Write undersampling masks with PNG previews.
    MakeMasks {
        /// Comma-separated acceleration factors (overrides mask.accelerations).
        #[arg(long, value_delimiter = ',')]
        accelerations: Option<Vec<f64>>,
        /// Comma-separated mask seeds (overrides mask.seeds).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Mask height (defaults to data.height).
        #[arg(long)]
        height: Option<usize>,
        /// Mask width (defaults to data.width).
        #[arg(long)]
        width: Option<usize>,
    },
    /// Train the hybrid model (and the baseline if configured).
    Train {
        /// Dataset directory (overrides data.root).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split; writes CSV/JSON reports and plots.
    Evaluate {
        /// Checkpoint to evaluate [default: <out>/hybrid.cks].
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Comparator checkpoint [default: <out>/baseline.cks when present].
        #[arg(long, value_name = "PATH")]
        baseline: Option<PathBuf>,
        /// Dataset directory (overrides data.root).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Acceleration of the evaluation mask [default: the training acceleration].
        #[arg(long)]
        acceleration: Option<f64>,
        /// Slice of the first test subject shown in the panel [default: middle slice].
        #[arg(long)]
        slice: Option<usize>,
        /// Score the fully sampled reference against itself (sanity check).
        #[arg(long)]
        reference_mode: bool,
    },
    /// Reconstruct every slice of one k-space volume.
    Reconstruct {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Input k-space volume (CKS1).
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Mask applied before reconstruction; omit when the input is already undersampled.
        #[arg(long, value_name = "PATH")]
        mask: Option<PathBuf>,
        /// Output magnitude volume (CKS1, float64).
        #[arg(long, value_name = "PATH")]
        output: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 2,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("DUALDOMAIN_NUM_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("DUALDOMAIN_NUM_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    let g = &cli.global;
    let mut config = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.apply_seed(seed);
    }
    if let Some(out) = &g.out {
        config.output_dir = out.clone();
    }
    let log = Reporter { quiet: g.quiet };

    match cli.command {
        Command::GenerateData => {
            let dir = g.out.clone().unwrap_or_else(|| config.data.root.clone());
            commands::generate_data(&config, &dir, &log)
        }
        Command::MakeMasks {
            accelerations,
            seeds,
            height,
            width,
        } => commands::make_masks(
            height.unwrap_or(config.data.height),
            width.unwrap_or(config.data.width),
            &accelerations.unwrap_or_else(|| config.mask.accelerations.clone()),
            &seeds.unwrap_or_else(|| config.mask.seeds.clone()),
            config.mask.center_fraction,
            &config.output_dir.join("masks"),
            &log,
        ),
        Command::Train { data } => {
            let root = data.unwrap_or_else(|| config.data.root.clone());
            commands::train(&config, &root, &config.output_dir, &log)
        }
        Command::Evaluate {
            checkpoint,
            baseline,
            data,
            acceleration,
            slice,
            reference_mode,
        } => {
            let root = data.unwrap_or_else(|| config.data.root.clone());
            let args = EvaluateArgs {
                checkpoint: checkpoint.unwrap_or_else(|| commands::default_checkpoint(&config.output_dir)),
                baseline: baseline.or_else(|| commands::default_baseline(&config.output_dir)),
                acceleration,
                slice,
                reference_mode,
            };
            commands::evaluate_cmd(&config, &args, &root, &config.output_dir.join("eval"), &log)
        }
        Command::Reconstruct {
            checkpoint,
            input,
            mask,
            output,
        } => commands::reconstruct(&checkpoint, &input, mask.as_deref(), &output, &log),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(
            exit_code(&Error::Format {
                path: "f".into(),
                reason: "r".into()
            }),
            3
        );
        assert_eq!(
            exit_code(&Error::Divergence {
                epoch: 1,
                batch: 0,
                detail: String::new()
            }),
            4
        );
    }
}
