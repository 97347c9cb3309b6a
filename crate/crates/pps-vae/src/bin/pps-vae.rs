//! Thin CLI over the library's command implementations.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pps_vae::commands::{
    cmd_compare_random, cmd_estimate, cmd_probe, cmd_reconstruct, cmd_sample, cmd_train,
    CompareArgs, EstimateArgs, ProbeArgs, ReconstructArgs, SampleArgs, TrainArgs,
};

#[derive(Parser)]
#[command(
    name = "pps-vae",
    about = "Learned pixel context sets for a convolutional conditional neural process",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the model (or the VAE baseline) from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from an earlier checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Unconditional generation: per-sample trace panels plus a grid.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Context size; defaults to the training value.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Draw context values instead of taking the predictive mean.
        #[arg(long, default_value_t = false)]
        sample_values: bool,
    },
    /// Two-row figure: originals with inferred context points, reconstructions.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Importance-weighted log-marginal estimate over the test split.
    Estimate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long, default_value_t = 25)]
        k: usize,
        #[arg(long, default_value_t = 200)]
        n_images: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Frozen-feature probe classification (three seeds, F1-macro).
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        /// yM-sample | yM-mode | abstract-a | image | random-yM | vae-z
        #[arg(long)]
        features: String,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        n_images: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        vae_ckpt: Option<PathBuf>,
    },
    /// Learned vs uniform-random contexts: paired imputation and probes.
    CompareRandom {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        n_images: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Train { config, out, resume } => cmd_train(&TrainArgs { config, out, resume }),
        Cmd::Sample { ckpt, n, m, out, seed, sample_values } => {
            cmd_sample(&SampleArgs { ckpt, n, m, out, seed, sample_values })
        }
        Cmd::Reconstruct { ckpt, dataset, data_root, n, out, seed } => {
            cmd_reconstruct(&ReconstructArgs { ckpt, dataset, data_root, n, out, seed })
        }
        Cmd::Estimate { ckpt, dataset, data_root, k, n_images, out, seed } => {
            cmd_estimate(&EstimateArgs { ckpt, dataset, data_root, k, n_images, out, seed })
        }
        Cmd::Probe { ckpt, features, dataset, data_root, n_images, out, seed, vae_ckpt } => {
            cmd_probe(&ProbeArgs {
                ckpt,
                features,
                dataset,
                data_root,
                n_images,
                out,
                seed,
                vae_ckpt,
            })
        }
        Cmd::CompareRandom { ckpt, dataset, data_root, n_images, out, seed } => {
            cmd_compare_random(&CompareArgs { ckpt, dataset, data_root, n_images, out, seed })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
