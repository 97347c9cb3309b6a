//! Train the vanilla VAE baseline on shapes and compare generation diversity
//! against the main model's checkpoint when one is available.
//!
//!     cargo run --release --example vae_baseline [ckpt]

use pps_vae::commands::training_dataset;
use pps_vae::evaluation::{sample_diversity, vae_generate, vae_train};
use pps_vae::generative::generate_unconditional;
use pps_vae::rng::rng_from;
use pps_vae::training::{load_checkpoint, ModelKind, TrainConfig};
use std::path::PathBuf;

fn main() {
    let cfg = TrainConfig {
        model: ModelKind::Vae,
        max_steps: 400,
        n_train: 512,
        hidden: 8,
        latent_dim: 16,
        learning_rate: 1e-3,
        log_every: 50,
        ..TrainConfig::default()
    };
    let ds = training_dataset(&cfg).expect("shapes dataset");
    println!("training the VAE baseline for {} steps", cfg.max_steps);
    let (params, metrics) = vae_train(&cfg, &ds).expect("VAE training");
    for row in &metrics {
        println!(
            "step {:4}  elbo {:9.2}  reconstruction {:9.2}  kl {:6.2}",
            row.step, row.elbo, row.target_ll, row.kl_a
        );
    }

    let gen = vae_generate(&params, 64, &mut rng_from(4, &[])).expect("VAE samples");
    let train_div = sample_diversity(&ds.images[..200]).unwrap();
    println!(
        "VAE sample diversity {:.3} vs training-set diversity {:.3}",
        sample_diversity(&gen).unwrap(),
        train_div
    );

    // Side-by-side with the main model when its checkpoint exists.
    let ckpt_path: PathBuf =
        std::env::args().nth(1).map(Into::into).unwrap_or_else(|| "runs/shapes/ckpt_final.bin".into());
    if let Ok(ckpt) = load_checkpoint(&ckpt_path) {
        if let Ok(model) = ckpt.restore_model() {
            let c = &ckpt.config;
            let traces =
                generate_unconditional(&model, 64, c.m, c.tau_end, &mut rng_from(4, &[]), false)
                    .expect("samples");
            let imgs: Vec<_> = traces.into_iter().map(|t| t.image).collect();
            println!(
                "context-set model sample diversity {:.3} (same budget)",
                sample_diversity(&imgs).unwrap()
            );
        }
    }
}
