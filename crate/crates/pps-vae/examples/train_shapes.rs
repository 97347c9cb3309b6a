//! Train a small model on the synthetic shapes dataset and checkpoint it.
//!
//!     cargo run --release --example train_shapes [out_dir]
//!
//! Later examples read `<out_dir>/ckpt_final.bin` (default `runs/shapes`).

use pps_vae::commands::training_dataset;
use pps_vae::training::{train, TrainConfig};
use std::path::PathBuf;

fn main() {
    let out: PathBuf =
        std::env::args().nth(1).map(Into::into).unwrap_or_else(|| "runs/shapes".into());
    let cfg = TrainConfig {
        max_steps: 600,
        n_train: 512,
        hidden: 8,
        batch_size: 32,
        learning_rate: 1e-3,
        log_every: 50,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let ds = training_dataset(&cfg).expect("shapes dataset");
    println!(
        "training on {} {}x{} images (M = {}, D = {}) for {} steps",
        ds.len(),
        cfg.height,
        cfg.width,
        cfg.m,
        cfg.latent_dim,
        cfg.max_steps
    );
    let result = train(&cfg, &ds, Some(&out), None).expect("training run");
    for row in &result.metrics {
        println!(
            "step {:4}  elbo {:9.2}  target_ll {:9.2}  kl_a {:5.2}  context_ll {:7.2}  ratio {:6.2}  tau {:.2}",
            row.step, row.elbo, row.target_ll, row.kl_a, row.context_ll, row.location_ratio, row.tau
        );
    }
    println!("checkpoint written to {}", out.join("ckpt_final.bin").display());
}
