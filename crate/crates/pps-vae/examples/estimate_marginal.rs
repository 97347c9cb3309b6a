//! Importance-weighted log-marginal estimates at increasing sample counts;
//! the estimate tightens (in expectation) as K grows.
//!
//!     cargo run --release --example estimate_marginal [ckpt]

use pps_vae::data::synth_shapes;
use pps_vae::inference::SampleMode;
use pps_vae::objective::iwae_log_marginal;
use pps_vae::rng::{derive_seed, rng_from};
use pps_vae::training::load_checkpoint;
use std::path::PathBuf;

fn main() {
    let ckpt_path: PathBuf =
        std::env::args().nth(1).map(Into::into).unwrap_or_else(|| "runs/shapes/ckpt_final.bin".into());
    let ckpt = load_checkpoint(&ckpt_path).expect("checkpoint");
    let params = ckpt.restore_model().expect("model");
    let cfg = &ckpt.config;
    let test = synth_shapes(
        50,
        cfg.height,
        cfg.width,
        cfg.num_classes,
        derive_seed(cfg.seed, &[0x7465_7374]),
    )
    .expect("test shapes");

    for k in [1usize, 5, 25] {
        let mut total = 0.0;
        for (i, y) in test.images.iter().enumerate() {
            let mut rng = rng_from(3, &[i as u64]);
            total += iwae_log_marginal(
                &params,
                y,
                cfg.m,
                k,
                cfg.tau_end,
                &mut rng,
                cfg.variant,
                SampleMode::Hard,
            )
            .expect("estimate");
        }
        println!(
            "K = {k:3}: mean log-marginal estimate {:.2} nats over {} images",
            total / test.len() as f64,
            test.len()
        );
    }
}
