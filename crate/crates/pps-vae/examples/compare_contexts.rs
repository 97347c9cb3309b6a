//! Paired comparison of learned vs uniform-random context sets on held-out
//! images: per-target-pixel imputation log-likelihood, image by image.
//!
//!     cargo run --release --example compare_contexts [ckpt]

use pps_vae::data::synth_shapes;
use pps_vae::evaluation::{imputation_log_likelihood, random_context, sign_test_p};
use pps_vae::inference::{infer_context_with_mode, SampleMode};
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
        100,
        cfg.height,
        cfg.width,
        cfg.num_classes,
        derive_seed(cfg.seed, &[0x7465_7374]),
    )
    .expect("test shapes");

    let mut wins = 0usize;
    let mut learned_sum = 0.0;
    let mut random_sum = 0.0;
    for (i, y) in test.images.iter().enumerate() {
        let mut rng_l = rng_from(11, &[i as u64]);
        let learned = infer_context_with_mode(
            &params,
            y,
            cfg.m,
            cfg.tau_end,
            &mut rng_l,
            cfg.variant,
            SampleMode::Hard,
        )
        .expect("learned context");
        let mut rng_r = rng_from(12, &[i as u64]);
        let random = random_context(y, cfg.m, &mut rng_r).expect("random context");
        let ll_l = imputation_log_likelihood(&params, &learned, y).expect("learned score");
        let ll_r = imputation_log_likelihood(&params, &random, y).expect("random score");
        learned_sum += ll_l;
        random_sum += ll_r;
        if ll_l > ll_r {
            wins += 1;
        }
    }
    let n = test.len();
    println!(
        "learned contexts: mean {:.3} nats/pixel | random contexts: mean {:.3} nats/pixel",
        learned_sum / n as f64,
        random_sum / n as f64
    );
    println!(
        "learned wins {wins}/{n} paired images (sign test p = {:.2e})",
        sign_test_p(wins, n)
    );
}
