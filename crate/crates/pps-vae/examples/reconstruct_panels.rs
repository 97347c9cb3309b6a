//! Infer context sets on held-out images and complete them: originals with
//! their chosen pixels circled on top, reconstructions underneath.
//!
//!     cargo run --release --example reconstruct_panels [ckpt] [out_dir]

use pps_vae::data::synth_shapes;
use pps_vae::generative::reconstruct;
use pps_vae::inference::SampleMode;
use pps_vae::render::{reconstruction_rows, save_png};
use pps_vae::rng::{derive_seed, rng_from};
use pps_vae::training::load_checkpoint;
use std::path::PathBuf;

fn main() {
    let ckpt_path: PathBuf =
        std::env::args().nth(1).map(Into::into).unwrap_or_else(|| "runs/shapes/ckpt_final.bin".into());
    let out: PathBuf =
        std::env::args().nth(2).map(Into::into).unwrap_or_else(|| "runs/shapes/recon".into());
    std::fs::create_dir_all(&out).expect("output dir");

    let ckpt = load_checkpoint(&ckpt_path).expect("checkpoint");
    let params = ckpt.restore_model().expect("model");
    let cfg = &ckpt.config;
    let test = synth_shapes(
        8,
        cfg.height,
        cfg.width,
        cfg.num_classes,
        derive_seed(cfg.seed, &[0x7465_7374]),
    )
    .expect("test shapes");

    let mut originals = Vec::new();
    let mut masks = Vec::new();
    let mut recons = Vec::new();
    for (i, y) in test.images.iter().enumerate() {
        let mut rng = rng_from(5, &[i as u64]);
        let (trace, ctx) =
            reconstruct(&params, y, cfg.m, cfg.tau_end, &mut rng, cfg.variant, SampleMode::Hard)
                .expect("reconstruction");
        println!("image {i}: {} distinct context points", ctx.mask.popcount());
        originals.push(y.clone());
        masks.push(ctx.mask);
        recons.push(trace.image);
    }
    let fig = reconstruction_rows(&originals, &masks, &recons).unwrap();
    save_png(&fig, &out.join("reconstructions.png")).unwrap();
    println!("wrote {}", out.join("reconstructions.png").display());
}
