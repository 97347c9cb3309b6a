//! Unconditional generation from a trained checkpoint: latent draw, prior
//! location draws, context values, ConvCNP completion — rendered as 4-panel
//! trace strips plus a sample grid.
//!
//!     cargo run --release --example generate_samples [ckpt] [out_dir]
//!
//! Run `train_shapes` first for the default checkpoint path.

use pps_vae::generative::generate_unconditional;
use pps_vae::render::{compose_grid, save_png, tile, trace_panels};
use pps_vae::rng::rng_from;
use pps_vae::training::load_checkpoint;
use std::path::PathBuf;

fn main() {
    let ckpt_path: PathBuf =
        std::env::args().nth(1).map(Into::into).unwrap_or_else(|| "runs/shapes/ckpt_final.bin".into());
    let out: PathBuf =
        std::env::args().nth(2).map(Into::into).unwrap_or_else(|| "runs/shapes/samples".into());
    std::fs::create_dir_all(&out).expect("output dir");

    let ckpt = load_checkpoint(&ckpt_path).expect("checkpoint");
    let params = ckpt.restore_model().expect("model");
    let cfg = &ckpt.config;

    let mut rng = rng_from(2, &[]);
    let traces = generate_unconditional(&params, 16, cfg.m, cfg.tau_end, &mut rng, false)
        .expect("generation");
    let mut tiles = Vec::new();
    for (i, trace) in traces.iter().enumerate() {
        save_png(&trace_panels(trace).unwrap(), &out.join(format!("trace_{i:02}.png"))).unwrap();
        tiles.push(tile(&trace.image).unwrap());
        println!(
            "sample {i:2}: {} context points, image range [{:.2}, {:.2}]",
            trace.mask.popcount(),
            trace.image.iter().cloned().fold(f64::INFINITY, f64::min),
            trace.image.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
    }
    save_png(&compose_grid(&tiles, 4).unwrap(), &out.join("grid.png")).unwrap();
    println!("wrote {} trace strips and grid.png under {}", traces.len(), out.display());
}
