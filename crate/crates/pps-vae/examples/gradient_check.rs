//! Verify the analytic objective gradient against central finite differences
//! on a tiny model with pinned noise.
//!
//!     cargo run --release --example gradient_check

use pps_vae::inference::{SampleMode, Variant};
use pps_vae::nn::{ModelConfig, ModelParams};
use pps_vae::objective::elbo_with_grad;
use pps_vae::rng::rng_from;
use pps_vae::tensor::Tensor;
use rand::Rng;

fn main() {
    let mut cfg = ModelConfig::new(1, 6, 6);
    cfg.latent_dim = 4;
    cfg.hidden = 4;
    cfg.blocks = 1;
    let params = ModelParams::new(cfg, 77).expect("model");
    let mut rng = rng_from(5, &[]);
    let y = Tensor::from_vec(&[1, 6, 6], (0..36).map(|_| rng.random::<f64>()).collect()).unwrap();
    let n = params.store.len();
    println!("{n} parameters; checking 10 random slices per posterior variant");

    for variant in [Variant::Independent, Variant::Autoregressive] {
        let (b, grad) = elbo_with_grad(&params, &y, 2, 1.0, 99, variant, SampleMode::Soft).unwrap();
        println!("{variant:?}: elbo = {:.6}", b.elbo);
        let mut idx_rng = rng_from(123, &[]);
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let j = idx_rng.random_range(0..n);
            let h = 1e-4;
            let mut plus = params.clone();
            plus.store.data_mut()[j] += h;
            let (bp, _) = elbo_with_grad(&plus, &y, 2, 1.0, 99, variant, SampleMode::Soft).unwrap();
            let mut minus = params.clone();
            minus.store.data_mut()[j] -= h;
            let (bm, _) = elbo_with_grad(&minus, &y, 2, 1.0, 99, variant, SampleMode::Soft).unwrap();
            let fd = (bp.elbo - bm.elbo) / (2.0 * h);
            let an = grad[j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max(rel);
            println!("  param {j:5}: finite-diff {fd:+.8}  analytic {an:+.8}  rel err {rel:.2e}");
        }
        println!("{variant:?}: worst relative error {worst:.3e}\n");
    }
}
