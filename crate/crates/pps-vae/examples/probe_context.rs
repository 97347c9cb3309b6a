//! How much class signal do the learned context sets carry? Trains frozen-
//! feature probes on context overlays, the abstract latent, and raw images.
//!
//!     cargo run --release --example probe_context [ckpt]

use pps_vae::data::synth_shapes;
use pps_vae::evaluation::{
    abstract_features, context_overlay_features, image_features, probe_train_eval,
    ContextFeatureKind, ProbeConfig,
};
use pps_vae::rng::derive_seed;
use pps_vae::training::load_checkpoint;
use std::path::PathBuf;

fn main() {
    let ckpt_path: PathBuf =
        std::env::args().nth(1).map(Into::into).unwrap_or_else(|| "runs/shapes/ckpt_final.bin".into());
    let ckpt = load_checkpoint(&ckpt_path).expect("checkpoint");
    let params = ckpt.restore_model().expect("model");
    let cfg = &ckpt.config;
    let ds = synth_shapes(
        450,
        cfg.height,
        cfg.width,
        cfg.num_classes,
        derive_seed(cfg.seed, &[0x7465_7374]),
    )
    .expect("test shapes");
    let labels = ds.labels.clone().expect("shapes are labeled");
    let seeds = [1u64, 2, 3];
    let pcfg = ProbeConfig::default();

    let kinds: Vec<(&str, pps_vae::evaluation::ProbeFeatures)> = vec![
        (
            "yM-sample",
            context_overlay_features(
                &params,
                &ds,
                cfg.m,
                cfg.tau_end,
                cfg.variant,
                ContextFeatureKind::Sample,
                7,
            )
            .unwrap(),
        ),
        (
            "random-yM",
            context_overlay_features(
                &params,
                &ds,
                cfg.m,
                cfg.tau_end,
                cfg.variant,
                ContextFeatureKind::Random,
                8,
            )
            .unwrap(),
        ),
        (
            "abstract-a",
            abstract_features(&params, &ds, cfg.m, cfg.tau_end, cfg.variant, true, 9).unwrap(),
        ),
        ("image", image_features(&ds)),
    ];
    for (kind, features) in &kinds {
        let report = probe_train_eval(kind, features, &labels, &seeds, &pcfg).expect("probe");
        println!(
            "{:>10}: F1-macro {:.3} +/- {:.3}  (per seed {:?})",
            report.feature_kind,
            report.f1_macro_mean,
            report.f1_macro_std,
            report
                .f1_per_seed
                .iter()
                .map(|f| (f * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>()
        );
    }
}
