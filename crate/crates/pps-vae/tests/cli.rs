//! Command-surface tests: output files, exit codes, manifests, and the
//! dumped-array identities the figures are built from.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use pps_vae::commands::{
    cmd_estimate, cmd_probe, cmd_reconstruct, cmd_sample, cmd_train, EstimateArgs, ProbeArgs,
    ReconstructArgs, SampleArgs, TrainArgs, TraceDump,
};
use pps_vae::error::Error;
use pps_vae::inference::SampleMode;
use pps_vae::objective::elbo_terms;
use pps_vae::render::{TILE_PAD, TILE_SCALE};
use pps_vae::rng::rng_from;
use pps_vae::training::load_checkpoint;

const TINY_CONFIG: &str = "\
m = 3\n\
latent_dim = 4\n\
hidden = 4\n\
blocks = 1\n\
batch_size = 8\n\
max_steps = 30\n\
n_train = 64\n\
height = 8\n\
width = 8\n\
learning_rate = 1e-3\n\
log_every = 10\n\
checkpoint_every = 0\n\
seed = 5\n\
";

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: PathBuf,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

/// One tiny trained checkpoint shared by every command test.
fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.cfg");
        std::fs::write(&config, TINY_CONFIG).unwrap();
        let out = dir.path().join("train");
        cmd_train(&TrainArgs { config, out: out.clone(), resume: None }).unwrap();
        Fixture { ckpt: out.join("ckpt_final.bin"), _dir: dir }
    })
}

fn strip_seconds(line: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
    v.as_object_mut().unwrap().remove("seconds");
    v
}

#[test]
fn train_twice_same_seed_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.cfg");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    for name in ["a", "b"] {
        cmd_train(&TrainArgs {
            config: config.clone(),
            out: dir.path().join(name),
            resume: None,
        })
        .unwrap();
    }
    let read = |name: &str| -> Vec<serde_json::Value> {
        std::fs::read_to_string(dir.path().join(name).join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(strip_seconds)
            .collect()
    };
    // Identical up to wall-clock timing.
    assert_eq!(read("a"), read("b"));

    // Fixed metrics keys.
    let first = std::fs::read_to_string(dir.path().join("a").join("metrics.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let mut keys: Vec<&str> = row.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        ["context_ll", "elbo", "grad_norm", "kl_a", "location_ratio", "seconds", "step", "target_ll", "tau"]
    );

    // Manifest present and finalised; checkpoints load.
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("a").join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "train");
    assert!(manifest["finished_unix"].is_number());
    assert!(manifest["checkpoint_hash"].is_string());
    load_checkpoint(&dir.path().join("a").join("ckpt_final.bin")).unwrap();
}

#[test]
fn missing_config_is_usage_error() {
    let err = cmd_train(&TrainArgs {
        config: PathBuf::from("/nonexistent/config.cfg"),
        out: PathBuf::from("/tmp/unused"),
        resume: None,
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "mystery_key = 1\n").unwrap();
    let err = cmd_train(&TrainArgs {
        config,
        out: dir.path().join("out"),
        resume: None,
    })
    .unwrap_err();
    assert!(err.to_string().contains("mystery_key"));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn sample_outputs_and_pixel_identity() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("samples");
    cmd_sample(&SampleArgs {
        ckpt: fx.ckpt.clone(),
        n: 4,
        m: None,
        out: out.clone(),
        seed: 3,
        sample_values: false,
    })
    .unwrap();

    for i in 0..4 {
        assert!(out.join(format!("trace_{i:03}.png")).exists());
    }
    assert!(out.join("grid.png").exists());
    assert!(out.join("manifest.json").exists());

    // Panel 1 of a trace strip renders the binary mask: exactly two colours
    // in that tile region.
    let img = image::open(out.join("trace_000.png")).unwrap().to_rgb8();
    let tile_px = 8 * TILE_SCALE;
    let mut colors: Vec<[u8; 3]> = (0..tile_px)
        .flat_map(|y| (0..tile_px).map(move |x| (x, y)))
        .map(|(x, y)| img.get_pixel((TILE_PAD + x) as u32, (TILE_PAD + y) as u32).0)
        .collect();
    colors.sort_unstable();
    colors.dedup();
    assert!(colors.len() <= 2, "mask panel has {} colours", colors.len());

    // Raw dumps satisfy image = context + target exactly, before any clamping.
    let dumps: Vec<TraceDump> =
        serde_json::from_str(&std::fs::read_to_string(out.join("traces.json")).unwrap()).unwrap();
    assert_eq!(dumps.len(), 4);
    for d in &dumps {
        for ((&img_v, &c), &t) in d.image.iter().zip(&d.context_values).zip(&d.target_values) {
            assert_eq!(img_v, c + t);
        }
    }
}

#[test]
fn reconstruct_outputs_circles_and_layout() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("recon");
    cmd_reconstruct(&ReconstructArgs {
        ckpt: fx.ckpt.clone(),
        dataset: None,
        data_root: None,
        n: 5,
        out: out.clone(),
        seed: 1,
    })
    .unwrap();

    #[derive(serde::Deserialize)]
    struct Dump {
        mask: Vec<f64>,
        circle_centers: Vec<(usize, usize)>,
    }
    let dumps: Vec<Dump> =
        serde_json::from_str(&std::fs::read_to_string(out.join("reconstructions.json")).unwrap())
            .unwrap();
    assert_eq!(dumps.len(), 5);
    for d in &dumps {
        let popcount = d.mask.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(d.circle_centers.len(), popcount);
    }

    // Two rows by five columns of upscaled tiles plus the fixed padding.
    let img = image::open(out.join("reconstructions.png")).unwrap().to_rgb8();
    let tile_px = 8 * TILE_SCALE;
    assert_eq!(img.width() as usize, 5 * tile_px + 6 * TILE_PAD);
    assert_eq!(img.height() as usize, 2 * tile_px + 3 * TILE_PAD);
}

#[test]
fn estimate_k1_matches_mean_single_sample_elbo() {
    let fx = fixture();
    let ckpt = load_checkpoint(&fx.ckpt).unwrap();
    let cfg = &ckpt.config;
    let params = ckpt.restore_model().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("est");
    cmd_estimate(&EstimateArgs {
        ckpt: fx.ckpt.clone(),
        dataset: None,
        data_root: None,
        k: 1,
        n_images: 16,
        out: out.clone(),
        seed: 11,
    })
    .unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("estimate.json")).unwrap()).unwrap();
    for key in ["K", "mean_log_marginal", "n_images", "seed"] {
        assert!(report.get(key).is_some(), "missing key {key}");
    }
    assert_eq!(report["K"], 1);
    assert_eq!(report["n_images"], 16);

    // Reproduce the estimate from single-sample ELBOs under the same seeds;
    // the command evaluates the test split of the checkpoint's dataset.
    let ds = pps_vae::data::synth_shapes(
        16,
        cfg.height,
        cfg.width,
        cfg.num_classes,
        pps_vae::rng::derive_seed(cfg.seed, &[0x7465_7374]),
    )
    .unwrap();
    let mut total = 0.0;
    for (i, y) in ds.images.iter().enumerate() {
        let mut rng = rng_from(11, &[0x69776165, i as u64]);
        let b = elbo_terms(&params, y, cfg.m, cfg.tau_end, &mut rng, cfg.variant, SampleMode::Hard)
            .unwrap();
        total += b.elbo;
    }
    let expect = total / ds.len() as f64;
    let got = report["mean_log_marginal"].as_f64().unwrap();
    assert_eq!(got, expect);
}

#[test]
fn probe_report_carries_requested_kind_and_three_seeds() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("probe");
    cmd_probe(&ProbeArgs {
        ckpt: fx.ckpt.clone(),
        features: "yM-sample".into(),
        dataset: None,
        data_root: None,
        n_images: 90,
        out: out.clone(),
        seed: 2,
        vae_ckpt: None,
    })
    .unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("probe_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["feature_kind"], "yM-sample");
    assert_eq!(report["seeds"].as_array().unwrap().len(), 3);
    let f1 = report["f1_macro_mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    // Unknown feature kinds are usage errors (exit 2).
    let err = cmd_probe(&ProbeArgs {
        ckpt: fx.ckpt.clone(),
        features: "bogus".into(),
        dataset: None,
        data_root: None,
        n_images: 30,
        out: dir.path().join("probe2"),
        seed: 2,
        vae_ckpt: None,
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_pps-vae");

    // Missing config: usage error, exit 2.
    let status = Command::new(bin)
        .args(["train", "--config", "/nonexistent.cfg", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));

    // Corrupt checkpoint version: exit 4.
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    let mut bytes = std::fs::read(&fx.ckpt).unwrap();
    bytes[8] = 0xEE; // version field
    std::fs::write(&bad, &bytes).unwrap();
    let status = Command::new(bin)
        .args([
            "sample",
            "--ckpt",
            bad.to_str().unwrap(),
            "--n",
            "1",
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(4));
}

#[test]
fn error_exit_code_mapping() {
    assert_eq!(Error::usage("x").exit_code(), 2);
    assert_eq!(Error::NonFinite { step: 1, term: "elbo".into() }.exit_code(), 3);
    assert_eq!(
        Error::CheckpointVersion { found: 9, expected: 1 }.exit_code(),
        4
    );
    assert_eq!(Error::CheckpointIntegrity("t".into()).exit_code(), 4);
}

#[test]
fn manifest_written_before_outputs() {
    // The manifest hits disk before any sample output: run a command that
    // fails midway (invalid m) and check the manifest already exists.
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("early");
    let err = cmd_sample(&SampleArgs {
        ckpt: fx.ckpt.clone(),
        n: 1,
        m: Some(64), // grid size: contract violation after the manifest
        out: out.clone(),
        seed: 0,
        sample_values: false,
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(out.join("manifest.json").exists());
    assert!(!out.join("grid.png").exists());
}

fn count_manifests(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name() == "manifest.json")
        .count()
}

#[test]
fn sample_is_seed_reproducible() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    for name in ["s1", "s2"] {
        cmd_sample(&SampleArgs {
            ckpt: fx.ckpt.clone(),
            n: 3,
            m: None,
            out: dir.path().join(name),
            seed: 77,
            sample_values: false,
        })
        .unwrap();
    }
    let a = std::fs::read_to_string(dir.path().join("s1").join("traces.json")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("s2").join("traces.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn compare_random_writes_paired_summary() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp");
    pps_vae::commands::cmd_compare_random(&pps_vae::commands::CompareArgs {
        ckpt: fx.ckpt.clone(),
        dataset: None,
        data_root: None,
        n_images: 60,
        out: out.clone(),
        seed: 5,
    })
    .unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("comparison.json")).unwrap())
            .unwrap();
    assert_eq!(report["imputation"]["n_images"], 60);
    let frac = report["imputation"]["learned_win_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&frac));
    assert_eq!(report["probe_learned"]["feature_kind"], "yM-sample");
    assert_eq!(report["probe_random"]["feature_kind"], "random-yM");
    assert_eq!(report["probe_learned"]["seeds"].as_array().unwrap().len(), 3);
}

#[test]
fn exactly_one_manifest_per_output_dir() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("once");
    cmd_sample(&SampleArgs {
        ckpt: fx.ckpt.clone(),
        n: 2,
        m: None,
        out: out.clone(),
        seed: 0,
        sample_values: false,
    })
    .unwrap();
    assert_eq!(count_manifests(&out), 1);
}
