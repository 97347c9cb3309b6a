//! Command implementations behind the thin `pps-vae` binary: training,
//! sampling, reconstruction, log-marginal estimation, probing, and the
//! learned-vs-random comparison. Each command owns one output directory with
//! exactly one manifest, written before any other output.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{load_dataset, synth_shapes, Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{
    abstract_features, context_overlay_features, image_features, imputation_log_likelihood,
    probe_train_eval, random_context, vae_features, vae_train, ContextFeatureKind, ProbeConfig,
    ProbeFeatures, ProbeReport, VaeParams,
};
use crate::generative::{generate_unconditional, reconstruct, GenerationTrace};
use crate::inference::{infer_context_with_mode, SampleMode};
use crate::manifest::{content_hash, RunManifest};
use crate::nn::ModelParams;
use crate::objective::iwae_log_marginal;
use crate::render::{compose_grid, reconstruction_rows, save_png, tile, trace_panels};
use crate::rng::{derive_seed, rng_from};
use crate::training::{
    load_checkpoint, save_checkpoint, train, Checkpoint, MetricsRow, ModelKind, TrainConfig,
};

const TRAIN_SPLIT_TAG: u64 = 0x7472_6169;
const TEST_SPLIT_TAG: u64 = 0x7465_7374;

/// Environment variable naming the default output root; relative `--out`
/// paths are resolved under it.
pub const OUT_ROOT_ENV: &str = "PPS_VAE_OUT_ROOT";

pub fn resolve_out(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
            return PathBuf::from(root).join(path);
        }
    }
    path.to_path_buf()
}

/// Training data named by the config: generated shapes or a file-backed set.
pub fn training_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    dataset_for(cfg, &cfg.dataset, None, Split::Train, cfg.n_train)
}

fn dataset_for(
    cfg: &TrainConfig,
    name: &str,
    data_root: Option<&Path>,
    split: Split,
    n: usize,
) -> Result<Dataset> {
    if name == "shapes" {
        let tag = match split {
            Split::Train => TRAIN_SPLIT_TAG,
            Split::Test => TEST_SPLIT_TAG,
        };
        let mut ds =
            synth_shapes(n, cfg.height, cfg.width, cfg.num_classes, derive_seed(cfg.seed, &[tag]))?;
        ds.split = split;
        return Ok(ds);
    }
    let root = data_root
        .map(Path::to_path_buf)
        .or_else(|| cfg.data_root.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::usage(format!("dataset `{name}` needs --data-root")))?;
    let mut ds = load_dataset(name, &root, split)?;
    if n > 0 && ds.len() > n {
        ds.images.truncate(n);
        if let Some(labels) = ds.labels.as_mut() {
            labels.truncate(n);
        }
    }
    Ok(ds)
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
    TrainConfig::from_text(&text)
}

fn restore_pps(ckpt: &Checkpoint) -> Result<ModelParams> {
    if ckpt.config.model != ModelKind::Pps {
        return Err(Error::usage("checkpoint holds the VAE baseline, not the PPS model"));
    }
    ckpt.restore_model()
}

fn restore_vae(ckpt: &Checkpoint) -> Result<VaeParams> {
    if ckpt.config.model != ModelKind::Vae {
        return Err(Error::usage("checkpoint does not hold the VAE baseline"));
    }
    let mut params = VaeParams::new(ckpt.model_config.clone(), ckpt.config.seed)?;
    if params.store.len() != ckpt.params.len() {
        return Err(Error::CheckpointIntegrity("parameter count mismatch".into()));
    }
    params.store.data_mut().copy_from_slice(&ckpt.params);
    Ok(params)
}

fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut f, row)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

// ---- train ------------------------------------------------------------------

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = read_config(&args.config)?;
    let out = resolve_out(&args.out);
    let ds = training_dataset(&cfg)?;
    let mut manifest = RunManifest::begin(
        "train",
        serde_json::to_value(&cfg)?,
        cfg.seed,
        vec![args.config.display().to_string()],
        &out,
    )?;

    match cfg.model {
        ModelKind::Pps => {
            let resume = match &args.resume {
                Some(p) => Some(load_checkpoint(p)?),
                None => None,
            };
            train(&cfg, &ds, Some(&out), resume)?;
        }
        ModelKind::Vae => {
            let (params, metrics) = vae_train(&cfg, &ds)?;
            write_metrics(&metrics, &out.join("metrics.jsonl"))?;
            let total = crate::training::total_steps(&cfg, ds.len());
            let ckpt = Checkpoint {
                config: cfg.clone(),
                model_config: params.config.clone(),
                step: total,
                params: params.store.data().to_vec(),
                opt_m: vec![0.0; params.store.len()],
                opt_v: vec![0.0; params.store.len()],
                opt_vmax: vec![0.0; params.store.len()],
            };
            save_checkpoint(&ckpt, &out.join("ckpt_final.bin"))?;
        }
    }
    manifest.checkpoint_hash = Some(content_hash(&out.join("ckpt_final.bin"))?);
    manifest.finish(&out)
}

// ---- sample ------------------------------------------------------------------

pub struct SampleArgs {
    pub ckpt: PathBuf,
    pub n: usize,
    pub m: Option<usize>,
    pub out: PathBuf,
    pub seed: u64,
    pub sample_values: bool,
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct TraceDump {
    pub a: Vec<f64>,
    pub mask: Vec<f64>,
    pub context_values: Vec<f64>,
    pub target_values: Vec<f64>,
    pub image: Vec<f64>,
    pub image_shape: Vec<usize>,
}

impl TraceDump {
    fn from_trace(t: &GenerationTrace) -> Self {
        TraceDump {
            a: t.a.data().to_vec(),
            mask: t.mask.data().to_vec(),
            context_values: t.context_values.data().to_vec(),
            target_values: t.target_values.data().to_vec(),
            image: t.image.data().to_vec(),
            image_shape: t.image.shape().to_vec(),
        }
    }
}

pub fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let params = restore_pps(&ckpt)?;
    let cfg = &ckpt.config;
    let m = args.m.unwrap_or(cfg.m);
    let out = resolve_out(&args.out);
    let mut manifest = RunManifest::begin(
        "sample",
        serde_json::json!({ "n": args.n, "m": m, "tau": cfg.tau_end, "sample_values": args.sample_values }),
        args.seed,
        vec![args.ckpt.display().to_string()],
        &out,
    )?;
    manifest.checkpoint_hash = Some(content_hash(&args.ckpt)?);
    manifest.write(&out)?;

    let mut rng = rng_from(args.seed, &[0x73616d70]);
    let traces =
        generate_unconditional(&params, args.n, m, cfg.tau_end, &mut rng, args.sample_values)?;
    let mut grid_tiles = Vec::with_capacity(traces.len());
    let mut dumps = Vec::with_capacity(traces.len());
    for (i, trace) in traces.iter().enumerate() {
        save_png(&trace_panels(trace)?, &out.join(format!("trace_{i:03}.png")))?;
        grid_tiles.push(tile(&trace.image)?);
        dumps.push(TraceDump::from_trace(trace));
    }
    let cols = (args.n as f64).sqrt().ceil() as usize;
    save_png(&compose_grid(&grid_tiles, cols.max(1))?, &out.join("grid.png"))?;
    std::fs::write(out.join("traces.json"), serde_json::to_string(&dumps)?)?;
    manifest.finish(&out)
}

// ---- reconstruct ---------------------------------------------------------------

pub struct ReconstructArgs {
    pub ckpt: PathBuf,
    pub dataset: Option<String>,
    pub data_root: Option<PathBuf>,
    pub n: usize,
    pub out: PathBuf,
    pub seed: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct ReconstructionDump {
    pub mask: Vec<f64>,
    pub circle_centers: Vec<(usize, usize)>,
    pub original: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub image_shape: Vec<usize>,
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let params = restore_pps(&ckpt)?;
    let cfg = &ckpt.config;
    let name = args.dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
    let ds = dataset_for(cfg, &name, args.data_root.as_deref(), Split::Test, args.n.max(64))?;
    if ds.len() < args.n {
        return Err(Error::usage(format!("dataset holds {} images, need {}", ds.len(), args.n)));
    }
    let out = resolve_out(&args.out);
    let mut manifest = RunManifest::begin(
        "reconstruct",
        serde_json::json!({ "dataset": name, "n": args.n, "m": cfg.m, "tau": cfg.tau_end }),
        args.seed,
        vec![args.ckpt.display().to_string()],
        &out,
    )?;
    manifest.checkpoint_hash = Some(content_hash(&args.ckpt)?);
    manifest.write(&out)?;

    let mut originals = Vec::new();
    let mut masks = Vec::new();
    let mut recons = Vec::new();
    let mut dumps = Vec::new();
    for (i, y) in ds.images.iter().take(args.n).enumerate() {
        let mut rng = rng_from(args.seed, &[0x7265636f, i as u64]);
        let (trace, ctx) =
            reconstruct(&params, y, cfg.m, cfg.tau_end, &mut rng, cfg.variant, SampleMode::Hard)?;
        let (h, w) = (ctx.mask.shape()[0], ctx.mask.shape()[1]);
        let centers: Vec<(usize, usize)> = (0..h * w)
            .filter(|&p| ctx.mask.data()[p] == 1.0)
            .map(|p| (p / w, p % w))
            .collect();
        dumps.push(ReconstructionDump {
            mask: ctx.mask.data().to_vec(),
            circle_centers: centers,
            original: y.data().to_vec(),
            reconstruction: trace.image.data().to_vec(),
            image_shape: y.shape().to_vec(),
        });
        originals.push(y.clone());
        masks.push(ctx.mask.clone());
        recons.push(trace.image.clone());
    }
    save_png(&reconstruction_rows(&originals, &masks, &recons)?, &out.join("reconstructions.png"))?;
    std::fs::write(out.join("reconstructions.json"), serde_json::to_string(&dumps)?)?;
    manifest.finish(&out)
}

// ---- estimate ---------------------------------------------------------------

pub struct EstimateArgs {
    pub ckpt: PathBuf,
    pub dataset: Option<String>,
    pub data_root: Option<PathBuf>,
    pub k: usize,
    pub n_images: usize,
    pub out: PathBuf,
    pub seed: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct EstimateReport {
    #[serde(rename = "K")]
    pub k: usize,
    pub mean_log_marginal: f64,
    pub n_images: usize,
    pub seed: u64,
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    if args.k < 1 {
        return Err(Error::usage("need K >= 1"));
    }
    let ckpt = load_checkpoint(&args.ckpt)?;
    let params = restore_pps(&ckpt)?;
    let cfg = &ckpt.config;
    let name = args.dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
    let ds = dataset_for(cfg, &name, args.data_root.as_deref(), Split::Test, args.n_images)?;
    let out = resolve_out(&args.out);
    let mut manifest = RunManifest::begin(
        "estimate",
        serde_json::json!({ "dataset": name, "K": args.k, "n_images": ds.len(), "tau": cfg.tau_end }),
        args.seed,
        vec![args.ckpt.display().to_string()],
        &out,
    )?;
    manifest.checkpoint_hash = Some(content_hash(&args.ckpt)?);
    manifest.write(&out)?;

    let report = estimate_mean_log_marginal(&params, &ds, cfg, args.k, args.seed)?;
    println!(
        "mean IWAE log-marginal (K={}) over {} images: {:.3}",
        report.k, report.n_images, report.mean_log_marginal
    );
    std::fs::write(out.join("estimate.json"), serde_json::to_string_pretty(&report)?)?;
    manifest.finish(&out)
}

/// Mean IWAE estimate over a dataset; evaluation runs hard draws at the
/// training's final temperature.
pub fn estimate_mean_log_marginal(
    params: &ModelParams,
    ds: &Dataset,
    cfg: &TrainConfig,
    k: usize,
    seed: u64,
) -> Result<EstimateReport> {
    let per: Vec<Result<f64>> = ds
        .images
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let mut rng = rng_from(seed, &[0x69776165, i as u64]);
            iwae_log_marginal(params, y, cfg.m, k, cfg.tau_end, &mut rng, cfg.variant, SampleMode::Hard)
        })
        .collect();
    let mut total = 0.0;
    for v in &per {
        total += *v.as_ref().map_err(|e| Error::usage(e.to_string()))?;
    }
    Ok(EstimateReport {
        k,
        mean_log_marginal: total / ds.len() as f64,
        n_images: ds.len(),
        seed,
    })
}

// ---- probe ------------------------------------------------------------------

pub struct ProbeArgs {
    pub ckpt: PathBuf,
    pub features: String,
    pub dataset: Option<String>,
    pub data_root: Option<PathBuf>,
    pub n_images: usize,
    pub out: PathBuf,
    pub seed: u64,
    pub vae_ckpt: Option<PathBuf>,
}

pub fn build_probe_features(
    params: &ModelParams,
    ds: &Dataset,
    cfg: &TrainConfig,
    kind: &str,
    seed: u64,
    vae: Option<&VaeParams>,
) -> Result<ProbeFeatures> {
    match kind {
        "yM-sample" => context_overlay_features(
            params,
            ds,
            cfg.m,
            cfg.tau_end,
            cfg.variant,
            ContextFeatureKind::Sample,
            seed,
        ),
        "yM-mode" => context_overlay_features(
            params,
            ds,
            cfg.m,
            cfg.tau_end,
            cfg.variant,
            ContextFeatureKind::Mode,
            seed,
        ),
        "random-yM" => context_overlay_features(
            params,
            ds,
            cfg.m,
            cfg.tau_end,
            cfg.variant,
            ContextFeatureKind::Random,
            seed,
        ),
        "abstract-a" => {
            abstract_features(params, ds, cfg.m, cfg.tau_end, cfg.variant, true, seed)
        }
        "image" => Ok(image_features(ds)),
        "vae-z" => {
            let vae = vae.ok_or_else(|| Error::usage("feature kind vae-z needs --vae-ckpt"))?;
            vae_features(vae, ds)
        }
        other => Err(Error::usage(format!(
            "unknown feature kind `{other}` (expected yM-sample|yM-mode|abstract-a|image|random-yM|vae-z)"
        ))),
    }
}

pub fn cmd_probe(args: &ProbeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let params = restore_pps(&ckpt)?;
    let cfg = &ckpt.config;
    let name = args.dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
    let n = if args.n_images == 0 { 600 } else { args.n_images };
    let ds = dataset_for(cfg, &name, args.data_root.as_deref(), Split::Test, n)?;
    if ds.labels.is_none() {
        return Err(Error::usage("probing needs a labeled dataset"));
    }
    let out = resolve_out(&args.out);
    let mut manifest = RunManifest::begin(
        "probe",
        serde_json::json!({ "dataset": name, "features": args.features, "n_images": ds.len() }),
        args.seed,
        vec![args.ckpt.display().to_string()],
        &out,
    )?;
    manifest.checkpoint_hash = Some(content_hash(&args.ckpt)?);
    manifest.write(&out)?;

    let vae = match &args.vae_ckpt {
        Some(p) => Some(restore_vae(&load_checkpoint(p)?)?),
        None => None,
    };
    let features =
        build_probe_features(&params, &ds, cfg, &args.features, args.seed, vae.as_ref())?;
    let seeds = [args.seed, args.seed + 1, args.seed + 2];
    let report = probe_train_eval(
        &args.features,
        &features,
        ds.labels.as_ref().expect("checked above"),
        &seeds,
        &ProbeConfig::default(),
    )?;
    println!(
        "probe {}: F1-macro {:.3} +/- {:.3} over seeds {:?}",
        report.feature_kind, report.f1_macro_mean, report.f1_macro_std, report.seeds
    );
    std::fs::write(out.join("probe_report.json"), serde_json::to_string_pretty(&report)?)?;
    manifest.finish(&out)
}

// ---- compare-random -------------------------------------------------------------

pub struct CompareArgs {
    pub ckpt: PathBuf,
    pub dataset: Option<String>,
    pub data_root: Option<PathBuf>,
    pub n_images: usize,
    pub out: PathBuf,
    pub seed: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct ImputationComparison {
    pub learned_mean: f64,
    pub random_mean: f64,
    pub learned_win_fraction: f64,
    pub n_images: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct CompareReport {
    pub imputation: ImputationComparison,
    pub probe_learned: ProbeReport,
    pub probe_random: ProbeReport,
}

/// Paired learned-vs-random imputation log-likelihoods over a dataset.
pub fn paired_imputation(
    params: &ModelParams,
    ds: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ImputationComparison> {
    let per: Vec<Result<(f64, f64)>> = ds
        .images
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let mut rng_l = rng_from(seed, &[0x6c656172, i as u64]);
            let ctx_l = infer_context_with_mode(
                params,
                y,
                cfg.m,
                cfg.tau_end,
                &mut rng_l,
                cfg.variant,
                SampleMode::Hard,
            )?;
            let mut rng_r = rng_from(seed, &[0x72616e64, i as u64]);
            let ctx_r = random_context(y, cfg.m, &mut rng_r)?;
            Ok((
                imputation_log_likelihood(params, &ctx_l, y)?,
                imputation_log_likelihood(params, &ctx_r, y)?,
            ))
        })
        .collect();
    let mut learned_sum = 0.0;
    let mut random_sum = 0.0;
    let mut wins = 0usize;
    for item in per {
        let (l, r) = item?;
        learned_sum += l;
        random_sum += r;
        if l > r {
            wins += 1;
        }
    }
    let n = ds.len();
    Ok(ImputationComparison {
        learned_mean: learned_sum / n as f64,
        random_mean: random_sum / n as f64,
        learned_win_fraction: wins as f64 / n as f64,
        n_images: n,
    })
}

pub fn cmd_compare_random(args: &CompareArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let params = restore_pps(&ckpt)?;
    let cfg = &ckpt.config;
    let name = args.dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
    let n = if args.n_images == 0 { 200 } else { args.n_images };
    let ds = dataset_for(cfg, &name, args.data_root.as_deref(), Split::Test, n)?;
    if ds.labels.is_none() {
        return Err(Error::usage("the probe half of compare-random needs labels"));
    }
    let out = resolve_out(&args.out);
    let mut manifest = RunManifest::begin(
        "compare-random",
        serde_json::json!({ "dataset": name, "n_images": ds.len(), "m": cfg.m }),
        args.seed,
        vec![args.ckpt.display().to_string()],
        &out,
    )?;
    manifest.checkpoint_hash = Some(content_hash(&args.ckpt)?);
    manifest.write(&out)?;

    let imputation = paired_imputation(&params, &ds, cfg, args.seed)?;
    let labels = ds.labels.as_ref().expect("checked above");
    let seeds = [args.seed, args.seed + 1, args.seed + 2];
    let feats_l = build_probe_features(&params, &ds, cfg, "yM-sample", args.seed, None)?;
    let feats_r = build_probe_features(&params, &ds, cfg, "random-yM", args.seed + 100, None)?;
    let probe_learned =
        probe_train_eval("yM-sample", &feats_l, labels, &seeds, &ProbeConfig::default())?;
    let probe_random =
        probe_train_eval("random-yM", &feats_r, labels, &seeds, &ProbeConfig::default())?;

    let report = CompareReport { imputation, probe_learned, probe_random };
    println!(
        "imputation: learned {:.3} vs random {:.3} (wins {:.1}%); probe F1: learned {:.3} vs random {:.3}",
        report.imputation.learned_mean,
        report.imputation.random_mean,
        100.0 * report.imputation.learned_win_fraction,
        report.probe_learned.f1_macro_mean,
        report.probe_random.f1_macro_mean,
    );
    std::fs::write(out.join("comparison.json"), serde_json::to_string_pretty(&report)?)?;
    manifest.finish(&out)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_root_env_resolves_relative_paths() {
        // Serialised via the single-threaded assumption of env mutation in
        // this test binary section; absolute paths pass through untouched.
        std::env::set_var(OUT_ROOT_ENV, "/tmp/ppsroot");
        assert_eq!(resolve_out(Path::new("runs/a")), PathBuf::from("/tmp/ppsroot/runs/a"));
        assert_eq!(resolve_out(Path::new("/abs/x")), PathBuf::from("/abs/x"));
        std::env::remove_var(OUT_ROOT_ENV);
        assert_eq!(resolve_out(Path::new("runs/a")), PathBuf::from("runs/a"));
    }

    #[test]
    fn shapes_eval_split_differs_from_train() {
        let cfg = TrainConfig { n_train: 32, height: 8, width: 8, ..TrainConfig::default() };
        let train = dataset_for(&cfg, "shapes", None, Split::Train, 32).unwrap();
        let test = dataset_for(&cfg, "shapes", None, Split::Test, 32).unwrap();
        assert_ne!(train.images[0], test.images[0]);
        assert_eq!(train.split, Split::Train);
        assert_eq!(test.split, Split::Test);
    }

    #[test]
    fn unknown_feature_kind_is_usage() {
        let cfg = TrainConfig { n_train: 8, height: 8, width: 8, m: 3, latent_dim: 3, hidden: 4, blocks: 1, ..TrainConfig::default() };
        let ds = dataset_for(&cfg, "shapes", None, Split::Test, 8).unwrap();
        let params = ModelParams::new(cfg.model_config(&[1, 8, 8]), 1).unwrap();
        let err = build_probe_features(&params, &ds, &cfg, "nope", 0, None).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
