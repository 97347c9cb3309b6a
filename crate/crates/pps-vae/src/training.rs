//! Optimisation loop, schedules, checkpointing, and metrics logging.
//!
//! Training is a pure function of (config, dataset): batch order, noise, and
//! the temperature schedule are all derived from the seed and the step
//! counter, so a run resumed from a checkpoint at step `s` is bitwise
//! identical to an uninterrupted run.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{SampleMode, Variant};
use crate::nn::{fnv1a, ModelConfig, ModelParams};
use crate::objective::{batch_grad, ElboBreakdown};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pps,
    Vae,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pps" => Ok(ModelKind::Pps),
            "vae" => Ok(ModelKind::Vae),
            other => Err(Error::usage(format!("unknown model `{other}` (expected pps|vae)"))),
        }
    }
}

/// Flat training configuration; see `README.md` for the config-file keys.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub variant: Variant,
    pub m: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub amsgrad: bool,
    pub epochs: usize,
    /// Hard cap on optimisation steps; 0 means no cap.
    pub max_steps: u64,
    pub batch_size: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub seed: u64,
    pub dataset: String,
    pub data_root: Option<String>,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub num_classes: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Pps,
            variant: Variant::Independent,
            m: 8,
            latent_dim: 16,
            hidden: 12,
            blocks: 2,
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            amsgrad: true,
            epochs: 63,
            max_steps: 2000,
            batch_size: 64,
            tau_start: 1.0,
            tau_end: 0.5,
            seed: 7,
            dataset: "shapes".into(),
            data_root: None,
            height: 16,
            width: 16,
            n_train: 2048,
            num_classes: 3,
            checkpoint_every: 500,
            log_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::usage("learning_rate must be positive"));
        }
        if !(self.tau_start >= self.tau_end && self.tau_end > 0.0) {
            return Err(Error::usage("need tau_start >= tau_end > 0"));
        }
        if self.epochs < 1 {
            return Err(Error::usage("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::usage("batch_size must be >= 1"));
        }
        Ok(())
    }

    pub fn model_config(&self, image_shape: &[usize]) -> ModelConfig {
        let mut mc = ModelConfig::new(image_shape[0], image_shape[1], image_shape[2]);
        mc.latent_dim = self.latent_dim;
        mc.hidden = self.hidden;
        mc.blocks = self.blocks;
        mc
    }

    /// Parses the flat `key = value` config format. Unknown keys are usage
    /// errors naming the key; omitted keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::usage(format!(
                    "config line {} is not `key = value`: `{raw}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let bad =
                |e: String| Error::usage(format!("config key `{key}`: bad value `{value}` ({e})"));
            match key {
                "model" => cfg.model = value.parse()?,
                "variant" => cfg.variant = value.parse()?,
                "m" => cfg.m = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "latent_dim" => cfg.latent_dim = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "hidden" => cfg.hidden = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "blocks" => cfg.blocks = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "learning_rate" => cfg.learning_rate = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "amsgrad" => cfg.amsgrad = value.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?,
                "epochs" => cfg.epochs = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "max_steps" => cfg.max_steps = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "tau_start" => cfg.tau_start = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "tau_end" => cfg.tau_end = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "seed" => cfg.seed = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "dataset" => cfg.dataset = value.to_string(),
                "data_root" => cfg.data_root = Some(value.to_string()),
                "height" => cfg.height = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "width" => cfg.width = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "n_train" => cfg.n_train = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "num_classes" => cfg.num_classes = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "checkpoint_every" => cfg.checkpoint_every = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "log_every" => cfg.log_every = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                other => return Err(Error::usage(format!("unknown config key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One metrics line, appended as JSON per log interval.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub elbo: f64,
    pub target_ll: f64,
    pub kl_a: f64,
    pub context_ll: f64,
    pub location_ratio: f64,
    pub grad_norm: f64,
    pub tau: f64,
    pub seconds: f64,
}

// ---- optimiser ----------------------------------------------------------------

/// Adam with decoupled weight decay and optional amsgrad.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub amsgrad: bool,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub vmax: Vec<f64>,
}

impl AdamW {
    pub fn new(n: usize, lr: f64, weight_decay: f64, amsgrad: bool) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            amsgrad,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            vmax: vec![0.0; n],
        }
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let vhat = if self.amsgrad {
                self.vmax[i] = self.vmax[i].max(self.v[i]);
                self.vmax[i] / bc2
            } else {
                self.v[i] / bc2
            };
            let mhat = self.m[i] / bc1;
            params[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

// ---- checkpoints ----------------------------------------------------------------

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PPSVCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate: parameters, optimiser state, the
/// step counter, and a config echo.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    pub step: u64,
    pub params: Vec<f64>,
    pub opt_m: Vec<f64>,
    pub opt_v: Vec<f64>,
    pub opt_vmax: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    model_config: ModelConfig,
    step: u64,
    params_len: u64,
}

impl Checkpoint {
    /// Rebuilds the model this checkpoint describes.
    pub fn restore_model(&self) -> Result<ModelParams> {
        let mut params = ModelParams::new(self.model_config.clone(), self.config.seed)?;
        if params.store.len() != self.params.len() {
            return Err(Error::CheckpointIntegrity(format!(
                "parameter count mismatch: store {} vs checkpoint {}",
                params.store.len(),
                self.params.len()
            )));
        }
        params.store.data_mut().copy_from_slice(&self.params);
        Ok(params)
    }

    pub fn optimizer(&self) -> AdamW {
        let mut opt = AdamW::new(
            self.params.len(),
            self.config.learning_rate,
            self.config.weight_decay,
            self.config.amsgrad,
        );
        opt.step = self.step;
        opt.m = self.opt_m.clone();
        opt.v = self.opt_v.clone();
        opt.vmax = self.opt_vmax.clone();
        opt
    }
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend((values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend(v.to_le_bytes());
    }
}

fn take_u64(buf: &[u8], pos: &mut usize) -> Result<u64> {
    if *pos + 8 > buf.len() {
        return Err(Error::CheckpointIntegrity("truncated file".into()));
    }
    let v = u64::from_le_bytes(buf[*pos..*pos + 8].try_into().unwrap());
    *pos += 8;
    Ok(v)
}

fn take_f64s(buf: &[u8], pos: &mut usize) -> Result<Vec<f64>> {
    let n = take_u64(buf, pos)? as usize;
    if *pos + 8 * n > buf.len() {
        return Err(Error::CheckpointIntegrity("truncated array".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f64::from_le_bytes(buf[*pos..*pos + 8].try_into().unwrap()));
        *pos += 8;
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        config: ckpt.config.clone(),
        model_config: ckpt.model_config.clone(),
        step: ckpt.step,
        params_len: ckpt.params.len() as u64,
    })?;
    let mut payload = Vec::new();
    payload.extend((header.len() as u64).to_le_bytes());
    payload.extend(&header);
    push_f64s(&mut payload, &ckpt.params);
    push_f64s(&mut payload, &ckpt.opt_m);
    push_f64s(&mut payload, &ckpt.opt_v);
    push_f64s(&mut payload, &ckpt.opt_vmax);

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&payload)?;
    out.write_all(&fnv1a(payload.iter().copied()).to_le_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 20 {
        return Err(Error::CheckpointIntegrity("file too short".into()));
    }
    if raw[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointIntegrity("bad magic".into()));
    }
    let version = u32::from_le_bytes(raw[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let payload = &raw[12..raw.len() - 8];
    let stored = u64::from_le_bytes(raw[raw.len() - 8..].try_into().unwrap());
    let digest = fnv1a(payload.iter().copied());
    if digest != stored {
        return Err(Error::CheckpointIntegrity("digest mismatch".into()));
    }

    let mut pos = 0usize;
    let header_len = take_u64(payload, &mut pos)? as usize;
    if pos + header_len > payload.len() {
        return Err(Error::CheckpointIntegrity("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&payload[pos..pos + header_len])?;
    pos += header_len;
    let params = take_f64s(payload, &mut pos)?;
    let opt_m = take_f64s(payload, &mut pos)?;
    let opt_v = take_f64s(payload, &mut pos)?;
    let opt_vmax = take_f64s(payload, &mut pos)?;
    if params.len() != header.params_len as usize {
        return Err(Error::CheckpointIntegrity("parameter count mismatch".into()));
    }
    Ok(Checkpoint {
        config: header.config,
        model_config: header.model_config,
        step: header.step,
        params,
        opt_m,
        opt_v,
        opt_vmax,
    })
}

// ---- the loop ----------------------------------------------------------------

/// Total optimisation steps implied by the config.
pub fn total_steps(cfg: &TrainConfig, dataset_len: usize) -> u64 {
    let per_epoch = dataset_len.div_ceil(cfg.batch_size) as u64;
    let by_epochs = per_epoch * cfg.epochs as u64;
    if cfg.max_steps > 0 {
        by_epochs.min(cfg.max_steps)
    } else {
        by_epochs
    }
}

/// Linear temperature anneal over the whole run.
pub fn tau_at(cfg: &TrainConfig, step: u64, total: u64) -> f64 {
    if total <= 1 {
        return cfg.tau_start;
    }
    let frac = step as f64 / (total - 1) as f64;
    cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac
}

fn per_image_seed(cfg: &TrainConfig, step: u64, slot: usize) -> u64 {
    derive_seed(cfg.seed, &[0x7374_6570, step, slot as u64])
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// Trains from scratch or resumes from `start`. When `out_dir` is given,
/// writes `metrics.jsonl`, scheduled `ckpt_*.bin` files, and `ckpt_final.bin`.
pub fn train(
    cfg: &TrainConfig,
    ds: &Dataset,
    out_dir: Option<&Path>,
    start: Option<Checkpoint>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.model != ModelKind::Pps {
        return Err(Error::usage("train() drives the PPS model; use vae_train for the baseline"));
    }
    let shape = ds.image_shape().to_vec();
    let mut params = match &start {
        Some(ckpt) => ckpt.restore_model()?,
        None => ModelParams::new(cfg.model_config(&shape), cfg.seed)?,
    };
    let mut opt = match &start {
        Some(ckpt) => ckpt.optimizer(),
        None => AdamW::new(params.store.len(), cfg.learning_rate, cfg.weight_decay, cfg.amsgrad),
    };
    let start_step = start.as_ref().map(|c| c.step).unwrap_or(0);
    let total = total_steps(cfg, ds.len());
    let per_epoch = ds.len().div_ceil(cfg.batch_size) as u64;

    let mut metrics = Vec::new();
    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let started = Instant::now();

    let make_ckpt = |params: &ModelParams, opt: &AdamW, step: u64| Checkpoint {
        config: cfg.clone(),
        model_config: params.config.clone(),
        step,
        params: params.store.data().to_vec(),
        opt_m: opt.m.clone(),
        opt_v: opt.v.clone(),
        opt_vmax: opt.vmax.clone(),
    };

    for step in start_step..total {
        let epoch = step / per_epoch;
        let batch_idx = (step % per_epoch) as usize;
        let epoch_seed = derive_seed(cfg.seed, &[0x6570_6f63, epoch]);
        let batches = crate::data::batch_iter(ds, cfg.batch_size, epoch_seed, true)?;
        let indices = &batches[batch_idx];
        let images: Vec<Tensor> = indices.iter().map(|&i| ds.images[i].clone()).collect();
        let seeds: Vec<u64> = (0..images.len()).map(|i| per_image_seed(cfg, step, i)).collect();
        let tau = tau_at(cfg, step, total);

        let result = batch_grad(
            &params,
            &images,
            cfg.m,
            tau,
            &seeds,
            cfg.variant,
            SampleMode::Soft,
            true,
        )?;
        let grad = result.grad.as_ref().expect("gradients requested");
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();

        if !result.mean_breakdown.all_finite() || !grad_norm.is_finite() {
            let term = result.mean_breakdown.offending_term().unwrap_or("grad_norm").to_string();
            if let Some(dir) = out_dir {
                save_checkpoint(&make_ckpt(&params, &opt, step), &dir.join("ckpt_lastgood.bin"))?;
            }
            return Err(Error::NonFinite { step, term });
        }

        opt.apply(params.store.data_mut(), grad);

        let last = step + 1 == total;
        if step % cfg.log_every == 0 || last {
            let row = metrics_row(step, &result.mean_breakdown, grad_norm, tau, &started);
            if let Some(f) = metrics_file.as_mut() {
                serde_json::to_writer(&mut *f, &row)?;
                f.write_all(b"\n")?;
            }
            metrics.push(row);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && !last {
                save_checkpoint(
                    &make_ckpt(&params, &opt, step + 1),
                    &dir.join(format!("ckpt_{:06}.bin", step + 1)),
                )?;
            }
        }
    }
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }

    let final_ckpt = make_ckpt(&params, &opt, total);
    if let Some(dir) = out_dir {
        save_checkpoint(&final_ckpt, &dir.join("ckpt_final.bin"))?;
    }
    Ok(TrainOutput { checkpoint: final_ckpt, metrics })
}

fn metrics_row(
    step: u64,
    b: &ElboBreakdown,
    grad_norm: f64,
    tau: f64,
    started: &Instant,
) -> MetricsRow {
    MetricsRow {
        step,
        elbo: b.elbo,
        target_ll: b.target_ll,
        kl_a: b.kl_a,
        context_ll: b.context_ll,
        location_ratio: b.location_ratio,
        grad_norm,
        tau,
        seconds: started.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_shapes;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            m: 3,
            latent_dim: 4,
            hidden: 4,
            blocks: 1,
            batch_size: 4,
            epochs: 100,
            max_steps: 6,
            n_train: 16,
            height: 8,
            width: 8,
            learning_rate: 1e-3,
            log_every: 2,
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(cfg: &TrainConfig) -> Dataset {
        synth_shapes(cfg.n_train, cfg.height, cfg.width, cfg.num_classes, 3).unwrap()
    }

    #[test]
    fn config_file_roundtrip_and_unknown_key() {
        let cfg = TrainConfig::from_text("m = 5\nlearning_rate = 1e-3\n# comment\nvariant = autoregressive\n").unwrap();
        assert_eq!(cfg.m, 5);
        assert_eq!(cfg.variant, Variant::Autoregressive);
        assert_eq!(cfg.learning_rate, 1e-3);

        let err = TrainConfig::from_text("mystery = 1\n").unwrap_err();
        match err {
            Error::Usage(msg) => assert!(msg.contains("mystery")),
            other => panic!("expected usage error, got {other}"),
        }
        assert!(TrainConfig::from_text("tau_end = 2.0\n").is_err());
    }

    #[test]
    fn adamw_shrinks_quadratic() {
        let mut opt = AdamW::new(2, 0.05, 0.0, true);
        let mut p = vec![2.0, -3.0];
        for _ in 0..400 {
            let g: Vec<f64> = p.iter().map(|&x| 2.0 * x).collect();
            opt.apply(&mut p, &g);
        }
        assert!(p.iter().all(|&x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_cfg();
        let ds = tiny_data(&cfg);
        let a = train(&cfg, &ds, None, None).unwrap();
        let b = train(&cfg, &ds, None, None).unwrap();
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        let rows_a: Vec<_> = a.metrics.iter().map(|r| (r.step, r.elbo, r.grad_norm)).collect();
        let rows_b: Vec<_> = b.metrics.iter().map(|r| (r.step, r.elbo, r.grad_norm)).collect();
        assert_eq!(rows_a, rows_b);
        assert!(a.metrics.iter().all(|r| r.grad_norm.is_finite()));
    }

    #[test]
    fn checkpoint_roundtrip_bitwise_and_integrity() {
        let cfg = tiny_cfg();
        let ds = tiny_data(&cfg);
        let out = train(&cfg, &ds, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_checkpoint(&out.checkpoint, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded, out.checkpoint);
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // Corrupt trailing bytes: integrity error, no partial state.
        let mut bytes = std::fs::read(&p1).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xff;
        let p3 = dir.path().join("c.bin");
        std::fs::write(&p3, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p3), Err(Error::CheckpointIntegrity(_))));

        // Truncated file.
        std::fs::write(&p3, &bytes[..n / 2]).unwrap();
        assert!(matches!(load_checkpoint(&p3), Err(Error::CheckpointIntegrity(_))));

        // Version bump is an explicit incompatibility.
        let mut vbytes = std::fs::read(&p1).unwrap();
        vbytes[8] = 99;
        std::fs::write(&p3, &vbytes).unwrap();
        assert!(matches!(load_checkpoint(&p3), Err(Error::CheckpointVersion { .. })));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let mut cfg = tiny_cfg();
        cfg.max_steps = 8;
        cfg.checkpoint_every = 5;
        let ds = tiny_data(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let full = train(&cfg, &ds, Some(dir.path()), None).unwrap();

        // Pick up the scheduled mid-run checkpoint and keep going.
        let mid = load_checkpoint(&dir.path().join("ckpt_000005.bin")).unwrap();
        assert_eq!(mid.step, 5);
        let resumed = train(&cfg, &ds, None, Some(mid)).unwrap();
        assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
        assert_eq!(resumed.checkpoint.opt_m, full.checkpoint.opt_m);
        assert_eq!(resumed.checkpoint.opt_vmax, full.checkpoint.opt_vmax);
    }

    #[test]
    fn tau_schedule_is_linear() {
        let cfg = tiny_cfg();
        assert_eq!(tau_at(&cfg, 0, 5), 1.0);
        assert_eq!(tau_at(&cfg, 4, 5), 0.5);
        let mid = tau_at(&cfg, 2, 5);
        assert!((mid - 0.75).abs() < 1e-12);
    }
}
