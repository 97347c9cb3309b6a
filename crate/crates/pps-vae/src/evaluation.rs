//! Quantitative surfaces: the random-context baseline, paired imputation
//! comparison, frozen-feature probe classification, a vanilla VAE baseline,
//! and a pixel-space diversity proxy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::distributions::{reparam_gaussian_sample, DiagGaussianParams, SimplexVector};
use crate::error::{Error, Result};
use crate::generative::{convcnp_predict, CnpPrediction};
use crate::inference::{
    infer_abstract, infer_context_with_mode, lookup_values, ContextSet, SampleMode, Variant,
};
use crate::nn::{
    apply_conv_net, apply_gaussian_head, register_conv_net, register_gaussian_head,
    split_mean_scale_maps, BoundParams, ConvNet, GaussianVectorHead, ModelConfig, ModelParams,
    ParamStore,
};
use crate::rng::{derive_seed, rng_from};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{AdamW, MetricsRow, TrainConfig};

// ---- PPS-RAND ------------------------------------------------------------------

/// Uniform context baseline: exactly `m` distinct locations, values by lookup.
pub fn random_context(y: &Tensor, m: usize, rng: &mut ChaCha8Rng) -> Result<ContextSet> {
    let shape = y.shape();
    if shape.len() != 3 {
        return Err(Error::contract("image must be C x H x W"));
    }
    let (h, w) = (shape[1], shape[2]);
    let k = h * w;
    if m < 1 || m >= k {
        return Err(Error::contract(format!("M must satisfy 1 <= M < H*W, got {m}")));
    }
    // Partial Fisher-Yates: the first m entries are a uniform sample without
    // replacement.
    let mut pool: Vec<usize> = (0..k).collect();
    for i in 0..m {
        let j = rng.random_range(i..k);
        pool.swap(i, j);
    }
    let mut mask = Tensor::zeros(&[h, w]);
    let mut onehots = Vec::with_capacity(m);
    for &p in &pool[..m] {
        mask.data_mut()[p] = 1.0;
        onehots.push(SimplexVector::one_hot(k, p)?);
    }
    let values = lookup_values(y, &mask)?;
    Ok(ContextSet { mask, values, onehots, m })
}

// ---- imputation ------------------------------------------------------------------

/// Mean per-target-pixel Gaussian log-density of `y` under the ConvCNP
/// prediction from `ctx`.
pub fn imputation_log_likelihood(params: &ModelParams, ctx: &ContextSet, y: &Tensor) -> Result<f64> {
    let pred = convcnp_predict(params, &ctx.mask, &ctx.values)?;
    imputation_ll_from_prediction(&pred, ctx, y)
}

/// Scoring half of [`imputation_log_likelihood`], reusable with an externally
/// constructed prediction.
pub fn imputation_ll_from_prediction(
    pred: &CnpPrediction,
    ctx: &ContextSet,
    y: &Tensor,
) -> Result<f64> {
    let plane = ctx.mask.len();
    let c = y.shape()[0];
    let targets = plane - ctx.mask.popcount();
    if targets == 0 {
        return Err(Error::contract("no target pixels to impute"));
    }
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for ci in 0..c {
        for p in 0..plane {
            if ctx.mask.data()[p] == 1.0 {
                continue;
            }
            let i = ci * plane + p;
            let s = pred.scale.data()[i];
            let z = (y.data()[i] - pred.mean.data()[i]) / s;
            total += -0.5 * ln_2pi - s.ln() - 0.5 * z * z;
        }
    }
    Ok(total / (targets * c) as f64)
}

// ---- probes ------------------------------------------------------------------

/// Frozen features handed to the probe: spatial stacks (mask + values
/// overlays, or raw images) or flat vectors (abstract latents, VAE codes).
#[derive(Debug, Clone)]
pub enum ProbeFeatures {
    Spatial(Vec<Tensor>),
    Vector(Vec<Vec<f64>>),
}

impl ProbeFeatures {
    pub fn len(&self) -> usize {
        match self {
            ProbeFeatures::Spatial(v) => v.len(),
            ProbeFeatures::Vector(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbeReport {
    pub feature_kind: String,
    pub f1_macro_mean: f64,
    pub f1_macro_std: f64,
    pub f1_per_seed: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    /// Random crop + horizontal flip on spatial features.
    pub augment: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 12,
            learning_rate: 1e-2,
            batch_size: 32,
            max_epochs: 30,
            patience: 6,
            val_fraction: 0.25,
            augment: true,
        }
    }
}

/// Macro-averaged F1 over classes.
pub fn f1_macro(pred: &[usize], truth: &[usize], num_classes: usize) -> f64 {
    let mut f1_sum = 0.0;
    for c in 0..num_classes {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t != c).count() as f64;
        let fn_ = pred.iter().zip(truth).filter(|&(&p, &t)| p != c && t == c).count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        f1_sum += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
    }
    f1_sum / num_classes as f64
}

/// Probe classifier: three plain conv layers pooled into a linear head for
/// spatial features, or a 3-layer ReLU MLP for vector features.
struct Probe {
    store: ParamStore,
    net: ProbeNet,
}

enum ProbeNet {
    Conv {
        layers: Vec<(crate::nn::ParamId, crate::nn::ParamId)>,
        fc: (crate::nn::ParamId, crate::nn::ParamId),
        slope: f64,
    },
    Mlp {
        layers: Vec<(crate::nn::ParamId, crate::nn::ParamId)>,
    },
}

impl Probe {
    fn new_spatial(in_channels: usize, hidden: usize, num_classes: usize, seed: u64) -> Self {
        use crate::nn::Init;
        let mut store = ParamStore::default();
        let mut rng = rng_from(seed, &[0x696e6974]);
        let mut layers = Vec::new();
        let mut ch = in_channels;
        for l in 0..3 {
            let w = store.register(
                &format!("c{l}.weight"),
                &[hidden, ch, 3, 3],
                Init::FanInUniform(ch * 9),
                &mut rng,
            );
            let b = store.register(&format!("c{l}.bias"), &[hidden], Init::Zeros, &mut rng);
            layers.push((w, b));
            ch = hidden;
        }
        let fc_w = store.register(
            "fc.weight",
            &[num_classes, hidden],
            Init::FanInUniform(hidden),
            &mut rng,
        );
        let fc_b = store.register("fc.bias", &[num_classes], Init::Zeros, &mut rng);
        Probe { store, net: ProbeNet::Conv { layers, fc: (fc_w, fc_b), slope: 0.01 } }
    }

    fn new_vector(in_dim: usize, num_classes: usize, seed: u64) -> Self {
        use crate::nn::Init;
        let mut store = ParamStore::default();
        let mut rng = rng_from(seed, &[0x696e6974]);
        let dims = [in_dim, 64, 64, num_classes];
        let mut layers = Vec::new();
        for l in 0..3 {
            let w = store.register(
                &format!("l{l}.weight"),
                &[dims[l + 1], dims[l]],
                Init::FanInUniform(dims[l]),
                &mut rng,
            );
            let b = store.register(&format!("l{l}.bias"), &[dims[l + 1]], Init::Zeros, &mut rng);
            layers.push((w, b));
        }
        Probe { store, net: ProbeNet::Mlp { layers } }
    }

    fn logits(&self, tape: &mut Tape, bp: &mut BoundParams, input: &Tensor) -> Result<crate::tape::Var> {
        let mut h = tape.leaf(input.clone());
        match &self.net {
            ProbeNet::Conv { layers, fc, slope } => {
                for &(w, b) in layers {
                    let wv = bp.get(tape, w);
                    let bv = bp.get(tape, b);
                    h = tape.conv2d(h, wv, bv, crate::tape::Padding::Zero)?;
                    h = tape.leaky_relu(h, *slope);
                }
                let pooled = tape.mean_pool_spatial(h)?;
                let w = bp.get(tape, fc.0);
                let b = bp.get(tape, fc.1);
                tape.linear(pooled, w, b)
            }
            ProbeNet::Mlp { layers } => {
                for (l, &(w, b)) in layers.iter().enumerate() {
                    let wv = bp.get(tape, w);
                    let bv = bp.get(tape, b);
                    h = tape.linear(h, wv, bv)?;
                    if l + 1 < layers.len() {
                        h = tape.leaky_relu(h, 0.0); // plain ReLU
                    }
                }
                Ok(h)
            }
        }
    }
}

/// Random shifted crop out of a zero-padded frame plus horizontal flip.
fn augment_spatial(t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let pad = 2usize;
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    let flip = rng.random::<f64>() < 0.5;
    let mut out = Tensor::zeros(s);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = y as isize + dy as isize - pad as isize;
                let sx = x as isize + dx as isize - pad as isize;
                let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    let sx = if flip { w as isize - 1 - sx } else { sx };
                    t.data()[(ci * h + sy as usize) * w + sx as usize]
                } else {
                    0.0
                };
                out.data_mut()[(ci * h + y) * w + x] = v;
            }
        }
    }
    out
}

/// Trains the probe for one seed and returns the best validation F1-macro.
/// Upstream features are fixed inputs; only probe parameters move.
fn run_probe_seed(
    features: &ProbeFeatures,
    labels: &[usize],
    num_classes: usize,
    seed: u64,
    pcfg: &ProbeConfig,
) -> Result<f64> {
    let n = features.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(seed, &[0x70726f62]);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_val = (((n as f64) * pcfg.val_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut probe = match features {
        ProbeFeatures::Spatial(images) => {
            Probe::new_spatial(images[0].shape()[0], pcfg.hidden, num_classes, seed)
        }
        ProbeFeatures::Vector(vecs) => Probe::new_vector(vecs[0].len(), num_classes, seed),
    };
    let spatial = matches!(features, ProbeFeatures::Spatial(_));

    let feature_tensor = |i: usize| -> Tensor {
        match features {
            ProbeFeatures::Spatial(v) => v[i].clone(),
            ProbeFeatures::Vector(v) => {
                Tensor::from_vec(&[v[i].len()], v[i].clone()).expect("vector feature")
            }
        }
    };

    let evaluate = |probe: &Probe, idx: &[usize]| -> Result<f64> {
        let preds: Vec<Result<usize>> = idx
            .par_iter()
            .map(|&i| {
                let mut tape = Tape::new();
                let mut bp = BoundParams::new(&probe.store);
                let logits = probe.logits(&mut tape, &mut bp, &feature_tensor(i))?;
                Ok(tape.value(logits).argmax())
            })
            .collect();
        let mut pred = Vec::with_capacity(idx.len());
        for p in preds {
            pred.push(p?);
        }
        let truth: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        Ok(f1_macro(&pred, &truth, num_classes))
    };

    let mut opt = AdamW::new(probe.store.len(), pcfg.learning_rate, 0.0, true);
    let mut best_f1 = evaluate(&probe, val_idx)?;
    let mut stale = 0usize;

    for epoch in 0..pcfg.max_epochs {
        let mut order = train_idx.to_vec();
        let mut erng = rng_from(seed, &[0x65706f63, epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = erng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(pcfg.batch_size) {
            let per: Vec<Result<Vec<f64>>> = chunk
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let input = if spatial && pcfg.augment {
                        let mut arng =
                            rng_from(seed, &[0x617567, epoch as u64, slot as u64, i as u64]);
                        augment_spatial(&feature_tensor(i), &mut arng)
                    } else {
                        feature_tensor(i)
                    };
                    let mut tape = Tape::new();
                    let mut bp = BoundParams::new(&probe.store);
                    let logits = probe.logits(&mut tape, &mut bp, &input)?;
                    let onehot = tape.leaf(
                        Tensor::from_vec(&[num_classes], {
                            let mut v = vec![0.0; num_classes];
                            v[labels[i]] = 1.0;
                            v
                        })
                        .expect("one-hot"),
                    );
                    let ll = tape.log_softmax_dot(onehot, logits)?;
                    let loss = tape.scale(ll, -1.0);
                    let grads = tape.backward(loss)?;
                    Ok(bp.gather_grads(&grads))
                })
                .collect();
            let mut grad = vec![0.0; probe.store.len()];
            let scale = 1.0 / chunk.len() as f64;
            for g in per {
                for (o, v) in grad.iter_mut().zip(g?.iter()) {
                    *o += v * scale;
                }
            }
            opt.apply(probe.store.data_mut(), &grad);
        }
        let f1 = evaluate(&probe, val_idx)?;
        if f1 > best_f1 + 1e-9 {
            best_f1 = f1;
            stale = 0;
        } else {
            stale += 1;
            if stale >= pcfg.patience {
                break;
            }
        }
    }
    Ok(best_f1)
}

/// Classifier probe on frozen features: small conv stack for spatial
/// features, 3-layer MLP for vector features, early stopping on a validation
/// split, mean/std F1-macro over seeds.
pub fn probe_train_eval(
    feature_kind: &str,
    features: &ProbeFeatures,
    labels: &[usize],
    seeds: &[u64],
    pcfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::usage("features and labels must align and be nonempty"));
    }
    if seeds.len() < 3 {
        return Err(Error::usage("probe reports need at least 3 seeds"));
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let distinct = {
        let mut seen = vec![false; num_classes];
        for &l in labels {
            seen[l] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::usage("probe needs at least two classes"));
    }
    let mut f1s = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        f1s.push(run_probe_seed(features, labels, num_classes, seed, pcfg)?);
    }
    let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
    let var = f1s.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / f1s.len() as f64;
    Ok(ProbeReport {
        feature_kind: feature_kind.to_string(),
        f1_macro_mean: mean,
        f1_macro_std: var.sqrt(),
        f1_per_seed: f1s,
        seeds: seeds.to_vec(),
    })
}

// ---- feature extraction ---------------------------------------------------------

/// Mask+values overlays from the model's inferred contexts (`sample` uses
/// hard draws, `mode` takes per-step argmaxes), or from the uniform baseline.
pub fn context_overlay_features(
    params: &ModelParams,
    ds: &Dataset,
    m: usize,
    tau: f64,
    variant: Variant,
    kind: ContextFeatureKind,
    seed: u64,
) -> Result<ProbeFeatures> {
    let mut out = Vec::with_capacity(ds.len());
    for (i, y) in ds.images.iter().enumerate() {
        let mut rng = rng_from(seed, &[0x66656174, i as u64]);
        let ctx = match kind {
            ContextFeatureKind::Sample => {
                infer_context_with_mode(params, y, m, tau, &mut rng, variant, SampleMode::Hard)?
            }
            ContextFeatureKind::Mode => {
                infer_context_with_mode(params, y, m, tau, &mut rng, variant, SampleMode::Mode)?
            }
            ContextFeatureKind::Random => random_context(y, m, &mut rng)?,
        };
        out.push(overlay(&ctx));
    }
    Ok(ProbeFeatures::Spatial(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextFeatureKind {
    Sample,
    Mode,
    Random,
}

/// Stack the mask as an extra channel on top of the looked-up values.
pub fn overlay(ctx: &ContextSet) -> Tensor {
    let (h, w) = (ctx.mask.shape()[0], ctx.mask.shape()[1]);
    let c = ctx.values.shape()[0];
    let mut data = Vec::with_capacity((c + 1) * h * w);
    data.extend_from_slice(ctx.mask.data());
    data.extend_from_slice(ctx.values.data());
    Tensor::from_vec(&[c + 1, h, w], data).expect("overlay shape")
}

/// Abstract-latent posterior means (or samples) as vector features.
pub fn abstract_features(
    params: &ModelParams,
    ds: &Dataset,
    m: usize,
    tau: f64,
    variant: Variant,
    use_mean: bool,
    seed: u64,
) -> Result<ProbeFeatures> {
    let mut out = Vec::with_capacity(ds.len());
    for (i, y) in ds.images.iter().enumerate() {
        let mut rng = rng_from(seed, &[0x61666561, i as u64]);
        let ctx = infer_context_with_mode(params, y, m, tau, &mut rng, variant, SampleMode::Hard)?;
        let latent = infer_abstract(params, &ctx, &mut rng)?;
        let v = if use_mean { latent.posterior.mean } else { latent.sample };
        out.push(v.into_data());
    }
    Ok(ProbeFeatures::Vector(out))
}

pub fn image_features(ds: &Dataset) -> ProbeFeatures {
    ProbeFeatures::Spatial(ds.images.clone())
}

// ---- vanilla VAE baseline ---------------------------------------------------------

/// Encoder to a diagonal Gaussian over z, decoder from a spatial broadcast of
/// z back to per-pixel mean/scale.
#[derive(Debug, Clone)]
pub struct VaeParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: GaussianVectorHead,
    pub decoder: ConvNet,
}

impl VaeParams {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut rng = rng_from(seed, &[0x766165]);
        let encoder =
            register_gaussian_head(&mut store, "encoder", config.channels, config.latent_dim, &config, &mut rng);
        let decoder = register_conv_net(
            &mut store,
            "decoder",
            config.latent_dim,
            2 * config.channels,
            &config,
            &mut rng,
        );
        Ok(VaeParams { config, store, encoder, decoder })
    }
}

pub struct VaeElbo {
    pub reconstruction: f64,
    pub kl: f64,
    pub elbo: f64,
}

fn vae_elbo_tape(
    params: &VaeParams,
    y: &Tensor,
    rng: &mut ChaCha8Rng,
    with_grad: bool,
) -> Result<(VaeElbo, Option<Vec<f64>>)> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&params.store);
    let y_leaf = tape.leaf(y.clone());
    let (mu, sigma) = apply_gaussian_head(&mut tape, &mut bp, &params.encoder, y_leaf, cfg)?;
    let eps = reparam_gaussian_sample(&DiagGaussianParams::standard(&[cfg.latent_dim]), rng);
    let eps_leaf = tape.leaf(eps);
    let noise = tape.mul(sigma, eps_leaf)?;
    let z = tape.add(mu, noise)?;
    let field = tape.broadcast_spatial(z, cfg.height, cfg.width)?;
    let maps = apply_conv_net(&mut tape, &mut bp, &params.decoder, field, cfg)?;
    let (mean, scale) = split_mean_scale_maps(&mut tape, maps, cfg.channels)?;
    let ones = tape.leaf(Tensor::full(&[cfg.height, cfg.width], 1.0));
    let recon = tape.weighted_gaussian_log_prob(y, ones, mean, scale)?;
    let kl = tape.gaussian_kl_std_normal(mu, sigma)?;
    let elbo = tape.affine(&[(recon, 1.0), (kl, -1.0)])?;
    let result = VaeElbo {
        reconstruction: tape.value(recon).item(),
        kl: tape.value(kl).item(),
        elbo: tape.value(elbo).item(),
    };
    let grad = if with_grad {
        let grads = tape.backward(elbo)?;
        Some(bp.gather_grads(&grads))
    } else {
        None
    };
    Ok((result, grad))
}

/// Single-sample VAE ELBO: full-image reconstruction likelihood minus the
/// closed-form KL.
pub fn vae_elbo(params: &VaeParams, y: &Tensor, rng: &mut ChaCha8Rng) -> Result<VaeElbo> {
    Ok(vae_elbo_tape(params, y, rng, false)?.0)
}

/// Trains the baseline with the same optimiser settings and schedules as the
/// main model (temperature does not apply).
pub fn vae_train(cfg: &TrainConfig, ds: &Dataset) -> Result<(VaeParams, Vec<MetricsRow>)> {
    cfg.validate()?;
    let shape = ds.image_shape();
    let mut params = VaeParams::new(cfg.model_config(shape), cfg.seed)?;
    let mut opt = AdamW::new(params.store.len(), cfg.learning_rate, cfg.weight_decay, cfg.amsgrad);
    let total = crate::training::total_steps(cfg, ds.len());
    let per_epoch = ds.len().div_ceil(cfg.batch_size) as u64;
    let started = std::time::Instant::now();
    let mut metrics = Vec::new();

    for step in 0..total {
        let epoch = step / per_epoch;
        let epoch_seed = derive_seed(cfg.seed, &[0x76657063, epoch]);
        let batches = crate::data::batch_iter(ds, cfg.batch_size, epoch_seed, true)?;
        let indices = &batches[(step % per_epoch) as usize];
        let per: Vec<Result<(VaeElbo, Vec<f64>)>> = indices
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut rng = rng_from(cfg.seed, &[0x76616573, step, slot as u64]);
                let (e, g) = vae_elbo_tape(&params, &ds.images[i], &mut rng, true)?;
                Ok((e, g.expect("gradient requested")))
            })
            .collect();
        let n = indices.len() as f64;
        let mut grad = vec![0.0; params.store.len()];
        let mut mean_elbo = 0.0;
        let mut mean_recon = 0.0;
        let mut mean_kl = 0.0;
        for item in per {
            let (e, g) = item?;
            mean_elbo += e.elbo / n;
            mean_recon += e.reconstruction / n;
            mean_kl += e.kl / n;
            for (o, v) in grad.iter_mut().zip(g.iter()) {
                *o -= v / n;
            }
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !mean_elbo.is_finite() {
            return Err(Error::NonFinite { step, term: "elbo".into() });
        }
        opt.apply(params.store.data_mut(), &grad);
        if step % cfg.log_every == 0 || step + 1 == total {
            metrics.push(MetricsRow {
                step,
                elbo: mean_elbo,
                target_ll: mean_recon,
                kl_a: mean_kl,
                context_ll: 0.0,
                location_ratio: 0.0,
                grad_norm,
                tau: 0.0,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok((params, metrics))
}

/// Decode standard-normal draws to predictive means.
pub fn vae_generate(params: &VaeParams, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    let cfg = &params.config;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z = reparam_gaussian_sample(&DiagGaussianParams::standard(&[cfg.latent_dim]), rng);
        let mut tape = Tape::new();
        let mut bp = BoundParams::new(&params.store);
        let z_leaf = tape.leaf(z);
        let field = tape.broadcast_spatial(z_leaf, cfg.height, cfg.width)?;
        let maps = apply_conv_net(&mut tape, &mut bp, &params.decoder, field, cfg)?;
        let (mean, _scale) = split_mean_scale_maps(&mut tape, maps, cfg.channels)?;
        out.push(tape.value(mean).clone());
    }
    Ok(out)
}

/// VAE posterior means as probe features.
pub fn vae_features(params: &VaeParams, ds: &Dataset) -> Result<ProbeFeatures> {
    let cfg = &params.config;
    let mut out = Vec::with_capacity(ds.len());
    for y in &ds.images {
        let mut tape = Tape::new();
        let mut bp = BoundParams::new(&params.store);
        let y_leaf = tape.leaf(y.clone());
        let (mu, _sigma) = apply_gaussian_head(&mut tape, &mut bp, &params.encoder, y_leaf, cfg)?;
        out.push(tape.value(mu).data().to_vec());
    }
    Ok(ProbeFeatures::Vector(out))
}

// ---- diversity ------------------------------------------------------------------

/// Mean pairwise Euclidean distance between flattened images; the desk-scale
/// stand-in for a feature-space generation metric.
pub fn sample_diversity(images: &[Tensor]) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::usage("diversity needs at least two images"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let d: f64 = images[i]
                .iter()
                .zip(images[j].iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            total += d;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// One-sided exact binomial sign test: probability of at least `wins`
/// successes in `n` fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let ln_fact = |k: usize| -> f64 { (1..=k).map(|v| (v as f64).ln()).sum() };
    let ln_n = ln_fact(n);
    let mut p = 0.0;
    for k in wins..=n {
        let ln_choose = ln_n - ln_fact(k) - ln_fact(n - k);
        p += (ln_choose - (n as f64) * 2f64.ln()).exp();
    }
    p.min(1.0)
}
