//! Parametric building blocks: the residual conv block, the network heads,
//! and the parameter store that owns every learnable array.
//!
//! All nets keep the full H×W resolution end to end; the abstract latent is
//! carried as a vector and broadcast over space when a net needs it as input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::distributions::SCALE_FLOOR;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Shape of a single residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockConfig {
    pub channels: usize,
    pub kernel_size: usize,
    pub negative_slope: f64,
}

impl ConvBlockConfig {
    pub fn new(channels: usize, kernel_size: usize, negative_slope: f64) -> Result<Self> {
        if channels < 1 {
            return Err(Error::contract("conv block needs at least one channel"));
        }
        if kernel_size % 2 == 0 || kernel_size == 0 {
            return Err(Error::contract("kernel_size must be odd and positive"));
        }
        if !(negative_slope > 0.0 && negative_slope < 1.0) {
            return Err(Error::contract("negative_slope must lie in (0, 1)"));
        }
        Ok(ConvBlockConfig { channels, kernel_size, negative_slope })
    }
}

/// Architecture hyperparameters shared by every net in the model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub expansion: usize,
    pub kernel_size: usize,
    pub padding: Padding,
    pub use_spatial_norm: bool,
    pub negative_slope: f64,
}

impl ModelConfig {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ModelConfig {
            channels,
            height,
            width,
            latent_dim: 32,
            hidden: 32,
            blocks: 3,
            expansion: 2,
            kernel_size: 3,
            padding: Padding::Zero,
            use_spatial_norm: true,
            negative_slope: 0.01,
        }
    }

    pub fn grid(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 || self.height < 1 || self.width < 1 {
            return Err(Error::contract("image dims must be positive"));
        }
        if self.latent_dim < 1 {
            return Err(Error::contract("latent_dim must be >= 1"));
        }
        ConvBlockConfig::new(self.hidden, self.kernel_size, self.negative_slope)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Flat storage for every learnable array, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

pub enum Init {
    FanInUniform(usize),
    Zeros,
    Ones,
}

impl ParamStore {
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let offset = self.data.len();
        match init {
            Init::FanInUniform(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                self.data.extend((0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound));
            }
            Init::Zeros => self.data.extend(std::iter::repeat(0.0).take(n)),
            Init::Ones => self.data.extend(std::iter::repeat(1.0).take(n)),
        }
        self.specs.push(ParamSpec { name: name.to_string(), shape: shape.to_vec(), offset });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        let spec = &self.specs[id.0];
        let n: usize = spec.shape.iter().product();
        Tensor::from_vec(&spec.shape, self.data[spec.offset..spec.offset + n].to_vec())
            .expect("store shapes are consistent")
    }

    pub fn set_tensor(&mut self, id: ParamId, t: &Tensor) -> Result<()> {
        let spec = &self.specs[id.0];
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::ShapeMismatch { expected: spec.shape.clone(), got: t.shape().to_vec() });
        }
        let n = t.len();
        let offset = spec.offset;
        self.data[offset..offset + n].copy_from_slice(t.data());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the raw parameter bytes; used to assert that evaluation
    /// jobs leave upstream parameters untouched.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.data.iter().flat_map(|v| v.to_le_bytes()))
    }
}

pub fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Memoized leaves for one tape pass over a store.
pub struct BoundParams<'a> {
    store: &'a ParamStore,
    leaves: Vec<Option<Var>>,
}

impl<'a> BoundParams<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        BoundParams { store, leaves: vec![None; store.specs.len()] }
    }

    pub fn get(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let v = tape.leaf(self.store.tensor(id));
        self.leaves[id.0] = Some(v);
        v
    }

    /// Flat gradient vector aligned with the store layout; zero where a
    /// parameter never entered the tape.
    pub fn gather_grads(&self, grads: &crate::tape::Grads) -> Vec<f64> {
        let mut out = vec![0.0; self.store.len()];
        for (i, leaf) in self.leaves.iter().enumerate() {
            if let Some(v) = leaf {
                if let Some(g) = grads.get(*v) {
                    let spec = &self.store.specs[i];
                    out[spec.offset..spec.offset + g.len()].copy_from_slice(g.data());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub config: ConvBlockConfig,
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub expand_weight: ParamId,
    pub expand_bias: ParamId,
    pub project_weight: ParamId,
    pub project_bias: ParamId,
}

/// Stem conv, a stack of residual blocks, then a head conv. The head carries
/// no activation so outputs can be logits or distribution parameters.
#[derive(Debug, Clone)]
pub struct ConvNet {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stem_weight: ParamId,
    pub stem_bias: ParamId,
    pub blocks: Vec<BlockParams>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

/// A conv net pooled to a vector and mapped to mean/raw-scale pairs.
#[derive(Debug, Clone)]
pub struct GaussianVectorHead {
    pub net: ConvNet,
    pub out_dim: usize,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

fn register_block(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> BlockParams {
    let ch = cfg.hidden;
    let k = cfg.kernel_size;
    let ex = cfg.hidden * cfg.expansion;
    BlockParams {
        config: ConvBlockConfig::new(ch, k, cfg.negative_slope).expect("validated in ModelConfig"),
        dw_weight: store.register(&format!("{name}.dw.weight"), &[ch, k, k], Init::FanInUniform(k * k), rng),
        dw_bias: store.register(&format!("{name}.dw.bias"), &[ch], Init::Zeros, rng),
        norm_gain: store.register(&format!("{name}.norm.gain"), &[ch], Init::Ones, rng),
        norm_bias: store.register(&format!("{name}.norm.bias"), &[ch], Init::Zeros, rng),
        expand_weight: store.register(&format!("{name}.expand.weight"), &[ex, ch, 1, 1], Init::FanInUniform(ch), rng),
        expand_bias: store.register(&format!("{name}.expand.bias"), &[ex], Init::Zeros, rng),
        project_weight: store.register(&format!("{name}.project.weight"), &[ch, ex, 1, 1], Init::FanInUniform(ex), rng),
        project_bias: store.register(&format!("{name}.project.bias"), &[ch], Init::Zeros, rng),
    }
}

pub fn register_conv_net(
    store: &mut ParamStore,
    name: &str,
    in_channels: usize,
    out_channels: usize,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> ConvNet {
    let k = cfg.kernel_size;
    let h = cfg.hidden;
    let stem_weight = store.register(
        &format!("{name}.stem.weight"),
        &[h, in_channels, k, k],
        Init::FanInUniform(in_channels * k * k),
        rng,
    );
    let stem_bias = store.register(&format!("{name}.stem.bias"), &[h], Init::Zeros, rng);
    let blocks = (0..cfg.blocks)
        .map(|i| register_block(store, &format!("{name}.block{i}"), cfg, rng))
        .collect();
    let head_weight = store.register(
        &format!("{name}.head.weight"),
        &[out_channels, h, k, k],
        Init::FanInUniform(h * k * k),
        rng,
    );
    let head_bias = store.register(&format!("{name}.head.bias"), &[out_channels], Init::Zeros, rng);
    ConvNet { in_channels, out_channels, stem_weight, stem_bias, blocks, head_weight, head_bias }
}

pub fn register_gaussian_head(
    store: &mut ParamStore,
    name: &str,
    in_channels: usize,
    out_dim: usize,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> GaussianVectorHead {
    let net = register_conv_net(store, &format!("{name}.net"), in_channels, cfg.hidden, cfg, rng);
    let fc_weight = store.register(
        &format!("{name}.fc.weight"),
        &[2 * out_dim, cfg.hidden],
        Init::FanInUniform(cfg.hidden),
        rng,
    );
    let fc_bias = store.register(&format!("{name}.fc.bias"), &[2 * out_dim], Init::Zeros, rng);
    GaussianVectorHead { net, out_dim, fc_weight, fc_bias }
}

/// One residual block: depthwise conv, per-channel norm, pointwise expansion,
/// leaky activation, pointwise projection, additive skip.
pub fn conv_block_apply(
    tape: &mut Tape,
    bp: &mut BoundParams,
    block: &BlockParams,
    x: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let xs = tape.value(x).shape();
    if xs.first() != Some(&block.config.channels) {
        return Err(Error::contract(format!(
            "conv_block_apply: expected {} channels, got {:?}",
            block.config.channels, xs
        )));
    }
    let dw_w = bp.get(tape, block.dw_weight);
    let dw_b = bp.get(tape, block.dw_bias);
    let mut h = tape.depthwise_conv2d(x, dw_w, dw_b, cfg.padding)?;
    if cfg.use_spatial_norm {
        let gain = bp.get(tape, block.norm_gain);
        let bias = bp.get(tape, block.norm_bias);
        h = tape.spatial_norm(h, gain, bias, NORM_EPS)?;
    }
    let ew = bp.get(tape, block.expand_weight);
    let eb = bp.get(tape, block.expand_bias);
    h = tape.conv2d(h, ew, eb, cfg.padding)?;
    h = tape.leaky_relu(h, block.config.negative_slope);
    let pw = bp.get(tape, block.project_weight);
    let pb = bp.get(tape, block.project_bias);
    h = tape.conv2d(h, pw, pb, cfg.padding)?;
    tape.add(x, h)
}

pub fn apply_conv_net(
    tape: &mut Tape,
    bp: &mut BoundParams,
    net: &ConvNet,
    x: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let sw = bp.get(tape, net.stem_weight);
    let sb = bp.get(tape, net.stem_bias);
    let mut h = tape.conv2d(x, sw, sb, cfg.padding)?;
    h = tape.leaky_relu(h, cfg.negative_slope);
    for block in &net.blocks {
        h = conv_block_apply(tape, bp, block, h, cfg)?;
    }
    let hw = bp.get(tape, net.head_weight);
    let hb = bp.get(tape, net.head_bias);
    tape.conv2d(h, hw, hb, cfg.padding)
}

/// Runs the head's conv net, pools, and splits the linear output into a
/// (mean, scale) pair of vectors; the scale passes through softplus + floor.
pub fn apply_gaussian_head(
    tape: &mut Tape,
    bp: &mut BoundParams,
    head: &GaussianVectorHead,
    x: Var,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let feats = apply_conv_net(tape, bp, &head.net, x, cfg)?;
    let act = tape.leaky_relu(feats, cfg.negative_slope);
    let pooled = tape.mean_pool_spatial(act)?;
    let fw = bp.get(tape, head.fc_weight);
    let fb = bp.get(tape, head.fc_bias);
    let out = tape.linear(pooled, fw, fb)?;
    let mean = tape.slice_outer(out, 0, head.out_dim)?;
    let raw = tape.slice_outer(out, head.out_dim, head.out_dim)?;
    let scale = tape.softplus_floor(raw, SCALE_FLOOR);
    Ok((mean, scale))
}

/// Splits a 2C-channel map into mean and floored-scale maps.
pub fn split_mean_scale_maps(tape: &mut Tape, out: Var, channels: usize) -> Result<(Var, Var)> {
    let mean = tape.slice_outer(out, 0, channels)?;
    let raw = tape.slice_outer(out, channels, channels)?;
    let scale = tape.softplus_floor(raw, SCALE_FLOOR);
    Ok((mean, scale))
}

/// Every spatial location holds a copy of `a`.
pub fn spatial_broadcast(a: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if a.shape().len() != 1 {
        return Err(Error::contract("spatial_broadcast: input must be a vector"));
    }
    if h == 0 || w == 0 {
        return Err(Error::contract("spatial_broadcast: H and W must be >= 1"));
    }
    let d = a.len();
    let mut data = Vec::with_capacity(d * h * w);
    for &v in a.iter() {
        data.extend(std::iter::repeat(v).take(h * w));
    }
    Tensor::from_vec(&[d, h, w], data)
}

/// All learnable parameter groups of the model, keyed by role:
/// location posterior (independent and stepwise/autoregressive), abstract
/// posterior, location prior, context-value decoder, and the ConvCNP
/// completion net.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub loc_posterior: ConvNet,
    pub loc_posterior_step: ConvNet,
    pub abstract_posterior: GaussianVectorHead,
    pub loc_prior: ConvNet,
    pub context_decoder: ConvNet,
    pub cnp: ConvNet,
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut rng = rng_from(seed, &[0x6d6f_64656c]);
        let c = config.channels;
        let d = config.latent_dim;
        let loc_posterior = register_conv_net(&mut store, "loc_posterior", c, 1, &config, &mut rng);
        let loc_posterior_step =
            register_conv_net(&mut store, "loc_posterior_step", c + 1, 1, &config, &mut rng);
        let abstract_posterior =
            register_gaussian_head(&mut store, "abstract_posterior", c + 1, d, &config, &mut rng);
        let loc_prior = register_conv_net(&mut store, "loc_prior", d, 1, &config, &mut rng);
        let context_decoder =
            register_conv_net(&mut store, "context_decoder", d + 1, 2 * c, &config, &mut rng);
        let cnp = register_conv_net(&mut store, "cnp", c + 1, 2 * c, &config, &mut rng);
        Ok(ModelParams {
            config,
            store,
            loc_posterior,
            loc_posterior_step,
            abstract_posterior,
            loc_prior,
            context_decoder,
            cnp,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.len()
    }
}
