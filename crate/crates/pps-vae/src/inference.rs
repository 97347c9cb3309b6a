//! The variational posterior: where to look (location inference, independent
//! or autoregressive), the deterministic value lookup, and the abstract
//! latent inferred from the resulting context set.

use rand_chacha::ChaCha8Rng;

use crate::distributions::{reparam_gaussian_sample, DiagGaussianParams, SimplexVector};
use crate::error::{Error, Result};
use crate::nn::{apply_conv_net, apply_gaussian_head, BoundParams, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::{same_shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    Independent,
    Autoregressive,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Variant::Independent),
            "autoregressive" => Ok(Variant::Autoregressive),
            other => Err(Error::usage(format!(
                "unknown variant `{other}` (expected independent|autoregressive)"
            ))),
        }
    }
}

/// How location draws are realised.
///
/// `Soft` keeps the relaxed samples everywhere on the differentiable path
/// (the training default; the objective stays smooth in the parameters).
/// `Hard` snaps each draw to its one-hot and routes gradients straight
/// through the relaxed sample. `Mode` takes the argmax of the logits at each
/// step with no noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Soft,
    Hard,
    Mode,
}

/// The partial pixel specification: binary location mask, looked-up values,
/// and the ordered pre-dedup draws that produced it.
#[derive(Debug, Clone)]
pub struct ContextSet {
    pub mask: Tensor,
    pub values: Tensor,
    pub onehots: Vec<SimplexVector>,
    pub m: usize,
}

impl ContextSet {
    /// Checks the structural invariants; `y` additionally checks the lookup.
    pub fn validate(&self, y: Option<&Tensor>) -> Result<()> {
        if !self.mask.is_binary() {
            return Err(Error::contract("context mask must be binary"));
        }
        let pop = self.mask.popcount();
        if pop == 0 || pop > self.m {
            return Err(Error::contract(format!("mask popcount {pop} outside [1, {}]", self.m)));
        }
        if self.onehots.len() != self.m {
            return Err(Error::contract("context must carry exactly M pre-dedup draws"));
        }
        let (h, w) = (self.mask.shape()[0], self.mask.shape()[1]);
        let plane = h * w;
        let c = self.values.shape()[0];
        for ci in 0..c {
            for p in 0..plane {
                if self.mask.data()[p] == 0.0 && self.values.data()[ci * plane + p] != 0.0 {
                    return Err(Error::contract("values must be zero off-mask"));
                }
            }
        }
        // The mask is exactly the union of the draws' peak locations.
        let mut union = vec![0.0; plane];
        for oh in &self.onehots {
            union[oh.argmax()] = 1.0;
        }
        if union != self.mask.data() {
            return Err(Error::contract("mask must equal the union of the draws"));
        }
        if let Some(y) = y {
            for ci in 0..c {
                for p in 0..plane {
                    let expect = y.data()[ci * plane + p] * self.mask.data()[p];
                    if self.values.data()[ci * plane + p] != expect {
                        return Err(Error::contract("values must equal y * mask exactly"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// The abstract latent: a posterior over a D-vector plus one draw from it.
#[derive(Debug, Clone)]
pub struct AbstractLatent {
    pub sample: Tensor,
    pub posterior: DiagGaussianParams,
}

/// Tape-level record of one location-inference pass.
pub(crate) struct LocationTrace {
    /// Per-draw scoring weights: relaxed samples (`Soft`), straight-through
    /// one-hots (`Hard`), or plain one-hot leaves (`Mode`).
    pub draw_weights: Vec<Var>,
    /// Posterior logits that produced each draw.
    pub q_logits: Vec<Var>,
    /// Union of the draws, `[H, W]`: smooth in `Soft`, binary otherwise.
    pub union: Var,
    /// `y` masked by the union, `[C, H, W]`.
    pub values: Var,
    /// Peak location per draw.
    pub peaks: Vec<usize>,
    /// Value-level snapshot of the draws.
    pub onehots: Vec<SimplexVector>,
}

fn binary_union_tensor(peaks: &[usize], h: usize, w: usize) -> Tensor {
    let mut mask = Tensor::zeros(&[h, w]);
    for &p in peaks {
        mask.data_mut()[p] = 1.0;
    }
    mask
}

/// Runs location inference on the tape. Draws consume `M * K` uniforms from
/// `rng` in draw order (none in `Mode`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn trace_locations(
    tape: &mut Tape,
    bp: &mut BoundParams,
    params: &ModelParams,
    y: &Tensor,
    m: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
    variant: Variant,
    mode: SampleMode,
) -> Result<LocationTrace> {
    let cfg = &params.config;
    let (h, w) = (cfg.height, cfg.width);
    let k = cfg.grid();
    if m < 1 || m >= k {
        return Err(Error::contract(format!("M must satisfy 1 <= M < H*W, got {m} for grid {k}")));
    }
    if mode != SampleMode::Mode && !(tau > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    if y.shape() != [cfg.channels, h, w] {
        return Err(Error::ShapeMismatch {
            expected: vec![cfg.channels, h, w],
            got: y.shape().to_vec(),
        });
    }

    let y_leaf = tape.leaf(y.clone());
    let mut shared_logits: Option<Var> = None;
    let mut draw_weights = Vec::with_capacity(m);
    let mut q_logits = Vec::with_capacity(m);
    let mut soft_draws: Vec<Var> = Vec::with_capacity(m);
    let mut peaks = Vec::with_capacity(m);
    let mut onehots = Vec::with_capacity(m);
    // Autoregressive conditioning state: union of the draws so far.
    let mut prefix: Option<Var> = None;

    for i in 0..m {
        let logits = match variant {
            Variant::Independent => {
                if let Some(l) = shared_logits {
                    l
                } else {
                    let map = apply_conv_net(tape, bp, &params.loc_posterior, y_leaf, cfg)?;
                    let l = tape.reshape(map, &[k])?;
                    shared_logits = Some(l);
                    l
                }
            }
            Variant::Autoregressive => {
                let prefix_map = match prefix {
                    Some(p) => tape.reshape(p, &[1, h, w])?,
                    None => tape.leaf(Tensor::zeros(&[1, h, w])),
                };
                let input = tape.concat_channels(&[y_leaf, prefix_map])?;
                let map = apply_conv_net(tape, bp, &params.loc_posterior_step, input, cfg)?;
                tape.reshape(map, &[k])?
            }
        };
        q_logits.push(logits);

        let weight = match mode {
            SampleMode::Mode => {
                let peak = tape.value(logits).argmax();
                peaks.push(peak);
                onehots.push(SimplexVector::one_hot(k, peak)?);
                tape.leaf(Tensor::from_vec(&[k], onehots[i].probs().to_vec())?)
            }
            SampleMode::Soft | SampleMode::Hard => {
                let noise = crate::distributions::sample_gumbel(&[k], rng)?;
                let noisy = tape.add_const(logits, &noise)?;
                let scaled = tape.scale(noisy, 1.0 / tau);
                let soft = tape.softmax(scaled)?;
                let peak = tape.value(soft).argmax();
                peaks.push(peak);
                soft_draws.push(soft);
                if mode == SampleMode::Soft {
                    onehots.push(SimplexVector::new(tape.value(soft).data().to_vec())?);
                    soft
                } else {
                    onehots.push(SimplexVector::one_hot(k, peak)?);
                    let hard = Tensor::from_vec(&[k], onehots[i].probs().to_vec())?;
                    tape.straight_through(hard, soft)?
                }
            }
        };
        draw_weights.push(weight);

        if variant == Variant::Autoregressive && i + 1 < m {
            prefix = Some(union_of(tape, mode, &soft_draws, &peaks, h, w)?);
        }
    }

    let union = union_of(tape, mode, &soft_draws, &peaks, h, w)?;
    let values = tape.mask_lookup(union, y)?;
    Ok(LocationTrace { draw_weights, q_logits, union, values, peaks, onehots })
}

/// Union of the draws so far, respecting the sampling mode's gradient story.
fn union_of(
    tape: &mut Tape,
    mode: SampleMode,
    soft_draws: &[Var],
    peaks: &[usize],
    h: usize,
    w: usize,
) -> Result<Var> {
    match mode {
        SampleMode::Soft => tape.soft_union(soft_draws, h, w),
        SampleMode::Hard => {
            // Forward: deduplicated binary mask. Backward: the sum of the
            // relaxed draws (straight-through).
            let binary = binary_union_tensor(peaks, h, w);
            let mut sum = soft_draws[0];
            for &s in &soft_draws[1..] {
                sum = tape.add(sum, s)?;
            }
            let sum_map = tape.reshape(sum, &[h, w])?;
            tape.straight_through(binary, sum_map)
        }
        SampleMode::Mode => Ok(tape.leaf(binary_union_tensor(peaks, h, w))),
    }
}

/// Tape-level abstract-posterior pass; consumes `D` normals from `rng`.
pub(crate) struct AbstractTrace {
    pub mean: Var,
    pub scale: Var,
    pub sample: Var,
}

pub(crate) fn trace_abstract(
    tape: &mut Tape,
    bp: &mut BoundParams,
    params: &ModelParams,
    union: Var,
    values: Var,
    rng: &mut ChaCha8Rng,
) -> Result<AbstractTrace> {
    let cfg = &params.config;
    let (h, w) = (cfg.height, cfg.width);
    let mask_ch = tape.reshape(union, &[1, h, w])?;
    let input = tape.concat_channels(&[mask_ch, values])?;
    let (mean, scale) = apply_gaussian_head(tape, bp, &params.abstract_posterior, input, cfg)?;
    let std = DiagGaussianParams::standard(&[cfg.latent_dim]);
    let eps = reparam_gaussian_sample(&std, rng);
    let eps_leaf = tape.leaf(eps);
    let noise = tape.mul(scale, eps_leaf)?;
    let sample = tape.add(mean, noise)?;
    Ok(AbstractTrace { mean, scale, sample })
}

// ---- public value-level operations ------------------------------------------

/// One location-logits map over the flattened grid, shared by all M
/// independent draws.
pub fn location_logits_independent(params: &ModelParams, y: &Tensor) -> Result<Tensor> {
    let cfg = &params.config;
    if y.shape() != [cfg.channels, cfg.height, cfg.width] {
        return Err(Error::ShapeMismatch {
            expected: vec![cfg.channels, cfg.height, cfg.width],
            got: y.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&params.store);
    let y_leaf = tape.leaf(y.clone());
    let map = apply_conv_net(&mut tape, &mut bp, &params.loc_posterior, y_leaf, cfg)?;
    tape.value(map).clone().reshaped(&[cfg.grid()])
}

/// Location logits conditioned on the image and the accumulated binary mask
/// of earlier draws (all-zeros for the first step).
pub fn location_logits_autoregressive(
    params: &ModelParams,
    y: &Tensor,
    accumulated_mask: &Tensor,
) -> Result<Tensor> {
    let cfg = &params.config;
    if !accumulated_mask.is_binary() {
        return Err(Error::contract("accumulated mask must be binary"));
    }
    if accumulated_mask.shape() != [cfg.height, cfg.width] {
        return Err(Error::ShapeMismatch {
            expected: vec![cfg.height, cfg.width],
            got: accumulated_mask.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&params.store);
    let y_leaf = tape.leaf(y.clone());
    let mask_leaf = tape.leaf(accumulated_mask.clone().reshaped(&[1, cfg.height, cfg.width])?);
    let input = tape.concat_channels(&[y_leaf, mask_leaf])?;
    let map = apply_conv_net(&mut tape, &mut bp, &params.loc_posterior_step, input, cfg)?;
    tape.value(map).clone().reshaped(&[cfg.grid()])
}

/// Draws M locations, deduplicates them into a binary mask, and looks up the
/// pixel values. `hard` snaps draws to one-hots; otherwise the stored draws
/// are the relaxed samples (the mask is the union of their peaks either way).
pub fn infer_context(
    params: &ModelParams,
    y: &Tensor,
    m: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
    variant: Variant,
    hard: bool,
) -> Result<ContextSet> {
    let mode = if hard { SampleMode::Hard } else { SampleMode::Soft };
    infer_context_with_mode(params, y, m, tau, rng, variant, mode)
}

pub fn infer_context_with_mode(
    params: &ModelParams,
    y: &Tensor,
    m: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
    variant: Variant,
    mode: SampleMode,
) -> Result<ContextSet> {
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&params.store);
    let trace = trace_locations(&mut tape, &mut bp, params, y, m, tau, rng, variant, mode)?;
    context_from_trace(&trace, y, m, &params.config)
}

pub(crate) fn context_from_trace(
    trace: &LocationTrace,
    y: &Tensor,
    m: usize,
    cfg: &crate::nn::ModelConfig,
) -> Result<ContextSet> {
    let mask = binary_union_tensor(&trace.peaks, cfg.height, cfg.width);
    let values = lookup_values(y, &mask)?;
    Ok(ContextSet { mask, values, onehots: trace.onehots.clone(), m })
}

/// Binarise a map of draw counts: `indicator(count > 0)`.
pub fn dedup_mask(count_map: &Tensor) -> Result<Tensor> {
    for &v in count_map.iter() {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::contract("count map must hold nonnegative integers"));
        }
    }
    Ok(count_map.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

/// `y * mask`, broadcast over channels. The lookup has no parameters; its
/// gradient with respect to `y` is the mask itself.
pub fn lookup_values(y: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if !mask.is_binary() {
        return Err(Error::contract("lookup mask must be binary"));
    }
    let ys = y.shape();
    if ys.len() != 3 || mask.shape() != [ys[1], ys[2]] {
        return Err(Error::ShapeMismatch { expected: ys.to_vec(), got: mask.shape().to_vec() });
    }
    let (c, plane) = (ys[0], ys[1] * ys[2]);
    let mut out = Tensor::zeros(ys);
    for ci in 0..c {
        for p in 0..plane {
            out.data_mut()[ci * plane + p] = y.data()[ci * plane + p] * mask.data()[p];
        }
    }
    Ok(out)
}

/// `1 - mask` over a binary mask; context and target locations partition the
/// grid.
pub fn complement_mask(mask: &Tensor) -> Result<Tensor> {
    if !mask.is_binary() {
        return Err(Error::contract("complement input must be binary"));
    }
    Ok(mask.map(|v| 1.0 - v))
}

/// Abstract-latent posterior from the (mask, values) pair, plus one
/// reparameterised draw.
pub fn infer_abstract(
    params: &ModelParams,
    ctx: &ContextSet,
    rng: &mut ChaCha8Rng,
) -> Result<AbstractLatent> {
    let cfg = &params.config;
    same_shape(&ctx.values, &Tensor::zeros(&[cfg.channels, cfg.height, cfg.width]))?;
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&params.store);
    let mask_leaf = tape.leaf(ctx.mask.clone());
    let values_leaf = tape.leaf(ctx.values.clone());
    let trace = trace_abstract(&mut tape, &mut bp, params, mask_leaf, values_leaf, rng)?;
    let posterior =
        DiagGaussianParams::new(tape.value(trace.mean).clone(), tape.value(trace.scale).clone())?;
    Ok(AbstractLatent { sample: tape.value(trace.sample).clone(), posterior })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use crate::rng::rng_from;

    fn small_params() -> ModelParams {
        let mut cfg = ModelConfig::new(1, 8, 8);
        cfg.hidden = 4;
        cfg.blocks = 1;
        cfg.latent_dim = 3;
        ModelParams::new(cfg, 3).unwrap()
    }

    fn test_image(params: &ModelParams, seed: u64) -> Tensor {
        let cfg = &params.config;
        let mut rng = rng_from(seed, &[1]);
        Tensor::from_vec(
            &[cfg.channels, cfg.height, cfg.width],
            (0..cfg.channels * cfg.grid()).map(|_| rand::Rng::random::<f64>(&mut rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn independent_logits_shape_and_determinism() {
        let params = small_params();
        let y = test_image(&params, 0);
        let a = location_logits_independent(&params, &y).unwrap();
        let b = location_logits_independent(&params, &y).unwrap();
        assert_eq!(a.shape(), &[64]);
        assert_eq!(a, b);
    }

    #[test]
    fn independent_logits_shift_equivariant_under_circular_padding() {
        // Wrapped translation of the image translates the logits map when
        // every conv pads circularly.
        let mut cfg = ModelConfig::new(1, 8, 8);
        cfg.hidden = 4;
        cfg.blocks = 1;
        cfg.latent_dim = 3;
        cfg.padding = crate::tape::Padding::Circular;
        let params = ModelParams::new(cfg, 19).unwrap();
        let y = test_image(&params, 9);
        let (dy, dx) = (1usize, 1usize);
        let shift = |t: &Tensor, h: usize, w: usize| {
            let mut out = Tensor::zeros(t.shape());
            let c = t.len() / (h * w);
            for ci in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        out.data_mut()[(ci * h + (yy + dy) % h) * w + (xx + dx) % w] =
                            t.data()[(ci * h + yy) * w + xx];
                    }
                }
            }
            out
        };
        let base = location_logits_independent(&params, &y).unwrap();
        let moved = location_logits_independent(&params, &shift(&y, 8, 8)).unwrap();
        let expected = shift(&base.clone().reshaped(&[1, 8, 8]).unwrap(), 8, 8);
        let max_err = moved
            .iter()
            .zip(expected.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1e-10, "equivariance error {max_err}");
    }

    #[test]
    fn autoregressive_first_step_matches_zero_mask() {
        let params = small_params();
        let y = test_image(&params, 1);
        let zero = Tensor::zeros(&[8, 8]);
        let a = location_logits_autoregressive(&params, &y, &zero).unwrap();
        assert_eq!(a.shape(), &[64]);
        let b = location_logits_autoregressive(&params, &y, &zero).unwrap();
        assert_eq!(a, b);
        let bad = Tensor::full(&[8, 8], 0.5);
        assert!(location_logits_autoregressive(&params, &y, &bad).is_err());
    }

    #[test]
    fn infer_context_invariants_and_determinism() {
        let params = small_params();
        let y = test_image(&params, 2);
        for variant in [Variant::Independent, Variant::Autoregressive] {
            for hard in [false, true] {
                let ctx = infer_context(&params, &y, 3, 0.8, &mut rng_from(5, &[]), variant, hard)
                    .unwrap();
                ctx.validate(Some(&y)).unwrap();
                assert!(ctx.mask.popcount() <= 3);
                let ctx2 = infer_context(&params, &y, 3, 0.8, &mut rng_from(5, &[]), variant, hard)
                    .unwrap();
                assert_eq!(ctx.mask, ctx2.mask);
                assert_eq!(ctx.values, ctx2.values);
                for oh in &ctx.onehots {
                    assert_eq!(hard, oh.is_hard());
                }
            }
        }
    }

    #[test]
    fn infer_context_rejects_oversized_m() {
        let params = small_params();
        let y = test_image(&params, 3);
        assert!(infer_context(
            &params,
            &y,
            64,
            1.0,
            &mut rng_from(0, &[]),
            Variant::Independent,
            true
        )
        .is_err());
    }

    #[test]
    fn forced_collision_yields_single_point() {
        // One dominant logit (gap >= 20) at low temperature puts every hard
        // draw on the same pixel, so the deduplicated mask has one point.
        let logits = {
            let mut l = vec![0.0; 64];
            l[17] = 25.0;
            l
        };
        let mut rng = rng_from(9, &[]);
        let mut peaks = Vec::new();
        for _ in 0..4 {
            let s =
                crate::distributions::gumbel_softmax_sample(&logits, 0.01, &mut rng, true).unwrap();
            peaks.push(s.argmax());
        }
        assert!(peaks.iter().all(|&p| p == 17));
        assert_eq!(binary_union_tensor(&peaks, 8, 8).popcount(), 1);
    }

    #[test]
    fn dedup_and_complement_identities() {
        let counts = Tensor::from_vec(&[2, 2], vec![0.0, 2.0, 1.0, 0.0]).unwrap();
        let mask = dedup_mask(&counts).unwrap();
        assert_eq!(mask.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(dedup_mask(&mask).unwrap(), mask); // idempotent on binary
        assert!(dedup_mask(&Tensor::from_vec(&[1, 2], vec![-1.0, 0.0]).unwrap()).is_err());
        assert_eq!(dedup_mask(&Tensor::zeros(&[2, 2])).unwrap(), Tensor::zeros(&[2, 2]));

        let comp = complement_mask(&mask).unwrap();
        assert_eq!(comp.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(complement_mask(&comp).unwrap(), mask);
        assert_eq!(comp.popcount(), 4 - mask.popcount());
        for (a, b) in mask.iter().zip(comp.iter()) {
            assert_eq!(a * b, 0.0);
            assert_eq!(a + b, 1.0);
        }
        assert!(complement_mask(&counts).is_err());
    }

    #[test]
    fn lookup_identities() {
        let y = Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.5, 0.9, 0.3]).unwrap();
        let ones = Tensor::full(&[2, 2], 1.0);
        let zeros = Tensor::zeros(&[2, 2]);
        assert_eq!(lookup_values(&y, &ones).unwrap(), y);
        assert_eq!(lookup_values(&y, &zeros).unwrap(), Tensor::zeros(&[1, 2, 2]));

        let mask = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = lookup_values(&y, &mask).unwrap();
        let b = lookup_values(&y, &complement_mask(&mask).unwrap()).unwrap();
        for ((&va, &vb), &vy) in a.iter().zip(b.iter()).zip(y.iter()) {
            assert_eq!(va + vb, vy);
        }
        assert!(lookup_values(&y, &Tensor::full(&[2, 2], 0.5)).is_err());
        assert!(lookup_values(&y, &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn abstract_latent_floor_determinism_and_order_invariance() {
        let params = small_params();
        let y = test_image(&params, 5);
        let mut ctx =
            infer_context(&params, &y, 3, 1.0, &mut rng_from(2, &[]), Variant::Independent, true)
                .unwrap();
        let a1 = infer_abstract(&params, &ctx, &mut rng_from(7, &[])).unwrap();
        assert!(a1.posterior.scale.iter().all(|&s| s >= crate::distributions::SCALE_FLOOR));
        let a2 = infer_abstract(&params, &ctx, &mut rng_from(7, &[])).unwrap();
        assert_eq!(a1.sample, a2.sample);

        // Only (mask, values) matter: permuting the draw order changes nothing.
        ctx.onehots.reverse();
        let a3 = infer_abstract(&params, &ctx, &mut rng_from(7, &[])).unwrap();
        assert_eq!(a1.sample, a3.sample);
        assert_eq!(a1.posterior, a3.posterior);
    }

    #[test]
    fn abstract_latent_finite_on_single_point_context() {
        let params = small_params();
        let y = test_image(&params, 6);
        let mut mask = Tensor::zeros(&[8, 8]);
        mask.data_mut()[11] = 1.0;
        let ctx = ContextSet {
            values: lookup_values(&y, &mask).unwrap(),
            mask,
            onehots: vec![SimplexVector::one_hot(64, 11).unwrap()],
            m: 1,
        };
        let a = infer_abstract(&params, &ctx, &mut rng_from(0, &[])).unwrap();
        assert!(a.sample.all_finite());
        assert!(a.posterior.mean.all_finite());
    }
}
