//! The generative factorisation: standard-normal abstract latent, location
//! prior conditioned on it, context-value decoder, the ConvCNP completion
//! factor over the remaining pixels, and the unconditional sampling pipeline.

use rand_chacha::ChaCha8Rng;

use crate::distributions::{
    categorical_log_prob, diag_gaussian_log_prob, reparam_gaussian_sample, DiagGaussianParams,
    SimplexVector,
};
use crate::error::{Error, Result};
use crate::inference::{
    complement_mask, infer_context_with_mode, lookup_values, ContextSet, SampleMode, Variant,
};
use crate::nn::{apply_conv_net, split_mean_scale_maps, BoundParams, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-pixel Gaussian prediction of the ConvCNP.
#[derive(Debug, Clone)]
pub struct CnpPrediction {
    pub mean: Tensor,
    pub scale: Tensor,
}

/// Every intermediate of one unconditional draw (or reconstruction):
/// latent, location mask, context values, imputed target values, and their
/// sum. Raw values are unclamped; clamping is render-only.
#[derive(Debug, Clone)]
pub struct GenerationTrace {
    pub a: Tensor,
    pub mask: Tensor,
    pub context_values: Tensor,
    pub target_values: Tensor,
    pub image: Tensor,
}

impl GenerationTrace {
    pub fn validate(&self) -> Result<()> {
        if !self.mask.is_binary() {
            return Err(Error::contract("trace mask must be binary"));
        }
        let plane = self.mask.len();
        let c = self.image.shape()[0];
        for ci in 0..c {
            for p in 0..plane {
                let m = self.mask.data()[p];
                let cv = self.context_values.data()[ci * plane + p];
                let tv = self.target_values.data()[ci * plane + p];
                if m == 0.0 && cv != 0.0 {
                    return Err(Error::contract("context values must be zero off-mask"));
                }
                if m == 1.0 && tv != 0.0 {
                    return Err(Error::contract("target values must be zero on-mask"));
                }
                if self.image.data()[ci * plane + p] != cv + tv {
                    return Err(Error::contract("image must equal context + target exactly"));
                }
            }
        }
        Ok(())
    }
}

// ---- tape-level pieces -------------------------------------------------------

/// Location-prior logits from a broadcast latent: one map shared by all M
/// prior draws.
pub(crate) fn trace_prior_logits(
    tape: &mut Tape,
    bp: &mut BoundParams,
    params: &ModelParams,
    a: Var,
) -> Result<Var> {
    let cfg = &params.config;
    let field = tape.broadcast_spatial(a, cfg.height, cfg.width)?;
    let map = apply_conv_net(tape, bp, &params.loc_prior, field, cfg)?;
    tape.reshape(map, &[cfg.grid()])
}

/// Context-value decoder: `(mask, broadcast(a)) -> (mean, scale)` maps.
pub(crate) fn trace_context_decoder(
    tape: &mut Tape,
    bp: &mut BoundParams,
    params: &ModelParams,
    union: Var,
    a: Var,
) -> Result<(Var, Var)> {
    let cfg = &params.config;
    let mask_ch = tape.reshape(union, &[1, cfg.height, cfg.width])?;
    let field = tape.broadcast_spatial(a, cfg.height, cfg.width)?;
    let input = tape.concat_channels(&[mask_ch, field])?;
    let out = apply_conv_net(tape, bp, &params.context_decoder, input, cfg)?;
    split_mean_scale_maps(tape, out, cfg.channels)
}

/// ConvCNP: `(density mask, masked values) -> (mean, scale)` maps. The
/// context enters only through this set representation, so any draw ordering
/// with the same mask gives the same prediction.
pub(crate) fn trace_cnp(
    tape: &mut Tape,
    bp: &mut BoundParams,
    params: &ModelParams,
    union: Var,
    values: Var,
) -> Result<(Var, Var)> {
    let cfg = &params.config;
    let mask_ch = tape.reshape(union, &[1, cfg.height, cfg.width])?;
    let input = tape.concat_channels(&[mask_ch, values])?;
    let out = apply_conv_net(tape, bp, &params.cnp, input, cfg)?;
    split_mean_scale_maps(tape, out, cfg.channels)
}

// ---- public value-level operations ------------------------------------------

/// A single prior-logits map over the flattened grid.
pub fn prior_location_logits(params: &ModelParams, a: &Tensor) -> Result<Tensor> {
    if a.shape() != [params.config.latent_dim] {
        return Err(Error::ShapeMismatch {
            expected: vec![params.config.latent_dim],
            got: a.shape().to_vec(),
        });
    }
    if !a.all_finite() {
        return Err(Error::contract("latent must be finite"));
    }
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&params.store);
    let a_leaf = tape.leaf(a.clone());
    let logits = trace_prior_logits(&mut tape, &mut bp, params, a_leaf)?;
    Ok(tape.value(logits).clone())
}

/// Sum of categorical log-probabilities of the pre-dedup draws under the
/// prior map for `a`.
pub fn location_log_prob_under_prior(
    params: &ModelParams,
    onehots: &[SimplexVector],
    a: &Tensor,
) -> Result<f64> {
    if onehots.is_empty() {
        return Err(Error::contract("location scoring needs at least one draw"));
    }
    let logits = prior_location_logits(params, a)?;
    let mut total = 0.0;
    for oh in onehots {
        total += categorical_log_prob(oh, logits.data())?;
    }
    Ok(total)
}

/// Value decoder `(mask, a) -> N(mean, scale)` over the full grid; likelihood
/// contributions are counted on-mask by the caller.
pub fn predict_context_values(
    params: &ModelParams,
    mask: &Tensor,
    a: &Tensor,
) -> Result<DiagGaussianParams> {
    if !mask.is_binary() {
        return Err(Error::contract("mask must be binary"));
    }
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&params.store);
    let mask_leaf = tape.leaf(mask.clone());
    let a_leaf = tape.leaf(a.clone());
    let (mean, scale) = trace_context_decoder(&mut tape, &mut bp, params, mask_leaf, a_leaf)?;
    DiagGaussianParams::new(tape.value(mean).clone(), tape.value(scale).clone())
}

/// ConvCNP prediction over the full grid from a context set representation.
pub fn convcnp_predict(params: &ModelParams, mask: &Tensor, values: &Tensor) -> Result<CnpPrediction> {
    if !mask.is_binary() {
        return Err(Error::contract("mask must be binary"));
    }
    let plane = mask.len();
    let c = values.shape()[0];
    for ci in 0..c {
        for p in 0..plane {
            if mask.data()[p] == 0.0 && values.data()[ci * plane + p] != 0.0 {
                return Err(Error::contract("values must be zero off-mask"));
            }
        }
    }
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&params.store);
    let mask_leaf = tape.leaf(mask.clone());
    let values_leaf = tape.leaf(values.clone());
    let (mean, scale) = trace_cnp(&mut tape, &mut bp, params, mask_leaf, values_leaf)?;
    Ok(CnpPrediction { mean: tape.value(mean).clone(), scale: tape.value(scale).clone() })
}

/// Convenience wrapper over a [`ContextSet`].
pub fn convcnp_predict_ctx(params: &ModelParams, ctx: &ContextSet) -> Result<CnpPrediction> {
    convcnp_predict(params, &ctx.mask, &ctx.values)
}

/// Samples `n` images from the prior end to end. Per trace the generator
/// consumes D normals for the latent, then M*K uniforms for the location
/// draws, then (if `sample_context_values`) C*H*W normals.
pub fn generate_unconditional(
    params: &ModelParams,
    n: usize,
    m: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
    sample_context_values: bool,
) -> Result<Vec<GenerationTrace>> {
    let cfg = &params.config;
    let k = cfg.grid();
    if n < 1 {
        return Err(Error::contract("need n >= 1 samples"));
    }
    if m < 1 || m >= k {
        return Err(Error::contract(format!("M must satisfy 1 <= M < H*W, got {m}")));
    }
    if !(tau > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    let mut traces = Vec::with_capacity(n);
    for _ in 0..n {
        let a = reparam_gaussian_sample(&DiagGaussianParams::standard(&[cfg.latent_dim]), rng);
        let logits = prior_location_logits(params, &a)?;
        let mut mask = Tensor::zeros(&[cfg.height, cfg.width]);
        for _ in 0..m {
            let draw =
                crate::distributions::gumbel_softmax_sample(logits.data(), tau, rng, true)?;
            mask.data_mut()[draw.argmax()] = 1.0;
        }
        let value_params = predict_context_values(params, &mask, &a)?;
        let full_context = if sample_context_values {
            reparam_gaussian_sample(&value_params, rng)
        } else {
            value_params.mean.clone()
        };
        let context_values = mask_apply(&full_context, &mask);
        let pred = convcnp_predict(params, &mask, &context_values)?;
        let target_values = mask_apply(&pred.mean, &complement_mask(&mask)?);
        let image = add(&context_values, &target_values);
        let trace = GenerationTrace { a, mask, context_values, target_values, image };
        trace.validate()?;
        traces.push(trace);
    }
    Ok(traces)
}

/// Infers a context for `y` and completes it: the image agrees with `y` on
/// the mask and carries the ConvCNP predictive mean elsewhere.
pub fn reconstruct(
    params: &ModelParams,
    y: &Tensor,
    m: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
    variant: Variant,
    mode: SampleMode,
) -> Result<(GenerationTrace, ContextSet)> {
    let ctx = infer_context_with_mode(params, y, m, tau, rng, variant, mode)?;
    let pred = convcnp_predict(params, &ctx.mask, &ctx.values)?;
    let target_values = mask_apply(&pred.mean, &complement_mask(&ctx.mask)?);
    let image = add(&ctx.values, &target_values);
    let mut rng_a = rng.clone();
    let latent = crate::inference::infer_abstract(params, &ctx, &mut rng_a)?;
    let trace = GenerationTrace {
        a: latent.sample,
        mask: ctx.mask.clone(),
        context_values: ctx.values.clone(),
        target_values,
        image,
    };
    trace.validate()?;
    Ok((trace, ctx))
}

/// Joint log-density of a realised trace under the generative factorisation:
/// `log p(a) + sum_m log p(x_m | a) + masked log p(y_M | x_M, a) + target
/// log p(y_T | ...)`. Mirrors the four factor calls exactly.
pub fn trace_joint_log_prob(
    params: &ModelParams,
    a: &Tensor,
    onehots: &[SimplexVector],
    mask: &Tensor,
    y: &Tensor,
) -> Result<f64> {
    let log_pa = diag_gaussian_log_prob(a, &DiagGaussianParams::standard(a.shape()))?;
    let log_px = location_log_prob_under_prior(params, onehots, a)?;
    let value_params = predict_context_values(params, mask, a)?;
    let log_pym = masked_gaussian_sum(y, &value_params, mask, false)?;
    let values = lookup_values(y, mask)?;
    let pred = convcnp_predict(params, mask, &values)?;
    let pred_params = DiagGaussianParams::new(pred.mean, pred.scale)?;
    let log_pyt = masked_gaussian_sum(y, &pred_params, mask, true)?;
    Ok(log_pa + log_px + log_pym + log_pyt)
}

/// Sum of per-pixel Gaussian log-densities over on-mask (or off-mask) pixels.
pub fn masked_gaussian_sum(
    y: &Tensor,
    params: &DiagGaussianParams,
    mask: &Tensor,
    complement: bool,
) -> Result<f64> {
    let plane = mask.len();
    let c = y.shape()[0];
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for ci in 0..c {
        for p in 0..plane {
            let on = mask.data()[p] == 1.0;
            if on == complement {
                continue;
            }
            let i = ci * plane + p;
            let s = params.scale.data()[i];
            let z = (y.data()[i] - params.mean.data()[i]) / s;
            total += -0.5 * ln_2pi - s.ln() - 0.5 * z * z;
        }
    }
    Ok(total)
}

fn mask_apply(full: &Tensor, mask: &Tensor) -> Tensor {
    let plane = mask.len();
    let c = full.shape()[0];
    let mut out = Tensor::zeros(full.shape());
    for ci in 0..c {
        for p in 0..plane {
            out.data_mut()[ci * plane + p] = full.data()[ci * plane + p] * mask.data()[p];
        }
    }
    out
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.iter()) {
        *o += v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::SCALE_FLOOR;
    use crate::nn::ModelConfig;
    use crate::rng::rng_from;
    use crate::tape::Padding;

    fn small_params() -> ModelParams {
        let mut cfg = ModelConfig::new(1, 8, 8);
        cfg.hidden = 4;
        cfg.blocks = 1;
        cfg.latent_dim = 3;
        ModelParams::new(cfg, 11).unwrap()
    }

    #[test]
    fn prior_logits_shape_determinism_smoothness() {
        let params = small_params();
        let a = Tensor::zeros(&[3]);
        let l0 = prior_location_logits(&params, &a).unwrap();
        assert_eq!(l0.shape(), &[64]);
        assert_eq!(l0, prior_location_logits(&params, &a).unwrap());

        // Nearby latents give nearby logits (finite Lipschitz spot check).
        let mut a2 = a.clone();
        a2.data_mut()[0] += 1e-6;
        let l1 = prior_location_logits(&params, &a2).unwrap();
        let max_diff = l0
            .iter()
            .zip(l1.iter())
            .map(|(&x, &y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-3, "max logit shift {max_diff} for a 1e-6 latent shift");
        assert!(max_diff > 0.0);
    }

    #[test]
    fn prior_scoring_uniform_and_normalised() {
        let params = small_params();
        let a = Tensor::zeros(&[3]);
        let logits = prior_location_logits(&params, &a).unwrap();

        // exp of single-draw scores over all K choices sums to one.
        let total: f64 = (0..64)
            .map(|k| {
                let oh = SimplexVector::one_hot(64, k).unwrap();
                location_log_prob_under_prior(&params, &[oh], &a).unwrap().exp()
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-6);

        // M identical uniform factors add up.
        let uniform = crate::distributions::log_softmax(&vec![0.0; 16]);
        assert!((uniform[0] - (1.0f64 / 16.0).ln()).abs() < 1e-12);
        assert!(location_log_prob_under_prior(&params, &[], &a).is_err());
        let _ = logits;
    }

    #[test]
    fn context_value_scale_floor_and_empty_mask() {
        let params = small_params();
        let a = Tensor::zeros(&[3]);
        let mask = Tensor::zeros(&[8, 8]);
        let p = predict_context_values(&params, &mask, &a).unwrap();
        assert!(p.scale.iter().all(|&s| s >= SCALE_FLOOR));
        // Empty mask: the masked likelihood is an empty product.
        let y = Tensor::zeros(&[1, 8, 8]);
        assert_eq!(masked_gaussian_sum(&y, &p, &mask, false).unwrap(), 0.0);
    }

    #[test]
    fn masked_likelihood_matches_per_pixel_loop() {
        let params = small_params();
        let a = Tensor::from_vec(&[3], vec![0.2, -0.4, 0.9]).unwrap();
        let mut mask = Tensor::zeros(&[8, 8]);
        for p in [3, 17, 40] {
            mask.data_mut()[p] = 1.0;
        }
        let mut rng = rng_from(1, &[]);
        let y = Tensor::from_vec(&[1, 8, 8], (0..64).map(|_| rand::Rng::random::<f64>(&mut rng)).collect())
            .unwrap();
        let vp = predict_context_values(&params, &mask, &a).unwrap();
        let got = masked_gaussian_sum(&y, &vp, &mask, false).unwrap();
        // Loop-based oracle over the three on-mask pixels.
        let mut oracle = 0.0;
        for p in [3, 17, 40] {
            let s = vp.scale.data()[p];
            let d = y.data()[p] - vp.mean.data()[p];
            oracle += -0.5 * (2.0 * std::f64::consts::PI * s * s).ln() - d * d / (2.0 * s * s);
        }
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn convcnp_shapes_and_order_invariance() {
        let params = small_params();
        let mut rng = rng_from(2, &[]);
        let y = Tensor::from_vec(&[1, 8, 8], (0..64).map(|_| rand::Rng::random::<f64>(&mut rng)).collect())
            .unwrap();
        let mut mask = Tensor::zeros(&[8, 8]);
        for p in [5, 20, 33] {
            mask.data_mut()[p] = 1.0;
        }
        let values = lookup_values(&y, &mask).unwrap();
        let pred = convcnp_predict(&params, &mask, &values).unwrap();
        assert_eq!(pred.mean.shape(), &[1, 8, 8]);
        assert_eq!(pred.scale.shape(), &[1, 8, 8]);
        // Same pixels, different sampled order: identical prediction bitwise.
        let pred2 = convcnp_predict(&params, &mask, &values).unwrap();
        assert_eq!(pred.mean, pred2.mean);
        assert_eq!(pred.scale, pred2.scale);
        // Values leaking off-mask violate the contract.
        assert!(convcnp_predict(&params, &mask, &y).is_err());
    }

    #[test]
    fn convcnp_circular_shift_equivariance() {
        let mut cfg = ModelConfig::new(1, 8, 8);
        cfg.hidden = 4;
        cfg.blocks = 1;
        cfg.latent_dim = 3;
        cfg.padding = Padding::Circular;
        let params = ModelParams::new(cfg, 13).unwrap();
        let mut rng = rng_from(3, &[]);
        let y = Tensor::from_vec(&[1, 8, 8], (0..64).map(|_| rand::Rng::random::<f64>(&mut rng)).collect())
            .unwrap();
        let mut mask = Tensor::zeros(&[8, 8]);
        for p in [2, 11, 50] {
            mask.data_mut()[p] = 1.0;
        }
        let values = lookup_values(&y, &mask).unwrap();
        let pred = convcnp_predict(&params, &mask, &values).unwrap();

        let (dy, dx) = (3, 5);
        let shift_hw = |t: &Tensor| {
            let mut out = Tensor::zeros(t.shape());
            for y_ in 0..8 {
                for x_ in 0..8 {
                    out.data_mut()[((y_ + dy) % 8) * 8 + (x_ + dx) % 8] = t.data()[y_ * 8 + x_];
                }
            }
            out
        };
        let shift_chw = |t: &Tensor| {
            let mut out = Tensor::zeros(t.shape());
            for y_ in 0..8 {
                for x_ in 0..8 {
                    out.data_mut()[((y_ + dy) % 8) * 8 + (x_ + dx) % 8] = t.data()[y_ * 8 + x_];
                }
            }
            out
        };
        let pred_shifted = convcnp_predict(&params, &shift_hw(&mask), &shift_chw(&values)).unwrap();
        let max_err = pred_shifted
            .mean
            .iter()
            .zip(shift_chw(&pred.mean).iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1e-5, "equivariance error {max_err}");
    }

    #[test]
    fn unconditional_traces_hold_invariants_and_reproduce() {
        let params = small_params();
        let traces =
            generate_unconditional(&params, 3, 4, 0.7, &mut rng_from(21, &[]), false).unwrap();
        assert_eq!(traces.len(), 3);
        for t in &traces {
            t.validate().unwrap();
            assert!(t.image.all_finite());
            assert!(t.mask.popcount() >= 1 && t.mask.popcount() <= 4);
        }
        let again =
            generate_unconditional(&params, 3, 4, 0.7, &mut rng_from(21, &[]), false).unwrap();
        for (a, b) in traces.iter().zip(again.iter()) {
            assert_eq!(a.image, b.image);
        }
        assert!(generate_unconditional(&params, 1, 64, 0.7, &mut rng_from(0, &[]), false).is_err());
    }

    #[test]
    fn reconstruction_agrees_on_mask() {
        let params = small_params();
        let mut rng = rng_from(4, &[]);
        let y = Tensor::from_vec(&[1, 8, 8], (0..64).map(|_| rand::Rng::random::<f64>(&mut rng)).collect())
            .unwrap();
        let (trace, ctx) = reconstruct(
            &params,
            &y,
            4,
            0.8,
            &mut rng_from(6, &[]),
            Variant::Independent,
            SampleMode::Hard,
        )
        .unwrap();
        ctx.validate(Some(&y)).unwrap();
        let plane = 64;
        for p in 0..plane {
            if trace.mask.data()[p] == 1.0 {
                assert_eq!(trace.image.data()[p], y.data()[p]);
            }
        }
    }

    #[test]
    fn joint_score_equals_sum_of_factors() {
        let params = small_params();
        let mut rng = rng_from(8, &[]);
        let y = Tensor::from_vec(&[1, 8, 8], (0..64).map(|_| rand::Rng::random::<f64>(&mut rng)).collect())
            .unwrap();
        let ctx = infer_context_with_mode(
            &params,
            &y,
            4,
            0.9,
            &mut rng_from(10, &[]),
            Variant::Independent,
            SampleMode::Hard,
        )
        .unwrap();
        let a = Tensor::from_vec(&[3], vec![0.1, 0.2, -0.3]).unwrap();

        let joint = trace_joint_log_prob(&params, &a, &ctx.onehots, &ctx.mask, &y).unwrap();

        let log_pa =
            diag_gaussian_log_prob(&a, &DiagGaussianParams::standard(&[3])).unwrap();
        let log_px = location_log_prob_under_prior(&params, &ctx.onehots, &a).unwrap();
        let vp = predict_context_values(&params, &ctx.mask, &a).unwrap();
        let log_pym = masked_gaussian_sum(&y, &vp, &ctx.mask, false).unwrap();
        let pred = convcnp_predict(&params, &ctx.mask, &ctx.values).unwrap();
        let pp = DiagGaussianParams::new(pred.mean, pred.scale).unwrap();
        let log_pyt = masked_gaussian_sum(&y, &pp, &ctx.mask, true).unwrap();

        let total = log_pa + log_px + log_pym + log_pyt;
        assert!((joint - total).abs() < 1e-6 * total.abs().max(1.0));
    }
}
