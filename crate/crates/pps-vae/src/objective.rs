//! The four-term training objective, its single-sample estimator, and the
//! importance-weighted log-marginal estimator built from the same factors.
//!
//! Per sample the estimator reads
//! `elbo = target_ll - kl_a + context_ll - location_ratio`:
//! completion likelihood on the target pixels, closed-form KL of the abstract
//! posterior, context-value likelihood on the observed pixels (the lookup's
//! delta posterior reduces the value ratio to this single term), and the
//! location log-ratio scored on the pre-dedup draws.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::distributions::{diag_gaussian_log_prob, log_mean_exp, DiagGaussianParams};
use crate::error::{Error, Result};
use crate::generative::{trace_cnp, trace_context_decoder, trace_prior_logits};
use crate::inference::{
    context_from_trace, trace_abstract, trace_locations, AbstractLatent, ContextSet, SampleMode,
    Variant,
};
use crate::nn::{BoundParams, ModelParams};
use crate::rng::rng_from;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The four ELBO terms and their sum, in nats per image (summed over pixels).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ElboBreakdown {
    pub target_ll: f64,
    pub kl_a: f64,
    pub context_ll: f64,
    pub location_ratio: f64,
    pub elbo: f64,
}

impl ElboBreakdown {
    pub fn recombined(&self) -> f64 {
        self.target_ll - self.kl_a + self.context_ll - self.location_ratio
    }

    pub fn all_finite(&self) -> bool {
        [self.target_ll, self.kl_a, self.context_ll, self.location_ratio, self.elbo]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, if any.
    pub fn offending_term(&self) -> Option<&'static str> {
        if !self.target_ll.is_finite() {
            Some("target_ll")
        } else if !self.kl_a.is_finite() {
            Some("kl_a")
        } else if !self.context_ll.is_finite() {
            Some("context_ll")
        } else if !self.location_ratio.is_finite() {
            Some("location_ratio")
        } else if !self.elbo.is_finite() {
            Some("elbo")
        } else {
            None
        }
    }
}

/// One estimator draw with every side quantity the tests and estimators need.
#[derive(Debug, Clone)]
pub struct ElboSample {
    pub breakdown: ElboBreakdown,
    /// `sum_i log q(x_i | ...)` on the pre-dedup draws.
    pub log_q_locations: f64,
    /// `sum_i log p(x_i | a)` on the pre-dedup draws.
    pub log_p_locations: f64,
    /// `log q(a* | posterior)` at the sampled latent.
    pub log_q_abstract: f64,
    /// `log N(a*; 0, I)` at the sampled latent.
    pub log_p_abstract: f64,
    pub context: ContextSet,
    pub latent: AbstractLatent,
}

struct ElboVars {
    elbo: Var,
    breakdown: ElboBreakdown,
    sample: ElboSample,
}

/// Records one full estimator pass on the tape. Noise order per sample:
/// `M*K` uniforms for the location draws, then `D` normals for the latent.
#[allow(clippy::too_many_arguments)]
fn build_elbo(
    tape: &mut Tape,
    bp: &mut BoundParams,
    params: &ModelParams,
    y: &Tensor,
    m: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
    variant: Variant,
    mode: SampleMode,
) -> Result<ElboVars> {
    let loc = trace_locations(tape, bp, params, y, m, tau, rng, variant, mode)?;
    let latent = trace_abstract(tape, bp, params, loc.union, loc.values, rng)?;

    let kl = tape.gaussian_kl_std_normal(latent.mean, latent.scale)?;

    let prior_logits = trace_prior_logits(tape, bp, params, latent.sample)?;
    let mut q_terms = Vec::with_capacity(m);
    let mut p_terms = Vec::with_capacity(m);
    for i in 0..m {
        q_terms.push((tape.log_softmax_dot(loc.draw_weights[i], loc.q_logits[i])?, 1.0));
        p_terms.push((tape.log_softmax_dot(loc.draw_weights[i], prior_logits)?, 1.0));
    }
    let log_q_loc = tape.affine(&q_terms)?;
    let log_p_loc = tape.affine(&p_terms)?;
    let location_ratio = tape.affine(&[(log_q_loc, 1.0), (log_p_loc, -1.0)])?;

    let (cmean, cscale) = trace_context_decoder(tape, bp, params, loc.union, latent.sample)?;
    let context_ll = tape.weighted_gaussian_log_prob(y, loc.union, cmean, cscale)?;

    let (tmean, tscale) = trace_cnp(tape, bp, params, loc.union, loc.values)?;
    let target_weight = tape.one_minus(loc.union);
    let target_ll = tape.weighted_gaussian_log_prob(y, target_weight, tmean, tscale)?;

    let elbo = tape.affine(&[
        (target_ll, 1.0),
        (kl, -1.0),
        (context_ll, 1.0),
        (location_ratio, -1.0),
    ])?;

    let breakdown = ElboBreakdown {
        target_ll: tape.value(target_ll).item(),
        kl_a: tape.value(kl).item(),
        context_ll: tape.value(context_ll).item(),
        location_ratio: tape.value(location_ratio).item(),
        elbo: tape.value(elbo).item(),
    };

    let posterior = DiagGaussianParams::new(
        tape.value(latent.mean).clone(),
        tape.value(latent.scale).clone(),
    )?;
    let a_sample = tape.value(latent.sample).clone();
    let log_q_abstract = diag_gaussian_log_prob(&a_sample, &posterior)?;
    let log_p_abstract =
        diag_gaussian_log_prob(&a_sample, &DiagGaussianParams::standard(a_sample.shape()))?;
    let context = context_from_trace(&loc, y, m, &params.config)?;

    let sample = ElboSample {
        breakdown,
        log_q_locations: tape.value(log_q_loc).item(),
        log_p_locations: tape.value(log_p_loc).item(),
        log_q_abstract,
        log_p_abstract,
        context,
        latent: AbstractLatent { sample: a_sample, posterior },
    };
    Ok(ElboVars { elbo, breakdown, sample })
}

/// Single-sample estimate of the four ELBO terms.
pub fn elbo_terms(
    params: &ModelParams,
    y: &Tensor,
    m: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
    variant: Variant,
    mode: SampleMode,
) -> Result<ElboBreakdown> {
    Ok(elbo_sample(params, y, m, tau, rng, variant, mode)?.breakdown)
}

/// Single-sample estimate plus the side quantities (sampled log-densities,
/// realised context and latent).
pub fn elbo_sample(
    params: &ModelParams,
    y: &Tensor,
    m: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
    variant: Variant,
    mode: SampleMode,
) -> Result<ElboSample> {
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&params.store);
    let vars = build_elbo(&mut tape, &mut bp, params, y, m, tau, rng, variant, mode)?;
    Ok(vars.sample)
}

/// Single-sample ELBO and its gradient with respect to every parameter,
/// flattened in store order. The seed pins all noise, so central differences
/// over the parameters see exactly the same draws.
#[allow(clippy::too_many_arguments)]
pub fn elbo_with_grad(
    params: &ModelParams,
    y: &Tensor,
    m: usize,
    tau: f64,
    seed: u64,
    variant: Variant,
    mode: SampleMode,
) -> Result<(ElboBreakdown, Vec<f64>)> {
    let mut rng = rng_from(seed, &[]);
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&params.store);
    let vars = build_elbo(&mut tape, &mut bp, params, y, m, tau, &mut rng, variant, mode)?;
    let grads = tape.backward(vars.elbo)?;
    Ok((vars.breakdown, bp.gather_grads(&grads)))
}

/// Mean negative single-sample ELBO over a batch, one posterior draw per
/// image, seeded per element.
pub fn training_loss(
    params: &ModelParams,
    images: &[Tensor],
    m: usize,
    tau: f64,
    seeds: &[u64],
    variant: Variant,
    mode: SampleMode,
) -> Result<f64> {
    Ok(batch_grad(params, images, m, tau, seeds, variant, mode, false)?.loss)
}

pub struct BatchResult {
    pub loss: f64,
    pub grad: Option<Vec<f64>>,
    pub mean_breakdown: ElboBreakdown,
}

/// Batch forward (and optionally backward). Per-image work runs in parallel;
/// the reduction is ordered, so results are bitwise reproducible.
#[allow(clippy::too_many_arguments)]
pub fn batch_grad(
    params: &ModelParams,
    images: &[Tensor],
    m: usize,
    tau: f64,
    seeds: &[u64],
    variant: Variant,
    mode: SampleMode,
    with_grad: bool,
) -> Result<BatchResult> {
    if images.is_empty() {
        return Err(Error::contract("batch must be nonempty"));
    }
    if images.len() != seeds.len() {
        return Err(Error::contract("need one seed per image"));
    }
    let per: Vec<Result<(ElboBreakdown, Option<Vec<f64>>)>> = images
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(y, &seed)| {
            if with_grad {
                let (b, g) = elbo_with_grad(params, y, m, tau, seed, variant, mode)?;
                Ok((b, Some(g)))
            } else {
                let mut rng = rng_from(seed, &[]);
                let b = elbo_terms(params, y, m, tau, &mut rng, variant, mode)?;
                Ok((b, None))
            }
        })
        .collect();

    let n = images.len() as f64;
    let mut sum = ElboBreakdown {
        target_ll: 0.0,
        kl_a: 0.0,
        context_ll: 0.0,
        location_ratio: 0.0,
        elbo: 0.0,
    };
    let mut grad = if with_grad { Some(vec![0.0; params.store.len()]) } else { None };
    for item in per {
        let (b, g) = item?;
        sum.target_ll += b.target_ll;
        sum.kl_a += b.kl_a;
        sum.context_ll += b.context_ll;
        sum.location_ratio += b.location_ratio;
        sum.elbo += b.elbo;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            // Loss is the mean negative ELBO, so flip sign here.
            for (o, v) in acc.iter_mut().zip(g.iter()) {
                *o -= v / n;
            }
        }
    }
    let mean_breakdown = ElboBreakdown {
        target_ll: sum.target_ll / n,
        kl_a: sum.kl_a / n,
        context_ll: sum.context_ll / n,
        location_ratio: sum.location_ratio / n,
        elbo: sum.elbo / n,
    };
    Ok(BatchResult { loss: -mean_breakdown.elbo, grad, mean_breakdown })
}

/// K-sample importance-weighted log-marginal estimate.
///
/// Each weight is assembled from the same factor calls as [`elbo_terms`]
/// (the abstract-latent divergence enters through its closed-form KL), so the
/// K = 1 estimate reproduces the single-sample ELBO bitwise under a shared
/// seed, and the estimate is nondecreasing in K in expectation.
#[allow(clippy::too_many_arguments)]
pub fn iwae_log_marginal(
    params: &ModelParams,
    y: &Tensor,
    m: usize,
    k: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
    variant: Variant,
    mode: SampleMode,
) -> Result<f64> {
    if k < 1 {
        return Err(Error::contract("IWAE needs K >= 1 samples"));
    }
    let mut weights = Vec::with_capacity(k);
    for _ in 0..k {
        let b = elbo_terms(params, y, m, tau, rng, variant, mode)?;
        weights.push(b.elbo);
    }
    log_mean_exp(&weights)
}
