//! Reparameterizable probability primitives.
//!
//! Gumbel noise and Gumbel-Softmax over a flattened pixel grid, diagonal
//! Gaussians, the closed-form KL against a standard normal, and a stable
//! log-mean-exp. Everything is a pure function of its inputs and the supplied
//! generator, so callers own determinism by owning seeds.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};

/// Gaussian scales are produced as `softplus(raw) + SCALE_FLOOR`; the floor
/// keeps likelihoods bounded on saturated pixels.
pub const SCALE_FLOOR: f64 = 1e-4;

/// Uniform draws feeding the Gumbel transform are clamped away from {0, 1}.
pub const UNIFORM_EPS: f64 = 1e-10;

/// Probabilities over the flattened H*W pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector {
    probs: Vec<f64>,
}

impl SimplexVector {
    /// Validates nonnegativity and normalisation (1e-6 tolerance).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract("simplex vector must have K >= 1 entries"));
        }
        if probs.iter().any(|&p| p < 0.0) {
            return Err(Error::contract("simplex vector has a negative entry"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("simplex vector sums to {sum}, not 1")));
        }
        Ok(SimplexVector { probs })
    }

    pub fn one_hot(k: usize, hot: usize) -> Result<Self> {
        if hot >= k {
            return Err(Error::contract(format!("hot index {hot} out of range for K={k}")));
        }
        let mut probs = vec![0.0; k];
        probs[hot] = 1.0;
        Ok(SimplexVector { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &v) in self.probs.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        best
    }

    /// True when exactly one entry is 1 and the rest are 0.
    pub fn is_hard(&self) -> bool {
        let ones = self.probs.iter().filter(|&&p| p == 1.0).count();
        let zeros = self.probs.iter().filter(|&&p| p == 0.0).count();
        ones == 1 && zeros == self.probs.len() - 1
    }
}

/// Mean/scale pair of a diagonal Gaussian. Scales are validated against
/// [`SCALE_FLOOR`] at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussianParams {
    pub mean: Tensor,
    pub scale: Tensor,
}

impl DiagGaussianParams {
    pub fn new(mean: Tensor, scale: Tensor) -> Result<Self> {
        same_shape(&mean, &scale)?;
        if scale.iter().any(|&s| !(s >= SCALE_FLOOR)) {
            return Err(Error::contract(format!("scale entries must be >= {SCALE_FLOOR}")));
        }
        Ok(DiagGaussianParams { mean, scale })
    }

    pub fn standard(shape: &[usize]) -> Self {
        DiagGaussianParams { mean: Tensor::zeros(shape), scale: Tensor::full(shape, 1.0) }
    }
}

/// Numerically stable softplus: `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// One standard Gumbel draw: `-ln(-ln u)` with `u` clamped into
/// `[UNIFORM_EPS, 1 - UNIFORM_EPS]`.
pub fn gumbel_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// I.i.d. standard Gumbel noise of the given shape.
pub fn sample_gumbel(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if shape.is_empty() || shape.iter().product::<usize>() == 0 {
        return Err(Error::contract("sample_gumbel: shape must be nonempty"));
    }
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| gumbel_draw(rng)).collect();
    Tensor::from_vec(shape, data)
}

/// Softmax with max-subtraction; returns probabilities.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Log-softmax with max-subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Relaxed categorical sample: `softmax((logits + g) / temperature)`.
///
/// With `hard`, the returned vector is the exact one-hot at the argmax of the
/// soft sample; gradient paths (in the tape module) treat the hard sample as
/// the soft one (straight-through).
pub fn gumbel_softmax_sample(
    logits: &[f64],
    temperature: f64,
    rng: &mut ChaCha8Rng,
    hard: bool,
) -> Result<SimplexVector> {
    if logits.is_empty() {
        return Err(Error::contract("gumbel_softmax_sample: K must be >= 1"));
    }
    if !(temperature > 0.0) {
        return Err(Error::contract(format!(
            "gumbel_softmax_sample: temperature must be positive, got {temperature}"
        )));
    }
    let perturbed: Vec<f64> =
        logits.iter().map(|&l| (l + gumbel_draw(rng)) / temperature).collect();
    let soft = softmax(&perturbed);
    if hard {
        let hot = SimplexVector { probs: soft }.argmax();
        SimplexVector::one_hot(logits.len(), hot)
    } else {
        SimplexVector::new(soft)
    }
}

/// Log-probability of an exact one-hot under `softmax(logits)`.
pub fn categorical_log_prob(one_hot: &SimplexVector, logits: &[f64]) -> Result<f64> {
    if one_hot.len() != logits.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![logits.len()],
            got: vec![one_hot.len()],
        });
    }
    if !one_hot.is_hard() {
        return Err(Error::contract("categorical_log_prob: argument must be exactly one-hot"));
    }
    Ok(log_softmax(logits)[one_hot.argmax()])
}

/// Sum over all elements of the diagonal-Gaussian log-density.
pub fn diag_gaussian_log_prob(x: &Tensor, params: &DiagGaussianParams) -> Result<f64> {
    same_shape(x, &params.mean)?;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for ((&v, &mu), &s) in x.iter().zip(params.mean.iter()).zip(params.scale.iter()) {
        let z = (v - mu) / s;
        total += -0.5 * ln_2pi - s.ln() - 0.5 * z * z;
    }
    Ok(total)
}

/// `KL[N(mean, scale^2) || N(0, I)]`, summed over dimensions.
pub fn gaussian_kl_std_normal(params: &DiagGaussianParams) -> Result<f64> {
    let mut total = 0.0;
    for (&mu, &s) in params.mean.iter().zip(params.scale.iter()) {
        if !(s > 0.0) {
            return Err(Error::contract("gaussian_kl_std_normal: scale must be positive"));
        }
        total += 0.5 * (mu * mu + s * s - 1.0) - s.ln();
    }
    Ok(total)
}

/// Reparameterised draw `mean + scale * eps`, `eps ~ N(0, I)`.
pub fn reparam_gaussian_sample(params: &DiagGaussianParams, rng: &mut ChaCha8Rng) -> Tensor {
    let eps: Vec<f64> = (0..params.mean.len()).map(|_| StandardNormal.sample(rng)).collect();
    let data: Vec<f64> = params
        .mean
        .iter()
        .zip(params.scale.iter())
        .zip(eps.iter())
        .map(|((&mu, &s), &e)| mu + s * e)
        .collect();
    Tensor::from_vec(params.mean.shape(), data).expect("shape preserved")
}

/// `log((1/K) * sum_k exp(v_k))` with max-subtraction.
pub fn log_mean_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("log_mean_exp: input must be nonempty"));
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // All -inf stays -inf; a +inf would have poisoned any scheme.
        return Ok(max);
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + (sum / values.len() as f64).ln())
}
