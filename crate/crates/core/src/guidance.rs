//! Noise-prediction compositions: classifier-free guidance for sampling, the
//! erasure training targets, and numeric verifiers for the identities that
//! justify pushing erasure guidance into the unconditional branch.
//!
//! All compositions are affine in their epsilon arguments, so they can be
//! checked in isolation against hand arithmetic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch { expected: a.len(), got: b.len() });
    }
    Ok(())
}

/// `uncond + w * (cond - uncond)`
fn lerp_guidance(eps_uncond: &[f64], eps_cond: &[f64], w: f64) -> Vec<f64> {
    eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(u, c)| u + w * (c - u))
        .collect()
}

/// Classifier-free guidance: `uncond + omega * (cond - uncond)`.
///
/// `omega = 1` returns the conditional prediction bit-exactly, so sampling at
/// unit scale is literally conditioning-only sampling.
pub fn cfg_compose(eps_uncond: &[f64], eps_cond: &[f64], omega: f64) -> Result<Vec<f64>> {
    check_dims(eps_uncond, eps_cond)?;
    if omega == 1.0 {
        return Ok(eps_cond.to_vec());
    }
    Ok(lerp_guidance(eps_uncond, eps_cond, omega))
}

/// Erasure target for the conditional branch: the frozen prediction pushed
/// away from the concept, `uncond - eta_c * (cond - uncond)`.
pub fn cond_erase_target(eps_uncond: &[f64], eps_cond: &[f64], eta_c: f64) -> Result<Vec<f64>> {
    check_dims(eps_uncond, eps_cond)?;
    Ok(lerp_guidance(eps_uncond, eps_cond, -eta_c))
}

/// Erasure target for the unconditional branch: the frozen prediction pushed
/// toward the concept, `uncond + eta_u * (cond - uncond)`. Once the tuned
/// unconditional branch matches it, classifier-free guidance subtracts the
/// concept direction under any input text.
pub fn uncond_erase_target(eps_uncond: &[f64], eps_cond: &[f64], eta_u: f64) -> Result<Vec<f64>> {
    check_dims(eps_uncond, eps_cond)?;
    Ok(lerp_guidance(eps_uncond, eps_cond, eta_u))
}

/// Unconditional erasure target with a prior correction: subtracts a
/// gamma-weighted pull toward a sampled prior concept so its generation
/// prior survives the erasure,
/// `uncond + eta_u * (cond - uncond) - eta_p * gamma * (prior - uncond)`.
pub fn uncond_erase_target_with_prior(
    eps_uncond: &[f64],
    eps_cond: &[f64],
    eps_prior_cond: &[f64],
    eta_u: f64,
    eta_p: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    check_dims(eps_uncond, eps_cond)?;
    check_dims(eps_uncond, eps_prior_cond)?;
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .zip(eps_prior_cond)
        .map(|((u, c), p)| u + eta_u * (c - u) - eta_p * gamma * (p - u))
        .collect())
}

/// Per-prior correction weights plus a record of where they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaTable {
    values: BTreeMap<usize, f64>,
    provenance: GammaProvenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum GammaProvenance {
    /// Every prior uses the same fixed weight.
    Fixed { value: f64 },
    /// Ratios measured on samples generated from a base model.
    Estimated { sample_count: usize, seed: u64 },
    /// Supplied verbatim.
    Explicit,
}

impl GammaTable {
    pub fn fixed(priors: &[usize], value: f64) -> Self {
        GammaTable {
            values: priors.iter().map(|&p| (p, value)).collect(),
            provenance: GammaProvenance::Fixed { value },
        }
    }

    pub fn from_values(values: BTreeMap<usize, f64>, provenance: GammaProvenance) -> Result<Self> {
        for (&p, &v) in &values {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("gamma for prior {p} is {v}")));
            }
        }
        Ok(GammaTable { values, provenance })
    }

    pub fn get(&self, prior: usize) -> Result<f64> {
        self.values.get(&prior).copied().ok_or(Error::MissingGamma(prior))
    }

    pub fn covers(&self, priors: &[usize]) -> bool {
        priors.iter().all(|p| self.values.contains_key(p))
    }

    pub fn values(&self) -> &BTreeMap<usize, f64> {
        &self.values
    }

    pub fn provenance(&self) -> &GammaProvenance {
        &self.provenance
    }
}

/// Guidance scales shared by sampling, erasure training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub eta_u: f64,
    pub eta_c: f64,
    pub eta_p: f64,
    pub omega: f64,
    pub gamma: GammaTable,
}

impl GuidanceConfig {
    pub fn new(eta_u: f64, eta_c: f64, eta_p: f64, omega: f64, gamma: GammaTable) -> Result<Self> {
        for (name, v) in [("eta_u", eta_u), ("eta_c", eta_c), ("eta_p", eta_p)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !omega.is_finite() {
            return Err(Error::InvalidConfig(format!("omega must be finite, got {omega}")));
        }
        Ok(GuidanceConfig { eta_u, eta_c, eta_p, omega, gamma })
    }
}

/// Outcome of checking that guiding with the aligned unconditional branch
/// equals the expanded form
/// `uncond* + eta_u (1 - omega) (cond* - uncond*) + omega (eps_input - uncond*)`.
#[derive(Clone, Debug)]
pub struct DecompositionCheck {
    pub composed: Vec<f64>,
    pub reconstructed: Vec<f64>,
    pub max_abs_diff: f64,
}

/// Evaluate both sides of the decomposition independently. On exact-premise
/// inputs (tuned unconditional equals the erasure target, tuned conditional
/// supplied as-is) the two sides agree to floating-point roundoff.
pub fn verify_cfg_decomposition(
    eps_star_uncond: &[f64],
    eps_star_target: &[f64],
    eps_tuned_input_cond: &[f64],
    eta_u: f64,
    omega: f64,
) -> Result<DecompositionCheck> {
    check_dims(eps_star_uncond, eps_star_target)?;
    check_dims(eps_star_uncond, eps_tuned_input_cond)?;
    let aligned_uncond = uncond_erase_target(eps_star_uncond, eps_star_target, eta_u)?;
    let composed = cfg_compose(&aligned_uncond, eps_tuned_input_cond, omega)?;
    let reconstructed: Vec<f64> = eps_star_uncond
        .iter()
        .zip(eps_star_target)
        .zip(eps_tuned_input_cond)
        .map(|((u, c), inp)| u + eta_u * (1.0 - omega) * (c - u) + omega * (inp - u))
        .collect();
    let max_abs_diff = composed
        .iter()
        .zip(&reconstructed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(DecompositionCheck { composed, reconstructed, max_abs_diff })
}

/// Coefficients of the simplified denoising step
/// `z_prev = carry * z_t - noise_removal * eps*_uncond
///          + input_pull * grad log p(c_input | z_t)
///          - target_push * grad log p(c_target | z_t)`.
///
/// All four must be strictly positive for the step to provably reduce the
/// probability of the erased concept; that needs `omega > 1` and an
/// increasing `beta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConstants {
    pub carry: f64,
    pub noise_removal: f64,
    pub input_pull: f64,
    pub target_push: f64,
}

impl StepConstants {
    pub fn as_array(&self) -> [(&'static str, f64); 4] {
        [
            ("carry", self.carry),
            ("noise_removal", self.noise_removal),
            ("input_pull", self.input_pull),
            ("target_push", self.target_push),
        ]
    }
}

/// Assemble the four step constants from schedule quantities and verify every
/// one is strictly positive. `omega = 1` makes `target_push` vanish, which is
/// reported as a degenerate (non-positive) constant.
pub fn denoising_step_constants(
    sched: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    omega: f64,
    eta_u: f64,
) -> Result<StepConstants> {
    sched.check_timestep(t)?;
    if t_prev >= t {
        return Err(Error::BadStepOrder { t, t_prev });
    }
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let sigma = sched.sigma(t);
    let beta_gap = sched.beta(t) - sched.beta(t_prev);
    let carry = (ab_prev / ab_t).sqrt();
    let noise_removal = ab_prev.sqrt() * beta_gap;
    let input_pull = noise_removal * sigma * omega;
    let target_push = noise_removal * sigma * eta_u * (omega - 1.0);
    let constants = StepConstants { carry, noise_removal, input_pull, target_push };
    for (name, value) in constants.as_array() {
        if !(value > 0.0) {
            return Err(Error::NonPositiveStepConstant { name, value });
        }
    }
    Ok(constants)
}
