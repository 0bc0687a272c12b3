//! Noise schedules and the deterministic denoising recurrence.
//!
//! A schedule stores the cumulative signal level `alpha_bar[t]` for
//! `t = 0..=T` with `alpha_bar[0] = 1`. Derived per-step quantities:
//!
//! - `sigma(t) = sqrt(1 - alpha_bar[t])` — the noise level of `z_t`,
//! - `beta(t)  = sqrt((1 - alpha_bar[t]) / alpha_bar[t])` — the noise/signal
//!   ratio that parameterizes the deterministic step.
//!
//! `alpha_bar` strictly decreasing in `t` makes `sigma` strictly increasing
//! and `beta(t) - beta(t-1)` strictly positive, which the sign analysis of
//! the denoising step relies on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Per-step variance grows linearly from `beta_start` to `beta_end`.
    LinearBeta { beta_start: f64, beta_end: f64 },
    /// Squared-cosine cumulative schedule with a small time offset.
    Cosine { offset: f64 },
}

/// Serializable schedule description used by config files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub num_steps: usize,
    #[serde(flatten)]
    pub kind: ScheduleKind,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            num_steps: 30,
            kind: ScheduleKind::LinearBeta { beta_start: 1e-4, beta_end: 0.2 },
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.num_steps, self.kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(num_steps: usize, kind: ScheduleKind) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::ScheduleTooShort(num_steps));
        }
        let mut alpha_bar = Vec::with_capacity(num_steps + 1);
        alpha_bar.push(1.0);
        match kind {
            ScheduleKind::LinearBeta { beta_start, beta_end } => {
                for t in 1..=num_steps {
                    let frac = (t - 1) as f64 / (num_steps - 1) as f64;
                    let beta = beta_start + frac * (beta_end - beta_start);
                    alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
                }
            }
            ScheduleKind::Cosine { offset } => {
                let f = |t: f64| {
                    let x = (t / num_steps as f64 + offset) / (1.0 + offset);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                let f0 = f(0.0);
                for t in 1..=num_steps {
                    let ratio = (f(t as f64) / f(t as f64 - 1.0)).clamp(1e-3, 1.0 - 1e-8);
                    alpha_bar.push(alpha_bar[t - 1] * ratio);
                }
                let _ = f0;
            }
        }
        let sched = NoiseSchedule { kind, alpha_bar };
        sched.validate()?;
        Ok(sched)
    }

    /// The default experiment schedule: 30 steps, beta from 1e-4 to 0.2.
    pub fn default_linear(num_steps: usize) -> Self {
        NoiseSchedule::build(num_steps, ScheduleKind::LinearBeta { beta_start: 1e-4, beta_end: 0.2 })
            .expect("default schedule is valid")
    }

    fn validate(&self) -> Result<()> {
        for t in 1..self.alpha_bar.len() {
            let cur = self.alpha_bar[t];
            if !(cur > 0.0 && cur < self.alpha_bar[t - 1] && cur.is_finite()) {
                return Err(Error::NonMonotonicSchedule(t));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps T.
    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.num_steps() });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    pub fn beta(&self, t: usize) -> f64 {
        ((1.0 - self.alpha_bar[t]) / self.alpha_bar[t]).sqrt()
    }
}

/// `z_t = sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) eps`
pub fn forward_diffuse(z0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_timestep(t)?;
    if eps.len() != z0.len() {
        return Err(Error::DimMismatch { expected: z0.len(), got: eps.len() });
    }
    let signal = sched.alpha_bar(t).sqrt();
    let noise = sched.sigma(t);
    Ok(z0.iter().zip(eps).map(|(z, e)| signal * z + noise * e).collect())
}

/// One deterministic denoising step from `t` to `t_prev`:
///
/// `z_prev = sqrt(ab_prev / ab_t) z_t + sqrt(ab_prev) (beta_prev - beta_t) eps_hat`
pub fn ddim_step(
    z_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_timestep(t)?;
    if t_prev >= t {
        return Err(Error::BadStepOrder { t, t_prev });
    }
    if eps_hat.len() != z_t.len() {
        return Err(Error::DimMismatch { expected: z_t.len(), got: eps_hat.len() });
    }
    let carry = (sched.alpha_bar(t_prev) / sched.alpha_bar(t)).sqrt();
    let eps_coef = sched.alpha_bar(t_prev).sqrt() * (sched.beta(t_prev) - sched.beta(t));
    Ok(z_t
        .iter()
        .zip(eps_hat)
        .map(|(z, e)| carry * z + eps_coef * e)
        .collect())
}
