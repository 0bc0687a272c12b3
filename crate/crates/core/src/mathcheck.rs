//! Batch identity checks behind the `verify-math` command: guidance algebra
//! reductions, the unconditional-erasure decomposition, denoising-step
//! constant signs, and an end-to-end equality between the direct guided DDIM
//! pass and the same pass assembled from step constants and analytic scores.

use rand::Rng;

use crate::error::Result;
use crate::guidance::{
    cfg_compose, cond_erase_target, denoising_step_constants, uncond_erase_target,
    uncond_erase_target_with_prior, verify_cfg_decomposition,
};
use crate::rng::{standard_normal, stream};
use crate::schedule::{ddim_step, NoiseSchedule};
use crate::types::Condition;
use crate::universe::{Concept, ConceptUniverse};

#[derive(Clone, Debug)]
pub struct IdentityCheck {
    pub name: String,
    pub max_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl IdentityCheck {
    fn new(name: impl Into<String>, max_err: f64, tolerance: f64) -> Self {
        IdentityCheck { name: name.into(), max_err, tolerance, pass: max_err < tolerance }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IdentityCheckConfig {
    pub trials: usize,
    pub eta_u: f64,
    pub omegas: [f64; 2],
    pub seed: u64,
}

impl Default for IdentityCheckConfig {
    fn default() -> Self {
        IdentityCheckConfig { trials: 10_000, eta_u: 3.0, omegas: [2.0, 7.5], seed: 0 }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Run the whole identity battery against a schedule.
pub fn run_identity_checks(
    sched: &NoiseSchedule,
    cfg: &IdentityCheckConfig,
) -> Result<Vec<IdentityCheck>> {
    let mut rng = stream(cfg.seed, 0x1dc);
    let mut checks = Vec::new();
    let tol = 1e-12;

    let mut worst = [0.0f64; 7];
    for _ in 0..cfg.trials {
        let u = standard_normal(&mut rng, 2);
        let c = standard_normal(&mut rng, 2);
        let p = standard_normal(&mut rng, 2);
        let omega: f64 = rng.random_range(-8.0..8.0);
        let eta: f64 = rng.random_range(0.0..6.0);
        let gamma: f64 = rng.random_range(0.0..2.0);
        let scale: f64 = rng.random_range(-3.0..3.0);

        // cfg at unit scale returns the conditional prediction.
        worst[0] = worst[0].max(max_abs_diff(&cfg_compose(&u, &c, 1.0)?, &c));
        // erasure targets at zero scale return the unconditional prediction.
        worst[1] = worst[1].max(max_abs_diff(&cond_erase_target(&u, &c, 0.0)?, &u));
        worst[1] = worst[1].max(max_abs_diff(&uncond_erase_target(&u, &c, 0.0)?, &u));
        // zero prior scale reduces the corrected target to the plain one.
        worst[2] = worst[2].max(max_abs_diff(
            &uncond_erase_target_with_prior(&u, &c, &p, eta, 0.0, gamma)?,
            &uncond_erase_target(&u, &c, eta)?,
        ));
        // mirror identity around the unconditional prediction.
        let away = cond_erase_target(&u, &c, eta)?;
        let toward = uncond_erase_target(&u, &c, eta)?;
        let mirror = away
            .iter()
            .zip(&toward)
            .zip(&u)
            .map(|((a, t), uu)| ((t - uu) + (a - uu)).abs())
            .fold(0.0, f64::max);
        worst[3] = worst[3].max(mirror);
        // homogeneity of the cfg composition.
        let su: Vec<f64> = u.iter().map(|v| scale * v).collect();
        let sc: Vec<f64> = c.iter().map(|v| scale * v).collect();
        let scaled: Vec<f64> = cfg_compose(&u, &c, omega)?.iter().map(|v| scale * v).collect();
        worst[4] = worst[4].max(max_abs_diff(&cfg_compose(&su, &sc, omega)?, &scaled));
        // decomposition identity for the aligned unconditional branch.
        let chk = verify_cfg_decomposition(&u, &c, &p, cfg.eta_u, omega)?;
        worst[5] = worst[5].max(chk.max_abs_diff);
        // decomposition at unit omega returns the input-conditional branch.
        let chk1 = verify_cfg_decomposition(&u, &c, &p, cfg.eta_u, 1.0)?;
        worst[6] = worst[6].max(max_abs_diff(&chk1.reconstructed, &p));
    }
    checks.push(IdentityCheck::new("cfg unit-scale reduction", worst[0], tol));
    checks.push(IdentityCheck::new("erasure targets zero-scale reduction", worst[1], tol));
    checks.push(IdentityCheck::new("prior correction vanishes at eta_p = 0", worst[2], tol));
    checks.push(IdentityCheck::new("erasure target mirror identity", worst[3], tol));
    checks.push(IdentityCheck::new("cfg homogeneity", worst[4], tol));
    checks.push(IdentityCheck::new("aligned-uncond cfg decomposition", worst[5], tol));
    checks.push(IdentityCheck::new("decomposition collapse at omega = 1", worst[6], tol));

    for omega in cfg.omegas {
        let mut min_constant = f64::INFINITY;
        for t in 1..=sched.num_steps() {
            match denoising_step_constants(sched, t, t - 1, omega, cfg.eta_u) {
                Ok(constants) => {
                    for (_, v) in constants.as_array() {
                        min_constant = min_constant.min(v);
                    }
                }
                Err(_) => min_constant = f64::NEG_INFINITY,
            }
        }
        checks.push(IdentityCheck {
            name: format!("step constants positive (omega = {omega})"),
            max_err: -min_constant,
            tolerance: 0.0,
            pass: min_constant > 0.0,
        });
    }

    checks.push(assembled_pass_check(sched, cfg)?);
    Ok(checks)
}

/// Direct guided pass vs the same pass assembled from step constants and the
/// implied classifier gradients, on a two-concept universe with exact scores.
fn assembled_pass_check(sched: &NoiseSchedule, cfg: &IdentityCheckConfig) -> Result<IdentityCheck> {
    let universe = ConceptUniverse::new(
        2,
        vec![
            Concept::isotropic(vec![1.5, -0.5], 0.6),
            Concept::isotropic(vec![-1.0, 1.0], 0.8),
        ],
        0,
    )?;
    let target = Condition::Concept(0);
    let input = Condition::Concept(1);
    let omega = cfg.omegas[1];
    let mut rng = stream(cfg.seed, 0xa55);
    let mut worst = 0.0f64;
    for _ in 0..16 {
        let mut z_direct = standard_normal(&mut rng, 2);
        let mut z_assembled = z_direct.clone();
        for t in (1..=sched.num_steps()).rev() {
            let sigma = sched.sigma(t);
            // Direct route: aligned unconditional branch composed with the
            // input-conditional branch.
            let eps_u = universe.analytic_eps(&z_direct, t, Condition::Null, sched)?;
            let eps_c = universe.analytic_eps(&z_direct, t, target, sched)?;
            let eps_in = universe.analytic_eps(&z_direct, t, input, sched)?;
            let aligned = uncond_erase_target(&eps_u, &eps_c, cfg.eta_u)?;
            let composed = cfg_compose(&aligned, &eps_in, omega)?;
            z_direct = ddim_step(&z_direct, &composed, t, t - 1, sched)?;

            // Assembled route: step constants applied to the implied
            // classifier gradients grad log p(cond | z) = -(eps_cond -
            // eps_uncond) / sigma.
            let eps_u2 = universe.analytic_eps(&z_assembled, t, Condition::Null, sched)?;
            let eps_c2 = universe.analytic_eps(&z_assembled, t, target, sched)?;
            let eps_in2 = universe.analytic_eps(&z_assembled, t, input, sched)?;
            let constants = denoising_step_constants(sched, t, t - 1, omega, cfg.eta_u)?;
            z_assembled = (0..2)
                .map(|i| {
                    let grad_target = -(eps_c2[i] - eps_u2[i]) / sigma;
                    let grad_input = -(eps_in2[i] - eps_u2[i]) / sigma;
                    constants.carry * z_assembled[i] - constants.noise_removal * eps_u2[i]
                        + constants.input_pull * grad_input
                        - constants.target_push * grad_target
                })
                .collect();
            worst = worst.max(max_abs_diff(&z_direct, &z_assembled));
        }
    }
    Ok(IdentityCheck::new("assembled vs direct guided pass", worst, 1e-10))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_battery_passes_on_default_schedule() {
        let sched = NoiseSchedule::default_linear(30);
        let cfg = IdentityCheckConfig { trials: 500, ..Default::default() };
        let checks = run_identity_checks(&sched, &cfg).unwrap();
        assert_eq!(checks.len(), 10);
        for c in &checks {
            assert!(c.pass, "{} failed with max err {}", c.name, c.max_err);
        }
    }

    #[test]
    fn battery_reports_failure_below_unit_omega() {
        let sched = NoiseSchedule::default_linear(30);
        let cfg = IdentityCheckConfig {
            trials: 10,
            omegas: [1.0, 7.5],
            ..Default::default()
        };
        let checks = run_identity_checks(&sched, &cfg).unwrap();
        let degenerate = checks
            .iter()
            .find(|c| c.name.contains("omega = 1)"))
            .expect("the omega = 1 row exists");
        assert!(!degenerate.pass);
    }
}
