//! Editing attacks against an effective model: lift a data point part-way up
//! the noise schedule, then denoise it under an edit condition. The threat
//! model never mentions the erased concept in the edit text, so an erased
//! model must block reconstruction purely through its unconditional branch.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::cfg_compose;
use crate::rng::{standard_normal, stream};
use crate::sampler::EpsModel;
use crate::schedule::{ddim_step, forward_diffuse, NoiseSchedule};
use crate::types::{Condition, LatentState};
use crate::universe::ConceptUniverse;

const EDIT_NOISE_TAG: u64 = 0xed17;
const INVERT_MAX_ITERS: usize = 16;
const INVERT_TOL: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InversionMode {
    /// Re-noise the point with fresh Gaussian noise (noise-and-denoise).
    StochasticNoise,
    /// Deterministically invert the denoising recurrence at unit guidance.
    DdimInversion,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    /// Fraction of the schedule to lift the point through; the edit starts
    /// at `t_edit = round(strength * T)`, at least 1.
    pub strength: f64,
    pub edit_condition: Condition,
    pub cfg_scale: f64,
    pub inversion_mode: InversionMode,
    pub seed: u64,
}

impl EditSpec {
    /// Null-condition noise-and-denoise edit at the default strength 0.5 and
    /// edit guidance 7.5.
    pub fn default_null(seed: u64) -> Self {
        EditSpec {
            strength: 0.5,
            edit_condition: Condition::Null,
            cfg_scale: 7.5,
            inversion_mode: InversionMode::StochasticNoise,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "edit strength must be in (0, 1], got {}",
                self.strength
            )));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::InvalidConfig("edit cfg_scale must be finite".into()));
        }
        Ok(())
    }

    pub fn edit_timestep(&self, sched: &NoiseSchedule) -> usize {
        ((self.strength * sched.num_steps() as f64).round() as usize)
            .clamp(1, sched.num_steps())
    }
}

/// Run the denoising recurrence in reverse at unit guidance, lifting `x0` up
/// to `t = steps`. Each reverse step solves the forward step's fixed-point
/// equation, so denoising the result with the same model and condition
/// reconstructs the input.
pub fn ddim_invert(
    model: &dyn EpsModel,
    x0: &[f64],
    cond: Condition,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<LatentState> {
    sched.check_timestep(steps)?;
    if x0.len() != model.dim() {
        return Err(Error::DimMismatch { expected: model.dim(), got: x0.len() });
    }
    let mut z = x0.to_vec();
    for t in 1..=steps {
        let carry_inv = (sched.alpha_bar(t) / sched.alpha_bar(t - 1)).sqrt();
        let eps_coef = sched.alpha_bar(t).sqrt() * (sched.beta(t) - sched.beta(t - 1));
        let prev = z.clone();
        // Fixed-point iteration on z_t = f(prev, eps(z_t, t)).
        let mut candidate = {
            let eps = model.predict(&prev, t, cond)?;
            prev.iter().zip(&eps).map(|(p, e)| carry_inv * p + eps_coef * e).collect::<Vec<f64>>()
        };
        for _ in 0..INVERT_MAX_ITERS {
            let eps = model.predict(&candidate, t, cond)?;
            let next: Vec<f64> = prev
                .iter()
                .zip(&eps)
                .map(|(p, e)| carry_inv * p + eps_coef * e)
                .collect();
            let delta = next
                .iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            candidate = next;
            if delta < INVERT_TOL {
                break;
            }
        }
        if !candidate.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("ddim inversion"));
        }
        z = candidate;
    }
    Ok(LatentState::new(z, steps))
}

/// Edit a data point: lift it to `z_{t_edit}` per the inversion mode, then
/// denoise back to 0 with classifier-free guidance under the edit condition.
/// Deterministic given the spec seed.
pub fn edit(
    model: &dyn EpsModel,
    x0: &[f64],
    spec: &EditSpec,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    spec.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("edit input"));
    }
    let t_edit = spec.edit_timestep(sched);
    let mut z = match spec.inversion_mode {
        InversionMode::StochasticNoise => {
            let eps = standard_normal(&mut stream(spec.seed, EDIT_NOISE_TAG), x0.len());
            forward_diffuse(x0, t_edit, &eps, sched)?
        }
        InversionMode::DdimInversion => {
            ddim_invert(model, x0, Condition::Null, sched, t_edit)?.z
        }
    };
    for t in (1..=t_edit).rev() {
        let eps_uncond = model.predict(&z, t, Condition::Null)?;
        let eps_cond = model.predict(&z, t, spec.edit_condition)?;
        let eps = cfg_compose(&eps_uncond, &eps_cond, spec.cfg_scale)?;
        z = ddim_step(&z, &eps, t, t - 1, sched)?;
    }
    Ok(z)
}

/// One edited point with its oracle classes.
#[derive(Clone, Debug, Serialize)]
pub struct EditRecord {
    pub source: Vec<f64>,
    pub edited: Vec<f64>,
    pub edit_condition: Condition,
    pub seed: u64,
    pub class_before: usize,
    pub class_after: usize,
}

#[derive(Clone, Debug, Default)]
pub struct EditBatch {
    pub records: Vec<EditRecord>,
    /// (input index, error message) for points that failed; the batch keeps
    /// going.
    pub failures: Vec<(usize, String)>,
}

impl EditBatch {
    pub fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "source_x",
            "source_y",
            "edited_x",
            "edited_y",
            "edit_condition",
            "class_before",
            "class_after",
        ])?;
        for r in &self.records {
            w.write_record([
                r.source[0].to_string(),
                r.source.get(1).copied().unwrap_or(0.0).to_string(),
                r.edited[0].to_string(),
                r.edited.get(1).copied().unwrap_or(0.0).to_string(),
                r.edit_condition.to_string(),
                r.class_before.to_string(),
                r.class_after.to_string(),
            ])?;
        }
        w.flush().map_err(Error::Io)?;
        Ok(())
    }
}

/// Apply one edit per (point, spec) pair, collecting failures instead of
/// aborting. The universe supplies the oracle classes recorded per point.
pub fn edit_batch(
    model: &dyn EpsModel,
    points: &[Vec<f64>],
    specs: &[EditSpec],
    universe: &ConceptUniverse,
    sched: &NoiseSchedule,
) -> Result<EditBatch> {
    if points.is_empty() {
        return Err(Error::InvalidConfig("edit batch is empty".into()));
    }
    if points.len() != specs.len() {
        return Err(Error::InvalidConfig(format!(
            "{} points but {} edit specs",
            points.len(),
            specs.len()
        )));
    }
    let mut batch = EditBatch::default();
    for (i, (point, spec)) in points.iter().zip(specs).enumerate() {
        match edit(model, point, spec, sched) {
            Ok(edited) => {
                let class_before = universe.classify(point)?;
                let class_after = universe.classify(&edited)?;
                batch.records.push(EditRecord {
                    source: point.clone(),
                    edited,
                    edit_condition: spec.edit_condition,
                    seed: spec.seed,
                    class_before,
                    class_after,
                });
            }
            Err(e) => batch.failures.push((i, e.to_string())),
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::mix3;
    use crate::sampler::{ddim_denoise, AnalyticEpsModel};
    use crate::universe::ConceptUniverse;

    fn setup() -> (ConceptUniverse, NoiseSchedule) {
        (ConceptUniverse::canonical(), NoiseSchedule::default_linear(30))
    }

    #[test]
    fn invert_zero_steps_is_identity() {
        let (u, s) = setup();
        let model = AnalyticEpsModel { universe: &u, sched: &s };
        let x0 = vec![1.0, -2.0];
        let state = ddim_invert(&model, &x0, Condition::Null, &s, 0).unwrap();
        assert_eq!(state.z, x0);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn invert_is_deterministic() {
        let (u, s) = setup();
        let model = AnalyticEpsModel { universe: &u, sched: &s };
        let x0 = vec![4.8, 0.3];
        let a = ddim_invert(&model, &x0, Condition::Concept(0), &s, 30).unwrap();
        let b = ddim_invert(&model, &x0, Condition::Concept(0), &s, 30).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invert_then_denoise_reconstructs() {
        let (u, s) = setup();
        let model = AnalyticEpsModel { universe: &u, sched: &s };
        let mut rng = stream(5, 2);
        for k in [0, 3, 7] {
            let x0 = u.sample(k, &mut rng).unwrap();
            let cond = Condition::Concept(k);
            let top = ddim_invert(&model, &x0, cond, &s, 30).unwrap();
            let traj = ddim_denoise(&model, cond, 1.0, &s, top.z, 30, 0).unwrap();
            let err = traj
                .final_z()
                .iter()
                .zip(&x0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-3, "round-trip error {err} for concept {k}");
        }
    }

    #[test]
    fn tiny_strength_edit_barely_moves_the_point() {
        let (u, s) = setup();
        let model = AnalyticEpsModel { universe: &u, sched: &s };
        let mut rng = stream(6, 2);
        let x0 = u.sample(2, &mut rng).unwrap();
        let spec = EditSpec {
            strength: 1.0 / 30.0,
            edit_condition: Condition::Null,
            cfg_scale: 7.5,
            inversion_mode: InversionMode::StochasticNoise,
            seed: 3,
        };
        assert_eq!(spec.edit_timestep(&s), 1);
        let edited = edit(&model, &x0, &spec, &s).unwrap();
        let moved = crate::linalg::euclidean(&edited, &x0);
        assert!(moved < crate::universe::CANONICAL_SIGMA / 10.0, "moved {moved}");
    }

    #[test]
    fn edits_with_oracle_model_preserve_class() {
        let (u, s) = setup();
        let model = AnalyticEpsModel { universe: &u, sched: &s };
        let mut rng = stream(7, 2);
        let mut kept = 0;
        let n = 100;
        for i in 0..n {
            let k = (i % u.num_concepts()) as usize;
            let x0 = u.sample(k, &mut rng).unwrap();
            let spec = EditSpec::default_null(mix3(11, k as u64, i as u64));
            let edited = edit(&model, &x0, &spec, &s).unwrap();
            if u.classify(&edited).unwrap() == k {
                kept += 1;
            }
        }
        let rate = kept as f64 / n as f64;
        assert!(rate >= 0.6, "oracle-model edits preserved only {rate}");
    }

    #[test]
    fn edit_is_deterministic() {
        let (u, s) = setup();
        let model = AnalyticEpsModel { universe: &u, sched: &s };
        let x0 = vec![3.1, 2.2];
        let spec = EditSpec::default_null(9);
        let a = edit(&model, &x0, &spec, &s).unwrap();
        let b = edit(&model, &x0, &spec, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_of_one_equals_single_edit() {
        let (u, s) = setup();
        let model = AnalyticEpsModel { universe: &u, sched: &s };
        let x0 = vec![4.7, 0.1];
        let spec = EditSpec::default_null(13);
        let single = edit(&model, &x0, &spec, &s).unwrap();
        let batch = edit_batch(&model, &[x0.clone()], &[spec], &u, &s).unwrap();
        assert_eq!(batch.records.len(), 1);
        assert!(batch.failures.is_empty());
        assert_eq!(batch.records[0].edited, single);
        assert_eq!(batch.records[0].class_before, u.classify(&x0).unwrap());
    }

    #[test]
    fn batch_shape_contract_and_determinism() {
        let (u, s) = setup();
        let model = AnalyticEpsModel { universe: &u, sched: &s };
        let mut rng = stream(8, 2);
        let mut points = Vec::new();
        let mut specs = Vec::new();
        // 20 points x 10 non-target edit conditions.
        for i in 0..20 {
            let x0 = u.sample(i % u.num_concepts(), &mut rng).unwrap();
            for c in 0..10 {
                points.push(x0.clone());
                let mut spec = EditSpec::default_null(mix3(21, i as u64, c as u64));
                spec.edit_condition =
                    if c == 0 { Condition::Null } else { Condition::Concept(c - 1) };
                specs.push(spec);
            }
        }
        let a = edit_batch(&model, &points, &specs, &u, &s).unwrap();
        assert_eq!(a.records.len(), 200);
        assert!(a.records.iter().all(|r| r.edited.iter().all(|v| v.is_finite())));
        let b = edit_batch(&model, &points, &specs, &u, &s).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.edited, rb.edited);
        }
    }

    #[test]
    fn batch_aggregates_failures() {
        let (u, s) = setup();
        let model = AnalyticEpsModel { universe: &u, sched: &s };
        let good = vec![1.0, 1.0];
        let bad = vec![f64::NAN, 0.0];
        let specs = vec![EditSpec::default_null(1), EditSpec::default_null(2)];
        let batch = edit_batch(&model, &[good, bad], &specs, &u, &s).unwrap();
        assert_eq!(batch.records.len(), 1);
        assert_eq!(batch.failures.len(), 1);
        assert_eq!(batch.failures[0].0, 1);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (u, s) = setup();
        let model = AnalyticEpsModel { universe: &u, sched: &s };
        assert!(edit_batch(&model, &[], &[], &u, &s).is_err());
    }

    #[test]
    fn bad_strength_is_rejected() {
        let mut spec = EditSpec::default_null(1);
        spec.strength = 0.0;
        assert!(spec.validate().is_err());
        spec.strength = 1.5;
        assert!(spec.validate().is_err());
    }
}
