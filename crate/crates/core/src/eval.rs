//! Evaluation: oracle alignment (exact mixture posterior standing in for a
//! learned similarity score), output displacement (Euclidean distance
//! standing in for a perceptual distance), erasure reports for the
//! generation and editing protocols, and the four-row ablation runner.
//!
//! Matched-seed discipline: every base/erased pair in a report is produced
//! from the identical noise draw and condition, so displacement measures the
//! erasure intervention and nothing else.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserParams, DenoiserModel, LoraAdapter};
use crate::edit::{edit, EditSpec, InversionMode};
use crate::error::{Error, Result};
use crate::linalg::euclidean;
use crate::rng::{mix, mix3, stream};
use crate::sampler::ddim_sample;
use crate::schedule::NoiseSchedule;
use crate::trainer::{erase_concept, ErasureLog, ErasureRunConfig, ErasureVariant};
use crate::types::Condition;
use crate::universe::ConceptUniverse;

pub const MIN_SAMPLES_PER_GROUP: usize = 100;

/// Alignment between a point and a concept: the exact posterior probability
/// of the concept under the equal-prior mixture of all concepts.
pub fn concept_alignment(x: &[f64], concept: usize, universe: &ConceptUniverse) -> Result<f64> {
    universe.check_condition(Condition::Concept(concept))?;
    Ok(universe.posterior(x)?[concept])
}

/// Drift between matched outputs of the erased and base models.
pub fn displacement(x_from_erased: &[f64], x_from_base: &[f64]) -> f64 {
    euclidean(x_from_erased, x_from_base)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Generation,
    Editing,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::Generation => write!(f, "generation"),
            Protocol::Editing => write!(f, "editing"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocolConfig {
    pub samples_per_concept: usize,
    /// Guidance scale for conditional generation.
    pub omega: f64,
    pub edit_strength: f64,
    pub edit_cfg_scale: f64,
    pub seed: u64,
}

impl Default for EvalProtocolConfig {
    fn default() -> Self {
        EvalProtocolConfig {
            samples_per_concept: 500,
            omega: 3.0,
            edit_strength: 0.5,
            edit_cfg_scale: 7.5,
            seed: 0,
        }
    }
}

/// Pooled metrics for one concept group (the erased concept, or the priors).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub alignment: f64,
    pub displacement: f64,
    pub sample_count: usize,
}

/// Per-concept breakdown, with the base model's numbers alongside so
/// retention ratios can be read off directly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptEval {
    pub alignment: f64,
    pub class_rate: f64,
    pub base_alignment: f64,
    pub base_class_rate: f64,
    pub displacement: f64,
    pub sample_count: usize,
}

/// One matched base/erased output pair.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub concept: usize,
    pub seed: u64,
    pub base_point: Vec<f64>,
    pub erased_point: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub target: usize,
    pub priors: Vec<usize>,
    pub erased: GroupMetrics,
    pub prior: GroupMetrics,
    /// prior alignment minus erased alignment; higher is a better trade-off.
    pub alignment_gap: f64,
    /// erased displacement minus prior displacement; higher is better.
    pub displacement_gap: f64,
    pub per_concept: BTreeMap<usize, ConceptEval>,
    pub config: EvalProtocolConfig,
    #[serde(skip)]
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One flat CSV row per (protocol, group).
    pub fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["protocol", "group", "alignment", "displacement", "samples"])?;
        for (group, m) in [("erased", &self.erased), ("prior", &self.prior)] {
            w.write_record([
                self.protocol.to_string(),
                group.to_string(),
                m.alignment.to_string(),
                m.displacement.to_string(),
                m.sample_count.to_string(),
            ])?;
        }
        w.flush().map_err(Error::Io)?;
        Ok(())
    }
}

struct PairOutcome {
    concept: usize,
    seed: u64,
    base_point: Vec<f64>,
    erased_point: Vec<f64>,
    alignment: f64,
    base_alignment: f64,
    classified: bool,
    base_classified: bool,
    displacement: f64,
}

fn summarize(
    protocol: Protocol,
    target: usize,
    priors: &[usize],
    outcomes: Vec<PairOutcome>,
    config: EvalProtocolConfig,
) -> Result<EvalReport> {
    let mut per_concept: BTreeMap<usize, ConceptEval> = BTreeMap::new();
    for o in &outcomes {
        let e = per_concept.entry(o.concept).or_default();
        e.alignment += o.alignment;
        e.base_alignment += o.base_alignment;
        e.class_rate += o.classified as usize as f64;
        e.base_class_rate += o.base_classified as usize as f64;
        e.displacement += o.displacement;
        e.sample_count += 1;
    }
    for e in per_concept.values_mut() {
        let n = e.sample_count as f64;
        e.alignment /= n;
        e.base_alignment /= n;
        e.class_rate /= n;
        e.base_class_rate /= n;
        e.displacement /= n;
    }

    let group = |ids: &[usize]| -> Result<GroupMetrics> {
        let rows: Vec<&PairOutcome> =
            outcomes.iter().filter(|o| ids.contains(&o.concept)).collect();
        if rows.len() < MIN_SAMPLES_PER_GROUP {
            return Err(Error::InsufficientSamples {
                needed: MIN_SAMPLES_PER_GROUP,
                got: rows.len(),
            });
        }
        let n = rows.len() as f64;
        Ok(GroupMetrics {
            alignment: rows.iter().map(|o| o.alignment).sum::<f64>() / n,
            displacement: rows.iter().map(|o| o.displacement).sum::<f64>() / n,
            sample_count: rows.len(),
        })
    };
    let erased = group(&[target])?;
    let prior = group(priors)?;

    let samples = outcomes
        .into_iter()
        .map(|o| SampleRecord {
            concept: o.concept,
            seed: o.seed,
            base_point: o.base_point,
            erased_point: o.erased_point,
        })
        .collect();

    Ok(EvalReport {
        protocol,
        target,
        priors: priors.to_vec(),
        erased,
        prior,
        alignment_gap: prior.alignment - erased.alignment,
        displacement_gap: erased.displacement - prior.displacement,
        per_concept,
        config,
        samples,
    })
}

/// Compare an erased model against its base under one protocol.
///
/// Generation: sample each concept from both models with matched seeds and
/// measure alignment with the conditioning concept plus output displacement.
/// Editing: draw source points per concept, apply the same null-condition
/// noise-and-denoise edit under both models, measure the same metrics on the
/// edited outputs.
pub fn erasure_report(
    base: &DenoiserParams,
    erased: DenoiserModel<'_>,
    universe: &ConceptUniverse,
    target: usize,
    priors: &[usize],
    protocol: Protocol,
    config: &EvalProtocolConfig,
    sched: &NoiseSchedule,
) -> Result<EvalReport> {
    universe.check_condition(Condition::Concept(target))?;
    if priors.is_empty() {
        return Err(Error::EmptyPriorSet);
    }
    let base_model = DenoiserModel { params: base, adapter: None };
    let mut outcomes = Vec::new();
    let concepts: Vec<usize> = std::iter::once(target).chain(priors.iter().copied()).collect();
    for &concept in &concepts {
        let mut source_rng = stream(mix(config.seed, 0x50c), concept as u64);
        for i in 0..config.samples_per_concept {
            let pair_seed = mix3(config.seed, concept as u64, i as u64);
            let (base_point, erased_point) = match protocol {
                Protocol::Generation => {
                    let cond = Condition::Concept(concept);
                    let b = ddim_sample(&base_model, cond, config.omega, sched, pair_seed)?;
                    let e = ddim_sample(&erased, cond, config.omega, sched, pair_seed)?;
                    (b.final_z().to_vec(), e.final_z().to_vec())
                }
                Protocol::Editing => {
                    let x0 = universe.sample(concept, &mut source_rng)?;
                    let spec = EditSpec {
                        strength: config.edit_strength,
                        edit_condition: Condition::Null,
                        cfg_scale: config.edit_cfg_scale,
                        inversion_mode: InversionMode::StochasticNoise,
                        seed: pair_seed,
                    };
                    let b = edit(&base_model, &x0, &spec, sched)?;
                    let e = edit(&erased, &x0, &spec, sched)?;
                    (b, e)
                }
            };
            let alignment = concept_alignment(&erased_point, concept, universe)?;
            let base_alignment = concept_alignment(&base_point, concept, universe)?;
            outcomes.push(PairOutcome {
                concept,
                seed: pair_seed,
                displacement: displacement(&erased_point, &base_point),
                classified: universe.classify(&erased_point)? == concept,
                base_classified: universe.classify(&base_point)? == concept,
                base_point,
                erased_point,
                alignment,
                base_alignment,
            });
        }
    }
    summarize(protocol, target, priors, outcomes, *config)
}

/// Directional orderings the ablation must reproduce.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationVerdict {
    /// Editing alignment with the erased concept strictly drops from the
    /// baseline row to the unconditional row to the full row.
    pub editing_erasure_strictly_improves: bool,
    /// Generation prior alignment of the full row exceeds the row without
    /// the prior correction.
    pub prior_alignment_recovers: bool,
    pub pass: bool,
    pub editing_erased_alignment: [f64; 4],
    pub generation_prior_alignment: [f64; 4],
}

impl AblationVerdict {
    /// First line is PASS or FAIL; the rest records the compared numbers.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(if self.pass { "PASS\n" } else { "FAIL\n" });
        s.push_str(&format!(
            "editing erased alignment by row: {:.6} {:.6} {:.6} {:.6}\n",
            self.editing_erased_alignment[0],
            self.editing_erased_alignment[1],
            self.editing_erased_alignment[2],
            self.editing_erased_alignment[3],
        ));
        s.push_str(&format!(
            "editing chain row1 > row2 > row4: {}\n",
            if self.editing_erasure_strictly_improves { "ok" } else { "violated" }
        ));
        s.push_str(&format!(
            "generation prior alignment by row: {:.6} {:.6} {:.6} {:.6}\n",
            self.generation_prior_alignment[0],
            self.generation_prior_alignment[1],
            self.generation_prior_alignment[2],
            self.generation_prior_alignment[3],
        ));
        s.push_str(&format!(
            "prior recovery row4 > row3: {}\n",
            if self.prior_alignment_recovers { "ok" } else { "violated" }
        ));
        s
    }
}

#[derive(Debug)]
pub struct AblationOutcome {
    pub adapters: [LoraAdapter; 4],
    pub train_logs: [ErasureLog; 4],
    pub generation: [EvalReport; 4],
    pub editing: [EvalReport; 4],
    pub verdict: AblationVerdict,
}

fn config_without_variant(config: &ErasureRunConfig) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(config)?;
    v.as_object_mut()
        .expect("run config serializes to an object")
        .remove("variant");
    Ok(v)
}

/// Train the four ablation rows with a shared seed, evaluate both protocols
/// for each, and check the directional orderings.
pub fn ablation_run(
    base: &DenoiserParams,
    universe: &ConceptUniverse,
    target: usize,
    configs: &[ErasureRunConfig; 4],
    eval_config: &EvalProtocolConfig,
    sched: &NoiseSchedule,
) -> Result<AblationOutcome> {
    let rows = ErasureVariant::ablation_rows();
    let reference = config_without_variant(&configs[0])?;
    for (i, cfg) in configs.iter().enumerate() {
        if cfg.target != target {
            return Err(Error::InvalidConfig(format!("row {} erases a different target", i + 1)));
        }
        if cfg.variant != rows[i] {
            return Err(Error::InvalidConfig(format!(
                "row {} must use the `{}` variant",
                i + 1,
                rows[i].label()
            )));
        }
        if config_without_variant(cfg)? != reference {
            return Err(Error::InvalidConfig(format!(
                "row {} differs from row 1 in more than the variant flags",
                i + 1
            )));
        }
    }

    let priors = configs[0].effective_priors(universe);
    let mut adapters = Vec::with_capacity(4);
    let mut train_logs = Vec::with_capacity(4);
    let mut generation = Vec::with_capacity(4);
    let mut editing = Vec::with_capacity(4);
    for cfg in configs {
        let (adapter, log) = erase_concept(base, cfg, universe, sched)?;
        let model = DenoiserModel { params: base, adapter: Some(&adapter) };
        generation.push(erasure_report(
            base, model, universe, target, &priors, Protocol::Generation, eval_config, sched,
        )?);
        editing.push(erasure_report(
            base, model, universe, target, &priors, Protocol::Editing, eval_config, sched,
        )?);
        adapters.push(adapter);
        train_logs.push(log);
    }

    let editing_erased: [f64; 4] =
        [0, 1, 2, 3].map(|i| editing[i].erased.alignment);
    let generation_prior: [f64; 4] =
        [0, 1, 2, 3].map(|i| generation[i].prior.alignment);
    let editing_chain =
        editing_erased[0] > editing_erased[1] && editing_erased[1] > editing_erased[3];
    let prior_recovery = generation_prior[3] > generation_prior[2];

    let verdict = AblationVerdict {
        editing_erasure_strictly_improves: editing_chain,
        prior_alignment_recovers: prior_recovery,
        pass: editing_chain && prior_recovery,
        editing_erased_alignment: editing_erased,
        generation_prior_alignment: generation_prior,
    };

    let into4 = |v: Vec<EvalReport>| -> [EvalReport; 4] {
        v.try_into().ok().expect("exactly four reports were collected")
    };
    Ok(AblationOutcome {
        adapters: adapters.try_into().ok().expect("exactly four adapters were trained"),
        train_logs: train_logs.try_into().ok().expect("exactly four logs were collected"),
        generation: into4(generation),
        editing: into4(editing),
        verdict,
    })
}
