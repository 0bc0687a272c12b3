//! From-scratch base training: stochastic gradient descent on the
//! noise-prediction squared error, with condition dropout so the null token
//! learns the unconditional (all-concept) distribution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{mix, standard_normal, stream};
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::types::Condition;
use crate::universe::ConceptUniverse;

use super::{init_denoiser, BaseGrads, DenoiserArch, DenoiserParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseTrainConfig {
    pub arch: DenoiserArch,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub cond_dropout_p: f64,
    pub seed: u64,
}

impl BaseTrainConfig {
    /// Default training regime for a universe: 20k steps of lr 1e-3 SGD,
    /// batch 32, 10% condition dropout.
    pub fn for_universe(universe: &ConceptUniverse) -> Self {
        BaseTrainConfig {
            arch: DenoiserArch::default_for(universe.dim(), universe.num_concepts()),
            steps: 20_000,
            lr: 1e-3,
            batch_size: 32,
            cond_dropout_p: 0.1,
            seed: 0,
        }
    }

    fn validate(&self, universe: &ConceptUniverse) -> Result<()> {
        self.arch.validate()?;
        if self.arch.dim != universe.dim() {
            return Err(Error::InvalidConfig(format!(
                "arch dim {} does not match universe dim {}",
                self.arch.dim,
                universe.dim()
            )));
        }
        if self.arch.num_concepts != universe.num_concepts() {
            return Err(Error::InvalidConfig(format!(
                "arch has {} concepts, universe has {}",
                self.arch.num_concepts,
                universe.num_concepts()
            )));
        }
        if !(self.cond_dropout_p >= 0.0 && self.cond_dropout_p < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "cond_dropout_p must be in [0, 1), got {}",
                self.cond_dropout_p
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct BaseTrainLog {
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    /// (step, mean batch loss) every 200 steps.
    pub history: Vec<(usize, f64)>,
}

struct TrainSample {
    z: Vec<f64>,
    t: usize,
    cond: Condition,
    eps: Vec<f64>,
}

fn draw_sample(
    universe: &ConceptUniverse,
    sched: &NoiseSchedule,
    dropout: f64,
    rng: &mut impl Rng,
) -> Result<TrainSample> {
    let k = rng.random_range(0..universe.num_concepts());
    let x0 = universe.sample(k, rng)?;
    let t = rng.random_range(1..=sched.num_steps());
    let eps = standard_normal(rng, universe.dim());
    let z = forward_diffuse(&x0, t, &eps, sched)?;
    let cond = if rng.random::<f64>() < dropout { Condition::Null } else { Condition::Concept(k) };
    Ok(TrainSample { z, t, cond, eps })
}

fn val_loss(params: &DenoiserParams, samples: &[TrainSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let pred = params.predict(None, &s.z, s.t, s.cond)?;
        total += pred.iter().zip(&s.eps).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

/// Train a denoiser from scratch on the universe. Deterministic given the
/// config seed; aborts with a diagnostic if the loss stops being finite.
pub fn train_base(
    universe: &ConceptUniverse,
    sched: &NoiseSchedule,
    cfg: &BaseTrainConfig,
) -> Result<(DenoiserParams, BaseTrainLog)> {
    cfg.validate(universe)?;
    let mut params = init_denoiser(cfg.arch, mix(cfg.seed, 0xbace))?;

    let mut val_rng = stream(cfg.seed, 0x7a1);
    let val_set: Vec<TrainSample> = (0..256)
        .map(|_| draw_sample(universe, sched, cfg.cond_dropout_p, &mut val_rng))
        .collect::<Result<_>>()?;

    let mut log = BaseTrainLog {
        initial_val_loss: val_loss(&params, &val_set)?,
        ..Default::default()
    };

    let mut data_rng = stream(cfg.seed, 0xda7a);
    for step in 0..cfg.steps {
        let mut grads = BaseGrads::zeros(&cfg.arch);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let s = draw_sample(universe, sched, cfg.cond_dropout_p, &mut data_rng)?;
            let (pred, cache) = params.forward_cached(None, &s.z, s.t, s.cond)?;
            let d_out: Vec<f64> =
                pred.iter().zip(&s.eps).map(|(a, b)| 2.0 * (a - b)).collect();
            batch_loss += pred.iter().zip(&s.eps).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            params.accumulate_base_grads(&cache, &d_out, &mut grads);
        }
        batch_loss /= cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: batch_loss });
        }
        grads.scale(1.0 / cfg.batch_size as f64);
        params.sgd_step(&grads, cfg.lr);
        if step % 200 == 0 {
            log.history.push((step, batch_loss));
        }
    }

    log.final_val_loss = val_loss(&params, &val_set)?;
    Ok((params, log))
}
