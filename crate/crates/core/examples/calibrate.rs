//! Scratch calibration run: prints the quantities the acceptance thresholds
//! are frozen against. Not part of the test suite.

use std::time::Instant;

use erasure_core::*;

fn classification_rate(
    model: &DenoiserModel<'_>,
    universe: &ConceptUniverse,
    sched: &NoiseSchedule,
    concept: usize,
    omega: f64,
    n: usize,
    seed: u64,
) -> f64 {
    let mut hits = 0;
    for i in 0..n {
        let traj = ddim_sample(
            model,
            Condition::Concept(concept),
            omega,
            sched,
            rng::mix3(seed, concept as u64, i as u64),
        )
        .unwrap();
        if universe.classify(traj.final_z()).unwrap() == concept {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

fn oracle_mse(
    params: &DenoiserParams,
    universe: &ConceptUniverse,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> f64 {
    let mut rng = rng::stream(seed, 0xca1);
    let mut total = 0.0;
    for _ in 0..n {
        use rand::Rng;
        let k = rng.random_range(0..universe.num_concepts());
        let x0 = universe.sample(k, &mut rng).unwrap();
        let t = rng.random_range(1..=sched.num_steps());
        let eps = rng::standard_normal(&mut rng, 2);
        let z = forward_diffuse(&x0, t, &eps, sched).unwrap();
        let cond = if rng.random::<f64>() < 0.2 { Condition::Null } else { Condition::Concept(k) };
        let pred = params.predict(None, &z, t, cond).unwrap();
        let oracle = universe.analytic_eps(&z, t, cond, sched).unwrap();
        total += pred.iter().zip(&oracle).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 2.0;
    }
    total / n as f64
}

fn edit_retention(
    model: &DenoiserModel<'_>,
    universe: &ConceptUniverse,
    sched: &NoiseSchedule,
    concept: usize,
    n: usize,
    seed: u64,
) -> f64 {
    let mut src_rng = rng::stream(seed, 0xe0 + concept as u64);
    let mut kept = 0;
    for i in 0..n {
        let x0 = universe.sample(concept, &mut src_rng).unwrap();
        let spec = EditSpec::default_null(rng::mix3(seed, concept as u64, i as u64));
        let edited = edit(model, &x0, &spec, sched).unwrap();
        if universe.classify(&edited).unwrap() == concept {
            kept += 1;
        }
    }
    kept as f64 / n as f64
}

fn main() {
    let universe = ConceptUniverse::canonical();
    let sched = NoiseSchedule::default_linear(30);
    let target = 0usize;
    let priors: Vec<usize> = (1..10).collect();

    let t0 = Instant::now();
    let cfg = BaseTrainConfig::for_universe(&universe);
    let (base, log) = train_base(&universe, &sched, &cfg).unwrap();
    println!(
        "base: trained in {:.1}s, val loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        log.initial_val_loss,
        log.final_val_loss
    );

    let base_model = DenoiserModel { params: &base, adapter: None };
    let t0 = Instant::now();
    let mut base_rates = Vec::new();
    for k in 0..10 {
        base_rates.push(classification_rate(&base_model, &universe, &sched, k, 3.0, 200, 1000));
    }
    println!(
        "base generation class rates (omega=3, 200/concept, {:.1}s): {:?}",
        t0.elapsed().as_secs_f64(),
        base_rates.iter().map(|r| (r * 100.0).round()).collect::<Vec<_>>()
    );
    println!("base mean rate: {:.4}", base_rates.iter().sum::<f64>() / 10.0);

    let t0 = Instant::now();
    let mse = oracle_mse(&base, &universe, &sched, 2000, 77);
    println!("base oracle MSE (per-dim, 2000 pts, {:.1}s): {:.5}", t0.elapsed().as_secs_f64(), mse);

    // Editing calibration on the base model.
    let t0 = Instant::now();
    let base_edit_target = edit_retention(&base_model, &universe, &sched, target, 200, 2000);
    let base_edit_priors: Vec<f64> = priors
        .iter()
        .map(|&p| edit_retention(&base_model, &universe, &sched, p, 50, 2000))
        .collect();
    let base_edit_prior_mean = base_edit_priors.iter().sum::<f64>() / base_edit_priors.len() as f64;
    println!(
        "base edit retention ({:.1}s): target {:.3}, priors mean {:.3} {:?}",
        t0.elapsed().as_secs_f64(),
        base_edit_target,
        base_edit_prior_mean,
        base_edit_priors.iter().map(|r| (r * 100.0).round()).collect::<Vec<_>>()
    );

    // Four ablation rows.
    let rows = ErasureVariant::ablation_rows();
    let mut adapters = Vec::new();
    for (i, variant) in rows.iter().enumerate() {
        let mut cfg = ErasureRunConfig::canonical(target, 10);
        cfg.variant = *variant;
        cfg.seed = 7;
        let t0 = Instant::now();
        let (adapter, log) = erase_concept(&base, &cfg, &universe, &sched).unwrap();
        println!(
            "row {} ({}): trained in {:.1}s, final losses cond {:.3} uncond {:.3} cons {:.3}, |delta| {:.3}",
            i + 1,
            variant.label(),
            t0.elapsed().as_secs_f64(),
            log.rows.last().unwrap().loss_cond,
            log.rows.last().unwrap().loss_uncond,
            log.rows.last().unwrap().loss_consistency,
            adapter.delta_norm()
        );
        adapters.push(adapter);
    }

    for (i, adapter) in adapters.iter().enumerate() {
        let model = DenoiserModel { params: &base, adapter: Some(adapter) };
        let t0 = Instant::now();
        let target_rate = classification_rate(&model, &universe, &sched, target, 3.0, 200, 1000);
        let prior_rates: Vec<f64> = priors
            .iter()
            .map(|&p| classification_rate(&model, &universe, &sched, p, 3.0, 100, 1000))
            .collect();
        let retention: Vec<f64> = prior_rates
            .iter()
            .zip(priors.iter().map(|&p| base_rates[p]))
            .map(|(r, b)| r / b)
            .collect();
        let min_retention = retention.iter().cloned().fold(f64::INFINITY, f64::min);
        let edit_target = edit_retention(&model, &universe, &sched, target, 200, 2000);
        let edit_priors: Vec<f64> = priors
            .iter()
            .map(|&p| edit_retention(&model, &universe, &sched, p, 50, 2000))
            .collect();
        let edit_prior_mean = edit_priors.iter().sum::<f64>() / edit_priors.len() as f64;
        println!(
            "row {} eval ({:.1}s): gen target rate {:.3}, prior retention min {:.3} mean {:.3}; edit target retention {:.3}, edit prior mean {:.3} (ratio to base {:.3})",
            i + 1,
            t0.elapsed().as_secs_f64(),
            target_rate,
            min_retention,
            retention.iter().sum::<f64>() / retention.len() as f64,
            edit_target,
            edit_prior_mean,
            edit_prior_mean / base_edit_prior_mean
        );
    }

    // Ablation alignment orderings (the a_e / a_p quantities).
    let eval_cfg = EvalProtocolConfig { samples_per_concept: 150, seed: 5, ..Default::default() };
    for (i, adapter) in adapters.iter().enumerate() {
        let model = DenoiserModel { params: &base, adapter: Some(adapter) };
        let gen = erasure_report(
            &base, model, &universe, target, &priors, Protocol::Generation, &eval_cfg, &sched,
        )
        .unwrap();
        let ed = erasure_report(
            &base, model, &universe, target, &priors, Protocol::Editing, &eval_cfg, &sched,
        )
        .unwrap();
        println!(
            "row {}: gen a_e {:.4} a_p {:.4} d_e {:.3} d_p {:.3}; edit a_e {:.4} a_p {:.4}",
            i + 1,
            gen.erased.alignment,
            gen.prior.alignment,
            gen.erased.displacement,
            gen.prior.displacement,
            ed.erased.alignment,
            ed.prior.alignment
        );
    }
}
