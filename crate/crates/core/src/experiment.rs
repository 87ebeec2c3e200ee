//! Experiment orchestration: a resolved configuration in, a run record out.
//!
//! One experiment is a set of replicates. Each replicate seed derives its
//! own independent sub-seeds (model init, stream order, replay draws,
//! simulator draws, shuffles) so replicates never share random state, yet
//! the whole experiment is a pure function of `(config, seeds)`. Wall-clock
//! timings are collected separately from the record to keep the record
//! byte-deterministic.

use std::time::Instant;

use crate::config::{ExperimentConfig, RunMode, StrategyChoice};
use crate::domains::domain_preset;
use crate::error::{Error, Result};
use crate::labelspace::builtin_map;
use crate::model::Model;
use crate::record::{RunRecord, SeedOutcome, TimingSidecar, RECORD_VERSION};
use crate::rng::derive_seed;
use crate::strategies::{
    offline_train, real_train_sources, sim_pretrain_source, Er, Ewc, Lwf, Mas, Nt, SimWrap,
    Strategy, StrategyLearner,
};
use crate::stream::{evaluate_on, materialize_test_sets, run_stream};

/// A finished experiment: the deterministic record plus its timings.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub record: RunRecord,
    pub timing: TimingSidecar,
}

/// The strategy instance for one replicate, wrapped for mixing when asked.
pub fn build_strategy(
    cfg: &ExperimentConfig,
    replay_seed: u64,
    sim_seed: u64,
) -> Result<Box<dyn Strategy>> {
    let base: Box<dyn Strategy> = match &cfg.strategy {
        StrategyChoice::Nt => Box::new(Nt),
        StrategyChoice::Ewc { lambda, window } => Box::new(Ewc::new(*lambda, *window)?),
        StrategyChoice::Mas { lambda, window } => Box::new(Mas::new(*lambda, *window)?),
        StrategyChoice::Lwf {
            lambda,
            temperature,
        } => Box::new(Lwf::new(*lambda, *temperature)?),
        StrategyChoice::Er { capacity } => Box::new(Er::new(*capacity, replay_seed)),
    };
    match &cfg.sim_mix {
        None => Ok(base),
        Some(mix) => {
            let sim = domain_preset(&mix.domain)
                .ok_or_else(|| Error::config(format!("unknown simulator {:?}", mix.domain)))?;
            let map = builtin_map(&mix.domain).ok_or_else(|| {
                Error::config(format!(
                    "simulator {:?} has no built-in label map",
                    mix.domain
                ))
            })?;
            Ok(Box::new(SimWrap::new(base, sim, map, mix.ratio, sim_seed)?))
        }
    }
}

fn run_stream_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let mut model = Model::init(cfg.model_config(derive_seed(seed, "model-init")))?;

    let mut pretrain_epoch_losses = Vec::new();
    if let Some(p) = &cfg.sim_pretrain {
        let sim = domain_preset(&p.domain)
            .ok_or_else(|| Error::config(format!("unknown simulator {:?}", p.domain)))?;
        let source = sim_pretrain_source(&sim, p.effective_total(&cfg.stream))?;
        pretrain_epoch_losses = offline_train(
            &mut model,
            &[source],
            p.epochs,
            cfg.stream.batch_size,
            cfg.lr,
            derive_seed(seed, "pretrain-shuffle"),
        )?;
    }

    let strategy = build_strategy(
        cfg,
        derive_seed(seed, "replay"),
        derive_seed(seed, "sim-mix"),
    )?;
    let mut learner = StrategyLearner::new(model, strategy, cfg.lr)?;
    let result = run_stream(&cfg.stream, derive_seed(seed, "stream-order"), &mut learner)?;

    let mean_final_miou = result.final_mean_miou();
    Ok(SeedOutcome {
        seed,
        pretrain_epoch_losses,
        offline_epoch_losses: Vec::new(),
        evals: result.evals,
        transfer: result.transfer,
        final_per_domain_miou: result.final_per_domain_miou,
        mean_final_miou,
        steps_run: result.steps_run,
        updates_applied: result.updates_applied,
    })
}

fn run_offline_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let mut model = Model::init(cfg.model_config(derive_seed(seed, "model-init")))?;
    let sources = real_train_sources(
        &cfg.stream.domains,
        cfg.stream.train_per_domain,
        cfg.stream.test_per_domain,
    );
    let offline_epoch_losses = offline_train(
        &mut model,
        &sources,
        cfg.offline_epochs,
        cfg.stream.batch_size,
        cfg.lr,
        derive_seed(seed, "offline-shuffle"),
    )?;
    let test_sets = materialize_test_sets(&cfg.stream)?;
    let eval = evaluate_on(&model, &test_sets)?;
    let final_per_domain_miou = eval.per_domain_miou.clone();
    let mean_final_miou =
        final_per_domain_miou.iter().sum::<f64>() / final_per_domain_miou.len() as f64;
    Ok(SeedOutcome {
        seed,
        pretrain_epoch_losses: Vec::new(),
        offline_epoch_losses,
        evals: vec![eval],
        transfer: None,
        final_per_domain_miou,
        mean_final_miou,
        steps_run: 0,
        updates_applied: 0,
    })
}

/// Run every replicate and aggregate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let started = Instant::now();
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    let mut per_seed_seconds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let seed_started = Instant::now();
        let outcome = match cfg.mode {
            RunMode::Stream => run_stream_seed(cfg, seed)?,
            RunMode::Offline => run_offline_seed(cfg, seed)?,
        };
        per_seed_seconds.push(seed_started.elapsed().as_secs_f64());
        per_seed.push(outcome);
    }

    let num_domains = cfg.stream.domains.len();
    let mut mean_final_per_domain = vec![0.0; num_domains];
    for outcome in &per_seed {
        for (acc, v) in mean_final_per_domain
            .iter_mut()
            .zip(&outcome.final_per_domain_miou)
        {
            *acc += v;
        }
    }
    for v in &mut mean_final_per_domain {
        *v /= per_seed.len() as f64;
    }
    // Summary convention: the mean column is the arithmetic mean of the
    // per-domain columns.
    let mean_final_miou = mean_final_per_domain.iter().sum::<f64>() / num_domains as f64;
    let total_updates = per_seed.iter().map(|o| o.updates_applied).sum();

    let record = RunRecord {
        version: RECORD_VERSION,
        name: cfg.name.clone(),
        config: cfg.echo(),
        domains: cfg.stream.domains.iter().map(|d| d.name.clone()).collect(),
        baseline_budget: cfg.baseline_budget()?,
        seeds: cfg.seeds.clone(),
        per_seed,
        mean_final_per_domain,
        mean_final_miou,
        total_updates,
    };
    let timing = TimingSidecar {
        total_seconds: started.elapsed().as_secs_f64(),
        per_seed_seconds,
    };
    Ok(ExperimentOutcome { record, timing })
}
