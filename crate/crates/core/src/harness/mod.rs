//! Orchestration: builds scenarios from a [`RunConfig`], runs the engine over seeds and
//! sweeps, and writes result files.

pub mod config;
pub mod dump;
pub mod engine;
pub mod results;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::{
    FeaturePrecision, GdInit, OptimizerKind, RunConfig, SolverKind, SourceKind, TrainProjector, CONFIG_VERSION,
};
pub use engine::{
    replay_audit, run_gd_oracle, run_scenario, AuditReport, Engine, MetricsRecord, PhaseTiming, RunOutcome,
};
pub use results::{emit_results, report, ResultRow};

use crate::error::Result;
use crate::prototypes::ClassId;
use crate::scenario::StagedScenario;
use crate::sim::generate_scenario;
use crate::trainer::train_toy_scenario;

/// Materializes the feature streams described by `config` for one run seed.
pub fn build_scenario(config: &RunConfig, run_seed: u64) -> Result<StagedScenario> {
    config.validate()?;
    let mut scenario = match config.source {
        config::SourceKind::Synthetic => generate_scenario(&config.synthetic_spec(run_seed)?)?.scenario,
        config::SourceKind::Toy => train_toy_scenario(&config.toy_spec(run_seed)?)?.scenario,
        config::SourceKind::Dump => dump::read_scenario(&config.dump_paths, config.split)?,
    };
    if let (Some(fraction), None) = (config.test_subset_fraction, &scenario.selected_classes) {
        scenario.selected_classes = Some(select_classes(&scenario, fraction, config.scenario_seed_for(run_seed)));
    }
    if config.feature_precision == FeaturePrecision::F32 {
        let selected = scenario.selected_classes.take();
        let truth = scenario.ground_truth.take();
        scenario = scenario.quantized_f32();
        scenario.selected_classes = selected;
        scenario.ground_truth = truth;
    }
    Ok(scenario)
}

fn select_classes(scenario: &StagedScenario, fraction: f64, seed: u64) -> BTreeSet<ClassId> {
    let mut all: Vec<ClassId> = scenario.all_task_classes().iter().flatten().copied().collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5e1e_c7ed));
    let keep = ((all.len() as f64 * fraction).round() as usize).max(1);
    all[..keep].iter().copied().collect()
}

/// Runs the configured solver for one seed.
pub fn run_once(config: &RunConfig, seed: u64) -> Result<RunOutcome> {
    let scenario = build_scenario(config, seed)?;
    run_scenario(&scenario, config, seed)
}

/// Runs every seed of `config` in parallel; records come back in seed order.
pub fn run_seeds(config: &RunConfig) -> Result<Vec<MetricsRecord>> {
    config
        .seeds
        .par_iter()
        .map(|&seed| run_once(config, seed).map(|o| o.metrics))
        .collect()
}

/// Runs `config` once per value of `key` (and per seed), all in parallel.
pub fn run_sweep(config: &RunConfig, key: &str, values: &[String]) -> Result<Vec<MetricsRecord>> {
    let variants: Vec<(String, RunConfig)> = values
        .iter()
        .map(|v| config.with_override(key, v).map(|c| (v.clone(), c)))
        .collect::<Result<_>>()?;
    let jobs: Vec<(&String, &RunConfig, u64)> = variants
        .iter()
        .flat_map(|(v, c)| c.seeds.iter().map(move |&s| (v, c, s)))
        .collect();
    jobs.par_iter()
        .map(|&(value, cfg, seed)| {
            let mut m = run_once(cfg, seed)?.metrics;
            m.sweep_key = key.to_string();
            m.sweep_value = value.clone();
            Ok(m)
        })
        .collect()
}

/// Offline GD oracle and the configured online solver on the same scenarios, per seed.
pub fn run_oracle_comparison(config: &RunConfig) -> Result<Vec<MetricsRecord>> {
    let per_seed: Vec<Vec<MetricsRecord>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let scenario = build_scenario(config, seed)?;
            let oracle = run_gd_oracle(&scenario, config, seed)?.metrics;
            let online = run_scenario(&scenario, config, seed)?.metrics;
            Ok(vec![online, oracle])
        })
        .collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}
