//! Streaming test-time loop: queue updates, projector solves, prototype evolution and
//! nearest-class-mean prediction, one task at a time.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{GdInit, RunConfig, SolverKind, TrainProjector};
use crate::error::{Error, Result};
use crate::projector::{
    evolve_prototypes, gradient_descent_to_convergence, solve_analytic_with, GdOptimizer, GdOptions, GradientDescent,
    NormalSystem, Projector,
};
use crate::prototypes::{compute_prototypes, ncm_predict, ClassId, PrototypeTable};
use crate::queue::{init_with_pseudo_features, QueuePair};
use crate::scenario::{SplitKind, StagedScenario};
use crate::sim::{true_drift_similarity, DriftSimilarity};

/// Accumulated wall time per phase, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseTiming {
    pub forward: f64,
    pub queue: f64,
    pub solve: f64,
    pub predict: f64,
}

impl PhaseTiming {
    pub fn total(&self) -> f64 {
        self.forward + self.queue + self.solve + self.predict
    }

    pub fn per_sample(&self, samples: usize) -> PhaseTiming {
        let n = samples.max(1) as f64;
        PhaseTiming {
            forward: self.forward / n,
            queue: self.queue / n,
            solve: self.solve / n,
            predict: self.predict / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub task: usize,
    pub samples: usize,
    pub samples_per_class: f64,
    /// Mean per-class accuracy over the samples predicted so far in the task.
    pub accuracy: f64,
}

/// Correct and total prediction counts per class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassTally(BTreeMap<ClassId, (usize, usize)>);

impl ClassTally {
    pub fn record(&mut self, class_id: ClassId, correct: bool) {
        let e = self.0.entry(class_id).or_insert((0, 0));
        e.0 += correct as usize;
        e.1 += 1;
    }

    pub fn class_accuracy(&self) -> BTreeMap<ClassId, f64> {
        self.0
            .iter()
            .map(|(&c, &(ok, n))| (c, ok as f64 / n as f64))
            .collect()
    }

    /// Mean of per-class accuracies over `classes` (all tallied classes when `None`);
    /// `None` when no tallied class qualifies.
    pub fn mean_accuracy(&self, classes: Option<&BTreeSet<ClassId>>) -> Option<f64> {
        let accs: Vec<f64> = self
            .0
            .iter()
            .filter(|(c, _)| classes.is_none_or(|s| s.contains(c)))
            .map(|(_, &(ok, n))| ok as f64 / n as f64)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn merge(&mut self, other: &ClassTally) {
        for (&c, &(ok, n)) in &other.0 {
            let e = self.0.entry(c).or_insert((0, 0));
            e.0 += ok;
            e.1 += n;
        }
    }

    pub fn samples(&self) -> usize {
        self.0.values().map(|v| v.1).sum()
    }
}

/// One streamed prediction and the projector in force when it was made.
#[derive(Debug, Clone)]
pub struct ReplaySample {
    pub item: usize,
    pub projector: Option<Arc<Projector>>,
    pub predicted: ClassId,
}

#[derive(Debug, Clone)]
pub struct TaskReplay {
    pub task: usize,
    pub base_old: PrototypeTable,
    pub new_prototypes: PrototypeTable,
    pub samples: Vec<ReplaySample>,
    /// Items evaluated after the stream with `end_table`.
    pub excluded: Vec<(usize, ClassId)>,
    pub end_table: PrototypeTable,
}

#[derive(Debug, Clone, Default)]
pub struct ReplayLog {
    pub tasks: Vec<TaskReplay>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub samples: usize,
    pub mismatches: usize,
    pub per_task_accuracy: Vec<f64>,
    /// Every prediction and every per-task accuracy reproduced bit for bit.
    pub reproduced: bool,
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub task: usize,
    pub tally: ClassTally,
    /// Tally of the streamed items only.
    pub streamed: ClassTally,
    /// Tally of seen classes left out of the stream.
    pub excluded: ClassTally,
    pub accuracy: f64,
    pub curve: Vec<CurvePoint>,
    pub base_old: PrototypeTable,
    pub end_table: PrototypeTable,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub solver: String,
    pub oracle: bool,
    pub seed: u64,
    pub config_hash: String,
    pub sweep_key: String,
    pub sweep_value: String,
    pub per_task_accuracy: Vec<f64>,
    pub last_accuracy: f64,
    pub old_accuracy: Option<f64>,
    pub new_accuracy: Option<f64>,
    pub streamed_accuracy: Option<f64>,
    pub excluded_accuracy: Option<f64>,
    pub class_accuracy: BTreeMap<ClassId, f64>,
    pub drift_similarity: BTreeMap<ClassId, DriftSimilarity>,
    pub mean_drift_similarity: Option<f64>,
    pub curve: Vec<CurvePoint>,
    /// Mean seconds per streamed sample.
    pub timing: PhaseTiming,
    pub samples: usize,
    pub solves: usize,
    pub ridge_fallbacks: usize,
    pub final_residual: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: MetricsRecord,
    pub tasks: Vec<TaskOutcome>,
    pub replay: Option<ReplayLog>,
    pub final_prototypes: PrototypeTable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Online(SolverKind),
    /// Projector fitted offline on the whole stream of the task.
    Oracle,
}

/// Engine state carried across tasks.
pub struct Engine<'a> {
    scenario: &'a StagedScenario,
    config: &'a RunConfig,
    mode: Mode,
    seed: u64,
    prototypes: Option<PrototypeTable>,
    timing: PhaseTiming,
    samples: usize,
    solves: usize,
    ridge_fallbacks: usize,
    last_residual: Option<f64>,
    replay: Option<ReplayLog>,
    outcomes: Vec<TaskOutcome>,
}

fn stream_seed(seed: u64, task: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(task as u64)
}

fn random_projector(dim: usize, seed: u64) -> Result<Projector> {
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Projector::from_weights(DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-bound..bound)))
}

fn row_matrix(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let d = rows[0].len();
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

impl<'a> Engine<'a> {
    pub fn new(scenario: &'a StagedScenario, config: &'a RunConfig, seed: u64) -> Result<Self> {
        Self::with_mode(scenario, config, seed, Mode::Online(config.solver))
    }

    /// Engine whose projector for each task is fitted offline on the task's full stream.
    pub fn oracle(scenario: &'a StagedScenario, config: &'a RunConfig, seed: u64) -> Result<Self> {
        Self::with_mode(scenario, config, seed, Mode::Oracle)
    }

    fn with_mode(scenario: &'a StagedScenario, config: &'a RunConfig, seed: u64, mode: Mode) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            scenario,
            config,
            mode,
            seed,
            prototypes: None,
            timing: PhaseTiming::default(),
            samples: 0,
            solves: 0,
            ridge_fallbacks: 0,
            last_residual: None,
            replay: config.replay_audit.then(ReplayLog::default),
            outcomes: Vec::new(),
        })
    }

    /// Test item positions streamed in task `t`, and the seen-class items left out.
    pub fn stream_items(&self, t: usize) -> (Vec<usize>, Vec<usize>) {
        let seen = self.scenario.seen_classes(t);
        let streamed_classes: BTreeSet<ClassId> = match &self.scenario.selected_classes {
            Some(sel) => seen.intersection(sel).copied().collect(),
            None => seen.clone(),
        };
        let excluded_classes: BTreeSet<ClassId> = seen.difference(&streamed_classes).copied().collect();
        let cap = |items: Vec<usize>| -> Vec<usize> {
            let Some(k) = self.config.max_test_per_class else {
                return items;
            };
            let test = &self.scenario.stage(t).test;
            let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
            items
                .into_iter()
                .filter(|&i| {
                    let n = counts.entry(test[i].class_id).or_insert(0);
                    *n += 1;
                    *n <= k
                })
                .collect()
        };
        let mut streamed = cap(self.scenario.test_indices(&streamed_classes));
        let excluded = cap(self.scenario.test_indices(&excluded_classes));
        if self.config.shuffle_test {
            streamed.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(self.seed, t)));
        }
        (streamed, excluded)
    }

    /// Fit of the projector on the task's paired training features.
    fn training_projector(&self, t: usize, old_rows: &DMatrix<f64>, new_rows: &DMatrix<f64>) -> Result<Projector> {
        let cfg = self.config;
        let d = self.scenario.dim();
        match cfg.train_projector {
            TrainProjector::Identity => Ok(Projector::identity(d)),
            TrainProjector::Analytic => {
                let mut pair = QueuePair::new(old_rows.nrows(), d)?;
                pair.push_pair(old_rows, new_rows)?;
                let (p, report) = solve_analytic_with(&pair, &cfg.analytic_options())?;
                log::debug!("task {t}: training projector residual {:.3e}", report.residual);
                Ok(p)
            }
            TrainProjector::Gd => {
                let system = NormalSystem::from_rows(old_rows, new_rows, cfg.affine_projector)?;
                let mut solver = GradientDescent::new(GdOptions {
                    learning_rate: cfg.train_projector_lr,
                    optimizer: GdOptimizer::adam(),
                    affine: cfg.affine_projector,
                })?;
                Ok(solver.run(&system, &Projector::identity(d), cfg.train_projector_steps)?.0)
            }
        }
    }

    fn prediction_table(
        base_old: &PrototypeTable,
        new_prototypes: &PrototypeTable,
        projector: Option<&Projector>,
    ) -> Result<PrototypeTable> {
        let old = match projector {
            Some(p) => {
                let classes: BTreeSet<ClassId> = base_old.classes().collect();
                evolve_prototypes(base_old, p, &classes)?
            }
            None => base_old.clone(),
        };
        old.merged(new_prototypes)
    }

    /// Runs the test-time loop of task `t` (1-based); tasks must be run in order.
    pub fn run_task_cycle(&mut self, t: usize) -> Result<&TaskOutcome> {
        if t != self.outcomes.len() + 1 || t > self.scenario.num_tasks() {
            return Err(Error::Invalid(format!(
                "task {t} out of order (next is {})",
                self.outcomes.len() + 1
            )));
        }
        let cfg = self.config;
        let scn = self.scenario;
        let stage = scn.stage(t);
        let own = scn.task_classes(t);
        let own_train: Vec<_> = stage.train.iter().filter(|r| own.contains(&r.class_id)).cloned().collect();
        let new_prototypes = compute_prototypes(&own_train)?;

        let base_old = match &self.prototypes {
            Some(p) if t > 1 => p.restricted(&scn.seen_classes(t - 1)),
            _ => PrototypeTable::new(scn.dim()),
        };
        let has_old = !base_old.is_empty();
        let (items, excluded_items) = self.stream_items(t);
        let prev = has_old.then(|| scn.stage(t - 1));

        // Training-stage projector and the initial state of the online solver.
        let mut pair: Option<QueuePair> = None;
        let mut projector: Option<Projector> = None;
        let mut gd: Option<GradientDescent> = None;
        let mut mode = self.mode;
        if !has_old {
            mode = Mode::Online(SolverKind::None);
        }
        if let (Some(prev), true) = (prev, has_old) {
            let train_idx = scn.train_indices(own);
            let old_rows = row_matrix(&train_idx.iter().map(|&i| prev.train[i].vector.clone()).collect::<Vec<_>>());
            let new_rows = row_matrix(&train_idx.iter().map(|&i| stage.train[i].vector.clone()).collect::<Vec<_>>());
            match mode {
                Mode::Online(SolverKind::None) => {}
                Mode::Oracle => {
                    let start = Instant::now();
                    let old: Vec<_> = items.iter().map(|&i| prev.test[i].vector.clone()).collect();
                    let new: Vec<_> = items.iter().map(|&i| stage.test[i].vector.clone()).collect();
                    if !old.is_empty() {
                        let system = NormalSystem::from_rows(&row_matrix(&old), &row_matrix(&new), cfg.affine_projector)?;
                        let init = Projector::identity(scn.dim());
                        let (p, residual, steps) =
                            gradient_descent_to_convergence(&system, &init, cfg.oracle_max_steps, cfg.oracle_tolerance)?;
                        log::info!("task {t}: oracle converged after {steps} steps, residual {residual:.3e}");
                        self.last_residual = Some(residual);
                        self.solves += 1;
                        projector = Some(p);
                    }
                    self.timing.solve += start.elapsed().as_secs_f64();
                }
                Mode::Online(solver) => {
                    let trained = self.training_projector(t, &old_rows, &new_rows)?;
                    if solver.uses_queue() {
                        let init = init_with_pseudo_features(
                            &base_old,
                            &trained,
                            cfg.queue_capacity,
                            cfg.noise_scale,
                            stream_seed(self.seed ^ 0x5eed, t),
                        )?;
                        pair = Some(init.pair);
                    }
                    match solver {
                        SolverKind::Analytic => {
                            let (p, report) = solve_analytic_with(pair.as_ref().expect("queue initialized"), &cfg.analytic_options())?;
                            self.ridge_fallbacks += report.ridge_applied as usize;
                            projector = Some(p);
                        }
                        SolverKind::Gd | SolverKind::GdWithQueue => {
                            projector = Some(match cfg.gd_init {
                                GdInit::Identity => Projector::identity(scn.dim()),
                                GdInit::Trained => trained,
                                GdInit::Random => random_projector(scn.dim(), stream_seed(self.seed ^ 0x1417, t))?,
                            });
                            gd = Some(GradientDescent::new(cfg.gd_options())?);
                        }
                        SolverKind::None => {}
                    }
                }
            }
        }

        let mut table = Self::prediction_table(&base_old, &new_prototypes, projector.as_ref())?;
        let mut snapshot = projector.clone().map(Arc::new);
        let mut streamed = ClassTally::default();
        let mut replay_samples = Vec::new();
        let mut curve = Vec::new();
        let checkpoint = items.len().div_ceil(cfg.curve_points).max(1);
        let n_classes = {
            let set: BTreeSet<ClassId> = items.iter().map(|&i| stage.test[i].class_id).collect();
            set.len().max(1)
        };

        let online = matches!(mode, Mode::Online(s) if s != SolverKind::None);
        let mut pending_old: Vec<DVector<f64>> = Vec::new();
        let mut pending_new: Vec<DVector<f64>> = Vec::new();
        let mut last_chunk: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
        let mut since_solve = 0usize;

        for (k, &item) in items.iter().enumerate() {
            let start = Instant::now();
            let record = &stage.test[item];
            let feature = record.vector.clone();
            let old_feature = if online { prev.map(|p| p.test[item].vector.clone()) } else { None };
            self.timing.forward += start.elapsed().as_secs_f64();

            if cfg.predict_before_update {
                let predicted = self.predict(&feature, &table)?;
                streamed.record(record.class_id, predicted == record.class_id);
                replay_samples.push(ReplaySample {
                    item,
                    projector: snapshot.clone(),
                    predicted,
                });
            }

            if let (true, Some(old_feature)) = (online, old_feature) {
                let start = Instant::now();
                pending_old.push(old_feature);
                pending_new.push(feature.clone());
                if pending_old.len() >= cfg.update_stride {
                    let old_m = row_matrix(&pending_old);
                    let new_m = row_matrix(&pending_new);
                    if let Some(pair) = pair.as_mut() {
                        pair.push_pair(&old_m, &new_m)?;
                    }
                    last_chunk = Some((old_m, new_m));
                    pending_old.clear();
                    pending_new.clear();
                }
                self.timing.queue += start.elapsed().as_secs_f64();

                since_solve += 1;
                if since_solve >= cfg.resolve_stride && (pair.is_some() || last_chunk.is_some()) {
                    let start = Instant::now();
                    since_solve = 0;
                    let Mode::Online(solver) = mode else { unreachable!() };
                    let next = match solver {
                        SolverKind::Analytic => {
                            let (p, report) = solve_analytic_with(pair.as_ref().expect("queue"), &cfg.analytic_options())?;
                            self.ridge_fallbacks += report.ridge_applied as usize;
                            self.last_residual = Some(report.residual);
                            p
                        }
                        SolverKind::GdWithQueue => {
                            let system = NormalSystem::from_pair(pair.as_ref().expect("queue"), cfg.affine_projector)?;
                            let current = projector.as_ref().expect("gd projector");
                            let (p, residual) = gd.as_mut().expect("gd solver").run(&system, current, cfg.gd_steps)?;
                            self.last_residual = Some(residual);
                            p
                        }
                        SolverKind::Gd => {
                            let (old_m, new_m) = last_chunk.as_ref().expect("pushed chunk");
                            let system = NormalSystem::from_rows(old_m, new_m, cfg.affine_projector)?;
                            let current = projector.as_ref().expect("gd projector");
                            let (p, residual) = gd.as_mut().expect("gd solver").run(&system, current, cfg.gd_steps)?;
                            self.last_residual = Some(residual);
                            p
                        }
                        SolverKind::None => unreachable!(),
                    };
                    table = Self::prediction_table(&base_old, &new_prototypes, Some(&next))?;
                    projector = Some(next);
                    snapshot = if self.replay.is_some() {
                        projector.clone().map(Arc::new)
                    } else {
                        None
                    };
                    self.solves += 1;
                    self.timing.solve += start.elapsed().as_secs_f64();
                }
            }

            if !cfg.predict_before_update {
                let predicted = self.predict(&feature, &table)?;
                streamed.record(record.class_id, predicted == record.class_id);
                replay_samples.push(ReplaySample {
                    item,
                    projector: snapshot.clone(),
                    predicted,
                });
            }
            self.samples += 1;

            if (k + 1) % checkpoint == 0 || k + 1 == items.len() {
                curve.push(CurvePoint {
                    task: t,
                    samples: k + 1,
                    samples_per_class: (k + 1) as f64 / n_classes as f64,
                    accuracy: streamed.mean_accuracy(None).unwrap_or(0.0),
                });
            }
        }

        let mut excluded = ClassTally::default();
        let mut excluded_log = Vec::new();
        for &item in &excluded_items {
            let r = &stage.test[item];
            let predicted = ncm_predict(&r.vector, &table)?;
            excluded.record(r.class_id, predicted == r.class_id);
            excluded_log.push((item, predicted));
        }

        let mut tally = streamed.clone();
        tally.merge(&excluded);
        let accuracy = tally.mean_accuracy(None).unwrap_or(0.0);
        if let Some(log) = self.replay.as_mut() {
            log.tasks.push(TaskReplay {
                task: t,
                base_old: base_old.clone(),
                new_prototypes: new_prototypes.clone(),
                samples: replay_samples,
                excluded: excluded_log,
                end_table: table.clone(),
            });
        }
        self.prototypes = Some(table.clone());
        self.outcomes.push(TaskOutcome {
            task: t,
            tally,
            streamed,
            excluded,
            accuracy,
            curve,
            base_old,
            end_table: table,
        });
        Ok(self.outcomes.last().expect("just pushed"))
    }

    fn predict(&mut self, feature: &DVector<f64>, table: &PrototypeTable) -> Result<ClassId> {
        let start = Instant::now();
        let predicted = ncm_predict(feature, table)?;
        self.timing.predict += start.elapsed().as_secs_f64();
        Ok(predicted)
    }

    pub fn finish(self) -> Result<RunOutcome> {
        let scn = self.scenario;
        let t_last = scn.num_tasks();
        if self.outcomes.len() != t_last {
            return Err(Error::Invalid(format!(
                "run stopped after {} of {t_last} tasks",
                self.outcomes.len()
            )));
        }
        let last = self.outcomes.last().expect("at least one task");
        let (old_set, new_set) = match scn.split() {
            SplitKind::Cold => (scn.seen_classes(t_last.saturating_sub(1)), scn.task_classes(t_last).clone()),
            SplitKind::Warm => {
                let first = scn.task_classes(1).clone();
                let rest = scn.seen_classes(t_last).difference(&first).copied().collect();
                (first, rest)
            }
        };

        let (drift_similarity, mean_drift_similarity) = if t_last >= 2 {
            let old_classes = scn.seen_classes(t_last - 1);
            let truth_records: Vec<_> = scn
                .stage(t_last)
                .train
                .iter()
                .filter(|r| old_classes.contains(&r.class_id))
                .cloned()
                .collect();
            let truth = compute_prototypes(&truth_records)?;
            let estimated = last.end_table.restricted(&old_classes);
            let sims = true_drift_similarity(&last.base_old, &estimated, &truth)?;
            let valid: Vec<f64> = sims.values().filter(|s| !s.zero_drift).map(|s| s.similarity).collect();
            let mean = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
            (sims, mean)
        } else {
            (BTreeMap::new(), None)
        };

        let (solver, oracle) = match self.mode {
            Mode::Online(s) => (s.name().to_string(), false),
            Mode::Oracle => ("gd_oracle".to_string(), true),
        };
        let unbalanced = scn.selected_classes.is_some();
        let metrics = MetricsRecord {
            solver,
            oracle,
            seed: self.seed,
            config_hash: self.config.hash(),
            sweep_key: String::new(),
            sweep_value: String::new(),
            per_task_accuracy: self.outcomes.iter().map(|o| o.accuracy).collect(),
            last_accuracy: last.accuracy,
            old_accuracy: last.tally.mean_accuracy(Some(&old_set)),
            new_accuracy: last.tally.mean_accuracy(Some(&new_set)),
            streamed_accuracy: unbalanced.then(|| last.streamed.mean_accuracy(None)).flatten(),
            excluded_accuracy: unbalanced.then(|| last.excluded.mean_accuracy(None)).flatten(),
            class_accuracy: last.tally.class_accuracy(),
            drift_similarity,
            mean_drift_similarity,
            curve: self.outcomes.iter().flat_map(|o| o.curve.iter().copied()).collect(),
            timing: self.timing.per_sample(self.samples),
            samples: self.samples,
            solves: self.solves,
            ridge_fallbacks: self.ridge_fallbacks,
            final_residual: self.last_residual,
        };
        Ok(RunOutcome {
            metrics,
            final_prototypes: last.end_table.clone(),
            tasks: self.outcomes,
            replay: self.replay,
        })
    }
}

/// Runs every task of `scenario` in order.
pub fn run_scenario(scenario: &StagedScenario, config: &RunConfig, seed: u64) -> Result<RunOutcome> {
    let mut engine = Engine::new(scenario, config, seed)?;
    for t in 1..=scenario.num_tasks() {
        engine.run_task_cycle(t)?;
    }
    engine.finish()
}

/// Evaluates each task with a projector fitted offline to convergence on all of the
/// task's streamed pairs. Not an online method.
pub fn run_gd_oracle(scenario: &StagedScenario, config: &RunConfig, seed: u64) -> Result<RunOutcome> {
    let mut engine = Engine::oracle(scenario, config, seed)?;
    for t in 1..=scenario.num_tasks() {
        engine.run_task_cycle(t)?;
    }
    engine.finish()
}

/// Re-predicts every logged sample from the logged projector snapshots and compares with
/// the logged predictions and accuracies of `outcome`.
pub fn replay_audit(scenario: &StagedScenario, outcome: &RunOutcome) -> Result<AuditReport> {
    let log = outcome
        .replay
        .as_ref()
        .ok_or_else(|| Error::Invalid("run was made without a replay log".into()))?;
    let mut samples = 0;
    let mut mismatches = 0;
    let mut per_task_accuracy = Vec::new();
    for task in &log.tasks {
        let stage = scenario.stage(task.task);
        let mut tally = ClassTally::default();
        let mut cache: Option<(*const Projector, PrototypeTable)> = None;
        for s in &task.samples {
            let key = s.projector.as_ref().map_or(std::ptr::null(), Arc::as_ptr);
            let table = match &cache {
                Some((k, table)) if *k == key => table,
                _ => {
                    let table = Engine::prediction_table(&task.base_old, &task.new_prototypes, s.projector.as_deref())?;
                    &cache.insert((key, table)).1
                }
            };
            let record = &stage.test[s.item];
            let predicted = ncm_predict(&record.vector, table)?;
            mismatches += (predicted != s.predicted) as usize;
            tally.record(record.class_id, predicted == record.class_id);
            samples += 1;
        }
        for &(item, logged) in &task.excluded {
            let record = &stage.test[item];
            let predicted = ncm_predict(&record.vector, &task.end_table)?;
            mismatches += (predicted != logged) as usize;
            tally.record(record.class_id, predicted == record.class_id);
            samples += 1;
        }
        per_task_accuracy.push(tally.mean_accuracy(None).unwrap_or(0.0));
    }
    let logged: Vec<u64> = outcome.metrics.per_task_accuracy.iter().map(|a| a.to_bits()).collect();
    let replayed: Vec<u64> = per_task_accuracy.iter().map(|a| a.to_bits()).collect();
    Ok(AuditReport {
        samples,
        mismatches,
        reproduced: mismatches == 0 && logged == replayed,
        per_task_accuracy,
    })
}
