//! Randomized trials shared by the property suites and the acceptance gate.
#![allow(dead_code)]

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use semevo_core::projector::{
    evolve_prototypes, mean_squared_residual, normal_equation_error, solve_analytic, solve_gradient_descent, Projector,
};
use semevo_core::prototypes::{compute_prototypes, ClassId, PrototypeTable};
use semevo_core::queue::{init_with_pseudo_features, QueuePair};
use semevo_core::scenario::SplitKind;
use semevo_core::trainer::{
    base_loss, ce_loss, kd_loss, scl_loss, LabeledBatch, LossOptions, LossOutput, LossWeights, SclDenominator,
    ToyModel,
};
use semevo_core::sim::{generate_scenario, true_drift_similarity, DriftKind, DriftSpec, SyntheticScenario, TestBalance};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn pair_from(old: &DMatrix<f64>, new: &DMatrix<f64>) -> QueuePair {
    let mut p = QueuePair::new(old.nrows(), old.ncols()).unwrap();
    p.push_pair(old, new).unwrap();
    p
}

/// Random paired queue with a noisy linear relation between the two sides.
pub fn random_pair(seed: u64) -> QueuePair {
    let mut r = rng(seed);
    let d = r.random_range(2..=12);
    let n = r.random_range(d + 2..=6 * d);
    let old = gaussian(&mut r, n, d);
    let w = gaussian(&mut r, d, d);
    let new = &old * w + gaussian(&mut r, n, d) * 0.1;
    pair_from(&old, &new)
}

pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let s = m.clone().svd(false, false).singular_values;
    let tol = s.max() * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON;
    s.iter().filter(|&&v| v > tol).count()
}

fn stats_error(pair: &QueuePair) -> f64 {
    let (o, n) = (pair.old_matrix(), pair.new_matrix());
    let s = pair.stats();
    let gram = (o.tr_mul(&o) - &s.gram).amax();
    let cross = (o.tr_mul(&n) - &s.cross).amax();
    let sums = (o.row_sum().transpose() - &s.sum_old).amax() + (n.row_sum().transpose() - &s.sum_new).amax();
    gram.max(cross).max(sums)
}

/// One randomized queue trial: random pushes checked against a `VecDeque` oracle with
/// the paired-length invariant after every push, then a pseudo-feature initialization
/// whose Gram matrix must have full rank.
pub fn queue_trial(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let d = r.random_range(1..=6);
    let capacity = r.random_range(1..=40);
    let mut pair = QueuePair::new(capacity, d).map_err(|e| e.to_string())?;
    let mut oracle_old: VecDeque<DVector<f64>> = VecDeque::new();
    let mut oracle_new: VecDeque<DVector<f64>> = VecDeque::new();
    let pushes = r.random_range(1..=60);
    for step in 0..pushes {
        let k = r.random_range(1..=8);
        let old = gaussian(&mut r, k, d);
        let new = gaussian(&mut r, k, d);
        pair.push_pair(&old, &new).map_err(|e| e.to_string())?;
        for i in 0..k {
            oracle_old.push_back(old.row(i).transpose());
            oracle_new.push_back(new.row(i).transpose());
            if oracle_old.len() > capacity {
                oracle_old.pop_front();
                oracle_new.pop_front();
            }
        }
        if pair.old_queue().len() != pair.new_queue().len() {
            return Err(format!("step {step}: queue lengths differ"));
        }
        if pair.len() != oracle_old.len() {
            return Err(format!("step {step}: length {} vs oracle {}", pair.len(), oracle_old.len()));
        }
        let same = pair.old_queue().rows().zip(&oracle_old).all(|(a, b)| a == b)
            && pair.new_queue().rows().zip(&oracle_new).all(|(a, b)| a == b);
        if !same {
            return Err(format!("step {step}: contents differ from the FIFO oracle"));
        }
    }
    let err = stats_error(&pair);
    if err > 1e-8 {
        return Err(format!("incremental statistics off by {err:e}"));
    }

    let classes = r.random_range(1..=10);
    let dim = r.random_range(2..=24);
    let size = r.random_range(dim..=3 * dim + 10);
    let alpha = r.random_range(0.005..0.5);
    let mut table = PrototypeTable::new(dim);
    for c in 0..classes {
        let v = DVector::from_fn(dim, |_, _| r.sample::<f64, _>(StandardNormal)) * 5.0;
        table.insert(c, v, 1).map_err(|e| e.to_string())?;
    }
    let init = init_with_pseudo_features(&table, &Projector::identity(dim), size, alpha, seed)
        .map_err(|e| e.to_string())?;
    if init.pair.len() != size || !init.warnings.is_empty() {
        return Err("pseudo initialization has wrong length or warned".into());
    }
    let rank = numerical_rank(&init.pair.stats().gram);
    if rank != dim {
        return Err(format!("pseudo-feature Gram rank {rank} < {dim} (S={size}, alpha={alpha})"));
    }
    Ok(())
}

/// Normal equations, perturbation optimality and GD comparison on one random pair.
pub fn optimality_trial(seed: u64) -> Result<(), String> {
    let pair = random_pair(seed);
    let (w, _) = solve_analytic(&pair, 0.0).map_err(|e| e.to_string())?;
    let ne = normal_equation_error(&pair, 0.0, &w);
    if ne > 1e-8 {
        return Err(format!("normal equations off by {ne:e}"));
    }
    let base = mean_squared_residual(&pair, &w);
    let mut r = rng(seed ^ 0xabcdef);
    let d = pair.dim();
    let scale = w.weights().norm() * 1e-3;
    for i in 0..100 {
        let delta = gaussian(&mut r, d, d) * scale;
        let perturbed = Projector::from_weights(w.weights() + delta).unwrap();
        let res = mean_squared_residual(&pair, &perturbed);
        if res < base - 1e-10 {
            return Err(format!("perturbation {i} has lower residual {res} < {base}"));
        }
    }
    let (gd, _) =
        solve_gradient_descent(&pair, &Projector::identity(d), 0.01, 1000).map_err(|e| e.to_string())?;
    let gd_residual = mean_squared_residual(&pair, &gd);
    if gd_residual < base - 1e-10 {
        return Err(format!("gradient descent residual {gd_residual} beats analytic {base}"));
    }
    Ok(())
}

pub fn linear_scenario(kind: DriftKind, dim: usize, seed: u64) -> SyntheticScenario {
    SyntheticScenario {
        num_tasks: 3,
        num_classes: 12,
        classes_per_task: vec![4, 4, 4],
        split: SplitKind::Cold,
        dim,
        cluster_separation: 3.0,
        cluster_std: 1.0,
        train_per_class: 2 * dim,
        test_per_class: 5,
        drift_schedule: vec![DriftSpec {
            scale: 1.3,
            ..DriftSpec::new(kind, 0.5)
        }],
        test_balance: TestBalance::Balanced,
        seed,
    }
}

/// Fits the projector of the last boundary of a noise-free linear scenario from paired
/// training features and returns (relative weight error, smallest per-class drift
/// similarity).
pub fn recovery_trial(kind: DriftKind, dim: usize, seed: u64) -> Result<(f64, f64), String> {
    let generated = generate_scenario(&linear_scenario(kind, dim, seed)).map_err(|e| e.to_string())?;
    let s = &generated.scenario;
    let last = s.num_tasks();
    let rows = |t: usize| {
        let train = &s.stage(t).train;
        DMatrix::from_fn(train.len(), dim, |i, j| train[i].vector[j])
    };
    let pair = pair_from(&rows(last - 1), &rows(last));
    let (w, _) = solve_analytic(&pair, 0.0).map_err(|e| e.to_string())?;
    let truth = &generated.drift_maps[last - 2].matrix;
    let err = relative_frobenius(w.weights(), truth);

    let reference = compute_prototypes(&s.stage(last - 1).train).map_err(|e| e.to_string())?;
    let actual = compute_prototypes(&s.stage(last).train).map_err(|e| e.to_string())?;
    let classes = reference.classes().collect();
    let evolved = evolve_prototypes(&reference, &w, &classes).map_err(|e| e.to_string())?;
    let sims = true_drift_similarity(&reference, &evolved, &actual).map_err(|e| e.to_string())?;
    let worst = sims.values().map(|s| s.similarity).fold(f64::INFINITY, f64::min);
    Ok((err, worst))
}

const STEP: f64 = 1e-5;

/// Largest relative error between analytic and central-difference gradients. The
/// denominator is floored at 1e-3 of the largest gradient entry so that entries that are
/// zero up to rounding do not dominate.
pub fn max_relative_error(model: &ToyModel, loss: impl Fn(&ToyModel) -> LossOutput) -> f64 {
    let analytic: Vec<f64> = loss(model).grads.values().copied().collect();
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = model.clone();
        *plus.params_mut().nth(i).unwrap() += STEP;
        let mut minus = model.clone();
        *minus.params_mut().nth(i).unwrap() -= STEP;
        let numeric = (loss(&plus).value - loss(&minus).value) / (2.0 * STEP);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

pub fn random_model(seed: u64, classes: &[ClassId]) -> ToyModel {
    let mut m = ToyModel::new(10, 7, 5, seed).unwrap();
    m.extend_head(classes, seed + 100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    for p in m.params_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    m
}

pub fn random_batch(seed: u64, rows: usize, classes: &[ClassId]) -> LabeledBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = DMatrix::from_fn(rows, 10, |_, _| rng.random_range(-2.0..2.0));
    let labels = (0..rows).map(|i| classes[i % classes.len()]).collect();
    LabeledBatch::new(inputs, labels).unwrap()
}

/// Worst relative gradient error of cross-entropy over 20 random instances.
pub fn cross_entropy_check() -> f64 {
    (0..20)
        .map(|seed| {
            let classes = [0, 1, 2, 3];
            let model = random_model(seed, &classes);
            let batch = random_batch(seed + 1000, 8, &classes);
            max_relative_error(&model, |m| ce_loss(m, &batch).unwrap())
        })
        .fold(0.0, f64::max)
}

/// Worst relative gradient error of distillation (both normalizations) over 20 instances.
pub fn distillation_check() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let old = random_model(seed + 50, &[0, 1, 2]);
        let model = random_model(seed, &[0, 1, 2, 3, 4]);
        let batch = random_batch(seed + 1000, 8, &[0]);
        for renormalize in [true, false] {
            worst = worst.max(max_relative_error(&model, |m| {
                kd_loss(m, &old, &batch.inputs, 3, renormalize).unwrap()
            }));
        }
    }
    worst
}

/// Worst relative gradient error of the contrastive loss over 20 instances, cycling
/// through temperatures and variants.
pub fn contrastive_check() -> f64 {
    let variants = [
        (0.1, LossOptions::default()),
        (
            0.5,
            LossOptions {
                scl_denominator: SclDenominator::AllOthers,
                ..LossOptions::default()
            },
        ),
        (
            1.0,
            LossOptions {
                scl_normalize: false,
                ..LossOptions::default()
            },
        ),
    ];
    (0..20u64)
        .map(|seed| {
            let classes = [0, 1, 2];
            let model = random_model(seed, &classes);
            let batch = random_batch(seed + 1000, 12, &classes);
            let (tau, options) = variants[seed as usize % variants.len()];
            max_relative_error(&model, |m| scl_loss(m, &batch, tau, &options).unwrap())
        })
        .fold(0.0, f64::max)
}

pub fn composite_check() -> f64 {
    let old = random_model(77, &[0, 1]);
    let model = random_model(78, &[0, 1, 2, 3]);
    let batch = random_batch(79, 12, &[2, 3]);
    let weights = LossWeights {
        lambda1: 10.0,
        lambda2: 0.1,
        tau: 0.2,
    };
    max_relative_error(&model, |m| {
        base_loss(m, Some(&old), &batch, &weights, &LossOptions::default()).unwrap()
    })
}
