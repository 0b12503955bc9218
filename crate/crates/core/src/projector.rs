//! Linear drift projector between two feature spaces.
//!
//! Rows are samples: a projector with weights `W` maps a row `z` to `zᵀW (+ b)`, so a
//! perfect fit of the queues satisfies `Qo·W = Qn`. The closed-form fit solves the
//! (optionally ridge-regularized) normal equations with a Cholesky factorization; the Gram
//! inverse is never formed.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototypes::{ClassId, PrototypeTable};
use crate::queue::QueuePair;

pub const DEFAULT_MIN_RIDGE: f64 = 1e-8;
pub const DEFAULT_CONDITION_THRESHOLD: f64 = 1e12;
pub const DEFAULT_GD_LEARNING_RATE: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    weights: DMatrix<f64>,
    bias: Option<DVector<f64>>,
}

impl Projector {
    pub fn identity(dim: usize) -> Self {
        Self {
            weights: DMatrix::identity(dim, dim),
            bias: None,
        }
    }

    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        Self::affine(weights, None)
    }

    pub fn affine(weights: DMatrix<f64>, bias: Option<DVector<f64>>) -> Result<Self> {
        if weights.nrows() != weights.ncols() {
            return Err(Error::Dimension {
                expected: weights.nrows(),
                found: weights.ncols(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != weights.nrows() {
                return Err(Error::Dimension {
                    expected: weights.nrows(),
                    found: b.len(),
                });
            }
        }
        let finite = weights.iter().chain(bias.iter().flat_map(|b| b.iter())).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Degenerate("projector has non-finite entries".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bias(&self) -> Option<&DVector<f64>> {
        self.bias.as_ref()
    }

    /// Image of one feature vector.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let out = self.weights.tr_mul(v);
        match &self.bias {
            Some(b) => out + b,
            None => out,
        }
    }

    /// Images of the rows of `rows`.
    pub fn apply_rows(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = rows * &self.weights;
        if let Some(b) = &self.bias {
            for mut r in out.row_iter_mut() {
                r += b.transpose();
            }
        }
        out
    }

    fn stacked(&self, affine: bool) -> DMatrix<f64> {
        if !affine {
            return self.weights.clone();
        }
        let d = self.dim();
        let mut w = DMatrix::zeros(d + 1, d);
        w.rows_mut(0, d).copy_from(&self.weights);
        if let Some(b) = &self.bias {
            w.row_mut(d).copy_from(&b.transpose());
        }
        w
    }

    fn from_stacked(w: DMatrix<f64>, affine: bool) -> Result<Self> {
        if !affine {
            return Self::from_weights(w);
        }
        let d = w.ncols();
        let bias = w.row(d).transpose();
        Self::affine(w.rows(0, d).into_owned(), Some(bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingularPolicy {
    /// Refuse to solve an ill-conditioned unregularized system.
    Strict,
    /// Retry with `min_ridge`.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticOptions {
    pub ridge: f64,
    pub min_ridge: f64,
    pub condition_threshold: f64,
    pub singular_policy: SingularPolicy,
    /// Fit a bias through a constant-one augmented column.
    pub affine: bool,
}

impl Default for AnalyticOptions {
    fn default() -> Self {
        Self {
            ridge: 0.0,
            min_ridge: DEFAULT_MIN_RIDGE,
            condition_threshold: DEFAULT_CONDITION_THRESHOLD,
            singular_policy: SingularPolicy::Fallback,
            affine: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    /// Mean squared row residual `‖Qo·W − Qn‖² / n`.
    pub residual: f64,
    /// Condition number of the (regularized) Gram matrix; `None` when not computed.
    pub gram_condition: Option<f64>,
    pub ridge_applied: bool,
    pub wall_time: f64,
}

/// Normal-equation view of a paired least-squares problem: `a = XᵀX`, `b = XᵀY`, where `X`
/// is the old-feature design (augmented with a ones column when affine).
#[derive(Debug, Clone)]
pub struct NormalSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub rows: f64,
    pub target_sq_norm: f64,
    pub affine: bool,
}

impl NormalSystem {
    pub fn from_pair(pair: &QueuePair, affine: bool) -> Result<Self> {
        if pair.is_empty() {
            return Err(Error::Empty("queue pair"));
        }
        let s = pair.stats();
        let n = pair.len() as f64;
        if !affine {
            return Ok(Self {
                a: s.gram.clone(),
                b: s.cross.clone(),
                rows: n,
                target_sq_norm: s.new_sq_norm,
                affine,
            });
        }
        let d = pair.dim();
        let mut a = DMatrix::zeros(d + 1, d + 1);
        a.view_mut((0, 0), (d, d)).copy_from(&s.gram);
        a.view_mut((0, d), (d, 1)).copy_from(&s.sum_old);
        a.view_mut((d, 0), (1, d)).copy_from(&s.sum_old.transpose());
        a[(d, d)] = n;
        let mut b = DMatrix::zeros(d + 1, d);
        b.rows_mut(0, d).copy_from(&s.cross);
        b.row_mut(d).copy_from(&s.sum_new.transpose());
        Ok(Self {
            a,
            b,
            rows: n,
            target_sq_norm: s.new_sq_norm,
            affine,
        })
    }

    /// System built directly from row-paired matrices.
    pub fn from_rows(old: &DMatrix<f64>, new: &DMatrix<f64>, affine: bool) -> Result<Self> {
        if old.shape() != new.shape() {
            return Err(Error::Invalid(format!(
                "paired matrices have shapes {:?} and {:?}",
                old.shape(),
                new.shape()
            )));
        }
        if old.nrows() == 0 {
            return Err(Error::Empty("paired rows"));
        }
        let x = if affine {
            old.clone().insert_column(old.ncols(), 1.0)
        } else {
            old.clone()
        };
        Ok(Self {
            a: x.tr_mul(&x),
            b: x.tr_mul(new),
            rows: old.nrows() as f64,
            target_sq_norm: new.norm_squared(),
            affine,
        })
    }

    /// Mean squared residual of stacked weights, from the sufficient statistics.
    fn residual_of(&self, w: &DMatrix<f64>) -> f64 {
        let aw = &self.a * w;
        let quad = w.dot(&aw);
        let lin = w.dot(&self.b);
        ((quad - 2.0 * lin + self.target_sq_norm) / self.rows).max(0.0)
    }

    /// Gradient of the mean squared residual: `2(AW − B)/n`.
    fn gradient(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        (&self.a * w - &self.b) * (2.0 / self.rows)
    }

    pub fn residual(&self, projector: &Projector) -> f64 {
        self.residual_of(&projector.stacked(self.affine))
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

fn with_ridge(a: &DMatrix<f64>, ridge: f64, dim: usize) -> DMatrix<f64> {
    let mut m = a.clone();
    for i in 0..dim {
        m[(i, i)] += ridge;
    }
    m
}

/// Closed-form least-squares projector `W = (QoᵀQo + ridge·I)⁻¹ QoᵀQn`.
pub fn solve_analytic(pair: &QueuePair, ridge: f64) -> Result<(Projector, SolveReport)> {
    solve_analytic_with(
        pair,
        &AnalyticOptions {
            ridge,
            ..AnalyticOptions::default()
        },
    )
}

pub fn solve_analytic_with(pair: &QueuePair, opts: &AnalyticOptions) -> Result<(Projector, SolveReport)> {
    let start = Instant::now();
    if !(opts.ridge >= 0.0 && opts.ridge.is_finite()) {
        return Err(Error::Invalid(format!("ridge {} must be finite and >= 0", opts.ridge)));
    }
    let system = NormalSystem::from_pair(pair, opts.affine)?;
    let d = pair.dim();

    let mut ridge = opts.ridge;
    let mut ridge_applied = false;
    let mut condition = condition_number(&with_ridge(&system.a, ridge, d));
    if ridge == 0.0 && (condition.is_nan() || condition > opts.condition_threshold) {
        match opts.singular_policy {
            SingularPolicy::Strict => return Err(Error::Singular { condition }),
            SingularPolicy::Fallback => {
                log::debug!("gram condition {condition:e} above threshold, using ridge {}", opts.min_ridge);
                ridge = opts.min_ridge;
                ridge_applied = true;
                condition = condition_number(&with_ridge(&system.a, ridge, d));
            }
        }
    }

    let chol = Cholesky::new(with_ridge(&system.a, ridge, d)).ok_or(Error::Singular { condition })?;
    let w = chol.solve(&system.b);
    let residual = system.residual_of(&w);
    let projector = Projector::from_stacked(w, opts.affine)?;
    Ok((
        projector,
        SolveReport {
            residual,
            gram_condition: Some(condition),
            ridge_applied,
            wall_time: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Relative Frobenius error of the normal equations `(QoᵀQo + ridge·I)W = QoᵀQn`,
/// computed from the stored rows.
pub fn normal_equation_error(pair: &QueuePair, ridge: f64, projector: &Projector) -> f64 {
    let qo = pair.old_matrix();
    let qn = pair.new_matrix();
    let lhs = with_ridge(&qo.tr_mul(&qo), ridge, pair.dim()) * projector.weights();
    let rhs = qo.tr_mul(&qn);
    let scale = rhs.norm().max(f64::MIN_POSITIVE);
    (lhs - rhs).norm() / scale
}

/// Mean squared row residual computed from the stored rows.
pub fn mean_squared_residual(pair: &QueuePair, projector: &Projector) -> f64 {
    let diff = projector.apply_rows(&pair.old_matrix()) - pair.new_matrix();
    diff.norm_squared() / pair.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GdOptimizer {
    Plain,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl GdOptimizer {
    pub fn adam() -> Self {
        GdOptimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdOptions {
    pub learning_rate: f64,
    pub optimizer: GdOptimizer,
    pub affine: bool,
}

impl Default for GdOptions {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_GD_LEARNING_RATE,
            optimizer: GdOptimizer::Plain,
            affine: false,
        }
    }
}

/// Full-batch gradient descent on the mean squared residual. Optimizer moments persist
/// across [`GradientDescent::run`] calls so the solver can be used online.
#[derive(Debug, Clone)]
pub struct GradientDescent {
    options: GdOptions,
    first_moment: Option<DMatrix<f64>>,
    second_moment: Option<DMatrix<f64>>,
    step_count: usize,
}

impl GradientDescent {
    pub fn new(options: GdOptions) -> Result<Self> {
        if !(options.learning_rate > 0.0 && options.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning rate {} must be positive",
                options.learning_rate
            )));
        }
        Ok(Self {
            options,
            first_moment: None,
            second_moment: None,
            step_count: 0,
        })
    }

    pub fn options(&self) -> &GdOptions {
        &self.options
    }

    /// Runs `steps` updates from `init`; returns the final projector and its residual.
    pub fn run(&mut self, system: &NormalSystem, init: &Projector, steps: usize) -> Result<(Projector, f64)> {
        if system.affine != self.options.affine {
            return Err(Error::Invalid("affine flag differs between system and solver".into()));
        }
        let mut w = init.stacked(self.options.affine);
        if w.shape() != system.b.shape() {
            return Err(Error::Dimension {
                expected: system.b.nrows(),
                found: w.nrows(),
            });
        }
        let lr = self.options.learning_rate;
        for step in 0..steps {
            let loss = system.residual_of(&w);
            if !loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            let grad = system.gradient(&w);
            match self.options.optimizer {
                GdOptimizer::Plain => w -= grad * lr,
                GdOptimizer::Adam { beta1, beta2, epsilon } => {
                    self.step_count += 1;
                    let m = self.first_moment.get_or_insert_with(|| DMatrix::zeros(w.nrows(), w.ncols()));
                    let v = self.second_moment.get_or_insert_with(|| DMatrix::zeros(w.nrows(), w.ncols()));
                    *m = &*m * beta1 + &grad * (1.0 - beta1);
                    *v = &*v * beta2 + grad.component_mul(&grad) * (1.0 - beta2);
                    let bc1 = 1.0 - beta1.powi(self.step_count as i32);
                    let bc2 = 1.0 - beta2.powi(self.step_count as i32);
                    w.zip_zip_apply(m, v, |wi, mi, vi| {
                        *wi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + epsilon);
                    });
                }
            }
        }
        let residual = system.residual_of(&w);
        if !residual.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: steps });
        }
        Ok((Projector::from_stacked(w, self.options.affine)?, residual))
    }
}

/// `steps` plain full-batch gradient steps on the queue residual, starting from `init`.
pub fn solve_gradient_descent(
    pair: &QueuePair,
    init: &Projector,
    learning_rate: f64,
    steps: usize,
) -> Result<(Projector, SolveReport)> {
    solve_gradient_descent_with(
        pair,
        init,
        &GdOptions {
            learning_rate,
            ..GdOptions::default()
        },
        steps,
    )
}

pub fn solve_gradient_descent_with(
    pair: &QueuePair,
    init: &Projector,
    options: &GdOptions,
    steps: usize,
) -> Result<(Projector, SolveReport)> {
    let start = Instant::now();
    let system = NormalSystem::from_pair(pair, options.affine)?;
    let mut solver = GradientDescent::new(options.clone())?;
    let (projector, residual) = solver.run(&system, init, steps)?;
    Ok((
        projector,
        SolveReport {
            residual,
            gram_condition: None,
            ridge_applied: false,
            wall_time: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Plain gradient descent with step `1/L` (`L` the gradient's Lipschitz constant), run
/// until the gradient norm falls below `tolerance` times its value at `W = 0`, or
/// `max_steps` is reached. Returns the projector, its residual and the steps taken.
pub fn gradient_descent_to_convergence(
    system: &NormalSystem,
    init: &Projector,
    max_steps: usize,
    tolerance: f64,
) -> Result<(Projector, f64, usize)> {
    let mut w = init.stacked(system.affine);
    if w.shape() != system.b.shape() {
        return Err(Error::Dimension {
            expected: system.b.nrows(),
            found: w.nrows(),
        });
    }
    let lipschitz = 2.0 * SymmetricEigen::new(system.a.clone()).eigenvalues.max() / system.rows;
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(Error::Degenerate("gram matrix has no positive eigenvalue".into()));
    }
    let step = 1.0 / lipschitz;
    let target = tolerance * (&system.b * (2.0 / system.rows)).norm();
    let mut taken = 0;
    while taken < max_steps {
        let grad = system.gradient(&w);
        let norm = grad.norm();
        if !norm.is_finite() {
            return Err(Error::Divergence { step: taken });
        }
        if norm <= target {
            break;
        }
        w -= grad * step;
        taken += 1;
    }
    let residual = system.residual_of(&w);
    if !residual.is_finite() {
        return Err(Error::Divergence { step: taken });
    }
    Ok((Projector::from_stacked(w, system.affine)?, residual, taken))
}

/// Replaces the prototypes of `old_classes` by their image under `projector`.
pub fn evolve_prototypes(
    prototypes: &PrototypeTable,
    projector: &Projector,
    old_classes: &BTreeSet<ClassId>,
) -> Result<PrototypeTable> {
    if projector.dim() != prototypes.dim() {
        return Err(Error::Dimension {
            expected: prototypes.dim(),
            found: projector.dim(),
        });
    }
    let mut out = prototypes.clone();
    for &c in old_classes {
        let entry = prototypes.get(c).ok_or(Error::MissingClass(c))?;
        out.insert(c, projector.apply(&entry.prototype), entry.aligned_task + 1)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn pair_from(old: &DMatrix<f64>, new: &DMatrix<f64>) -> QueuePair {
        let mut p = QueuePair::new(old.nrows(), old.ncols()).unwrap();
        p.push_pair(old, new).unwrap();
        p
    }

    fn sample_old() -> DMatrix<f64> {
        dmatrix![
            1.0, 0.5, -0.2;
            0.3, 2.0, 0.1;
            -1.0, 0.4, 1.5;
            0.7, -0.9, 0.2;
            1.1, 1.3, -0.8
        ]
    }

    #[test]
    fn identity_fit() {
        let qo = sample_old();
        let (p, rep) = solve_analytic(&pair_from(&qo, &qo), 0.0).unwrap();
        assert!((p.weights() - DMatrix::identity(3, 3)).norm() < 1e-10);
        assert!(rep.residual < 1e-12);
        assert!(!rep.ridge_applied);
    }

    #[test]
    fn scalar_drift_fit() {
        let qo = sample_old();
        let (p, _) = solve_analytic(&pair_from(&qo, &(&qo * 2.0)), 0.0).unwrap();
        assert!((p.weights() - DMatrix::identity(3, 3) * 2.0).norm() < 1e-10);
    }

    #[test]
    fn singular_policies() {
        // rank one design
        let qo = dmatrix![1.0, 1.0; 2.0, 2.0; 3.0, 3.0];
        let pair = pair_from(&qo, &qo);
        let strict = AnalyticOptions {
            singular_policy: SingularPolicy::Strict,
            ..AnalyticOptions::default()
        };
        assert!(matches!(solve_analytic_with(&pair, &strict), Err(Error::Singular { .. })));
        let (p, rep) = solve_analytic_with(&pair, &AnalyticOptions::default()).unwrap();
        assert!(rep.ridge_applied);
        assert!(p.weights().iter().all(|v| v.is_finite()));
        // fitted map still reproduces the targets on the observed subspace
        assert!(mean_squared_residual(&pair, &p) < 1e-6);
    }

    #[test]
    fn affine_fit_recovers_bias() {
        let qo = sample_old();
        let w = dmatrix![1.0, 0.2, 0.0; 0.0, 0.9, -0.1; 0.3, 0.0, 1.1];
        let b = dvector![0.5, -1.0, 2.0];
        let truth = Projector::affine(w.clone(), Some(b.clone())).unwrap();
        let qn = truth.apply_rows(&qo);
        let opts = AnalyticOptions {
            affine: true,
            ..AnalyticOptions::default()
        };
        let (p, rep) = solve_analytic_with(&pair_from(&qo, &qn), &opts).unwrap();
        assert!((p.weights() - w).norm() < 1e-9);
        assert!((p.bias().unwrap() - b).norm() < 1e-9);
        assert!(rep.residual < 1e-12);
    }

    #[test]
    fn zero_steps_returns_init() {
        let qo = sample_old();
        let pair = pair_from(&qo, &(&qo * 1.5));
        let init = Projector::identity(3);
        let (p, rep) = solve_gradient_descent(&pair, &init, 0.01, 0).unwrap();
        assert_eq!(p, init);
        assert!((rep.residual - mean_squared_residual(&pair, &init)).abs() < 1e-12);
    }

    #[test]
    fn gd_diverges_with_huge_step() {
        let qo = sample_old() * 100.0;
        let pair = pair_from(&qo, &(&qo * 2.0));
        let err = solve_gradient_descent(&pair, &Projector::identity(3), 10.0, 2000).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn evolve_identity_and_scalar() {
        let mut t = PrototypeTable::new(2);
        t.insert(0, dvector![1.0, -1.0], 2).unwrap();
        t.insert(1, dvector![3.0, 4.0], 3).unwrap();
        let old: BTreeSet<_> = [0].into();
        let same = evolve_prototypes(&t, &Projector::identity(2), &old).unwrap();
        assert_eq!(same.prototype(0), t.prototype(0));
        assert_eq!(same.get(0).unwrap().aligned_task, 3);
        assert_eq!(same.get(1), t.get(1));

        let twice = Projector::from_weights(DMatrix::identity(2, 2) * 2.0).unwrap();
        let scaled = evolve_prototypes(&t, &twice, &old).unwrap();
        assert_eq!(scaled.prototype(0).unwrap(), &dvector![2.0, -2.0]);
        assert_eq!(scaled.prototype(1).unwrap(), &dvector![3.0, 4.0]);
        assert_eq!(t.prototype(0).unwrap(), &dvector![1.0, -1.0]);
    }

    #[test]
    fn evolve_missing_class() {
        let t = PrototypeTable::new(2);
        let old: BTreeSet<_> = [5].into();
        assert!(matches!(
            evolve_prototypes(&t, &Projector::identity(2), &old),
            Err(Error::MissingClass(5))
        ));
    }

    #[test]
    fn projector_validation() {
        assert!(Projector::from_weights(DMatrix::zeros(2, 3)).is_err());
        assert!(Projector::from_weights(dmatrix![f64::NAN]).is_err());
    }
}
