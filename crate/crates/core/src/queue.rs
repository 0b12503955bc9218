//! Paired bounded FIFO feature queues.
//!
//! Row `i` of the old queue and row `i` of the new queue are the same input embedded by
//! the previous and the current encoder. The pair also keeps the sufficient statistics
//! of the least-squares problem (`QoᵀQo`, `QoᵀQn`, column sums, `‖Qn‖²`) up to date under
//! pushes and evictions, so a solve does not have to touch every row.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::projector::Projector;
use crate::prototypes::{ClassId, PrototypeTable};

pub const DEFAULT_CAPACITY: usize = 3000;
pub const DEFAULT_NOISE_SCALE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueue {
    buffer: VecDeque<DVector<f64>>,
    capacity: usize,
    dim: usize,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Invalid("queue capacity must be positive".into()));
        }
        if dim == 0 {
            return Err(Error::Invalid("queue dimension must be positive".into()));
        }
        Ok(Self {
            buffer: VecDeque::with_capacity(capacity),
            capacity,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Appends at the back and returns whatever fell off the front.
    fn push(&mut self, row: DVector<f64>) -> Option<DVector<f64>> {
        let evicted = if self.buffer.len() == self.capacity {
            self.buffer.pop_front()
        } else {
            None
        };
        self.buffer.push_back(row);
        evicted
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &DVector<f64>> {
        self.buffer.iter()
    }

    /// `len × d` matrix, row `i` is the `i`-th oldest element.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.buffer.len(), self.dim, |i, j| self.buffer[i][j])
    }
}

/// Running least-squares statistics of a [`QueuePair`].
#[derive(Debug, Clone, PartialEq)]
pub struct QueueStats {
    /// `QoᵀQo`
    pub gram: DMatrix<f64>,
    /// `QoᵀQn`
    pub cross: DMatrix<f64>,
    pub sum_old: DVector<f64>,
    pub sum_new: DVector<f64>,
    /// `‖Qn‖²_F`
    pub new_sq_norm: f64,
}

impl QueueStats {
    fn zeros(dim: usize) -> Self {
        Self {
            gram: DMatrix::zeros(dim, dim),
            cross: DMatrix::zeros(dim, dim),
            sum_old: DVector::zeros(dim),
            sum_new: DVector::zeros(dim),
            new_sq_norm: 0.0,
        }
    }

    fn accumulate(&mut self, old: &DVector<f64>, new: &DVector<f64>, sign: f64) {
        self.gram.ger(sign, old, old, 1.0);
        self.cross.ger(sign, old, new, 1.0);
        self.sum_old.axpy(sign, old, 1.0);
        self.sum_new.axpy(sign, new, 1.0);
        self.new_sq_norm += sign * new.norm_squared();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueuePair {
    old_queue: FeatureQueue,
    new_queue: FeatureQueue,
    stats: QueueStats,
    pushes_since_refresh: usize,
}

impl QueuePair {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            old_queue: FeatureQueue::new(capacity, dim)?,
            new_queue: FeatureQueue::new(capacity, dim)?,
            stats: QueueStats::zeros(dim),
            pushes_since_refresh: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.old_queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.old_queue.capacity()
    }

    pub fn dim(&self) -> usize {
        self.old_queue.dim()
    }

    pub fn old_queue(&self) -> &FeatureQueue {
        &self.old_queue
    }

    pub fn new_queue(&self) -> &FeatureQueue {
        &self.new_queue
    }

    pub fn stats(&self) -> &QueueStats {
        &self.stats
    }

    /// Pushes one paired observation.
    pub fn push_row(&mut self, old: DVector<f64>, new: DVector<f64>) -> Result<()> {
        let d = self.dim();
        for v in [&old, &new] {
            if v.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    found: v.len(),
                });
            }
        }
        self.stats.accumulate(&old, &new, 1.0);
        let evicted_old = self.old_queue.push(old);
        let evicted_new = self.new_queue.push(new);
        if let (Some(o), Some(n)) = (evicted_old, evicted_new) {
            self.stats.accumulate(&o, &n, -1.0);
        }
        self.pushes_since_refresh += 1;
        // Bound the rounding error accumulated by add/subtract updates.
        if self.pushes_since_refresh >= self.capacity() {
            self.refresh_stats();
        }
        Ok(())
    }

    /// Appends `k` paired rows at the back, trimming both queues to capacity from the front.
    pub fn push_pair(&mut self, old_features: &DMatrix<f64>, new_features: &DMatrix<f64>) -> Result<()> {
        if old_features.nrows() != new_features.nrows() {
            return Err(Error::Invalid(format!(
                "paired push with {} old rows and {} new rows",
                old_features.nrows(),
                new_features.nrows()
            )));
        }
        let d = self.dim();
        for m in [old_features, new_features] {
            if m.ncols() != d {
                return Err(Error::Dimension {
                    expected: d,
                    found: m.ncols(),
                });
            }
        }
        for i in 0..old_features.nrows() {
            self.push_row(
                old_features.row(i).transpose(),
                new_features.row(i).transpose(),
            )?;
        }
        Ok(())
    }

    /// Recomputes the statistics from the stored rows.
    pub fn refresh_stats(&mut self) {
        let mut stats = QueueStats::zeros(self.dim());
        for (o, n) in self.old_queue.rows().zip(self.new_queue.rows()) {
            stats.accumulate(o, n, 1.0);
        }
        self.stats = stats;
        self.pushes_since_refresh = 0;
    }

    pub fn old_matrix(&self) -> DMatrix<f64> {
        self.old_queue.matrix()
    }

    pub fn new_matrix(&self) -> DMatrix<f64> {
        self.new_queue.matrix()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitWarning {
    /// Zero noise with more rows than classes: the Gram matrix has rank at most the
    /// number of old classes until real features arrive.
    RankDeficientPseudoFeatures { classes: usize, capacity: usize },
}

#[derive(Debug, Clone)]
pub struct PseudoInit {
    pub pair: QueuePair,
    pub warnings: Vec<InitWarning>,
}

/// Fills both queues with `capacity` pseudo-features.
///
/// Each old row is a uniformly chosen old prototype plus `noise_scale · N(0, I)`; the
/// matching new row is its image under `projector`.
pub fn init_with_pseudo_features(
    prototypes: &PrototypeTable,
    projector: &Projector,
    capacity: usize,
    noise_scale: f64,
    rng_seed: u64,
) -> Result<PseudoInit> {
    if prototypes.is_empty() {
        return Err(Error::Empty(
            "old prototype table (the first task has no old classes)",
        ));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::Invalid(format!("noise scale {noise_scale} must be finite and >= 0")));
    }
    let d = prototypes.dim();
    if projector.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            found: projector.dim(),
        });
    }

    let mut warnings = Vec::new();
    if noise_scale == 0.0 && capacity > prototypes.len() {
        log::warn!(
            "pseudo-features without noise: {} classes cannot span a Gram matrix from {capacity} rows",
            prototypes.len()
        );
        warnings.push(InitWarning::RankDeficientPseudoFeatures {
            classes: prototypes.len(),
            capacity,
        });
    }

    let classes: Vec<ClassId> = prototypes.classes().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut pair = QueuePair::new(capacity, d)?;
    for _ in 0..capacity {
        let class_id = classes[rng.random_range(0..classes.len())];
        let proto = prototypes.prototype(class_id).expect("class listed by the table");
        let noise = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let old = proto + noise * noise_scale;
        let new = projector.apply(&old);
        pair.push_row(old, new)?;
    }
    Ok(PseudoInit { pair, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn row(v: f64) -> DVector<f64> {
        dvector![v, -v]
    }

    #[test]
    fn fifo_step_on_full_queue() {
        let mut q = QueuePair::new(3, 2).unwrap();
        for i in 0..3 {
            q.push_row(row(i as f64), row(10.0 + i as f64)).unwrap();
        }
        q.push_row(row(3.0), row(13.0)).unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(q.old_matrix(), dmatrix![1.0, -1.0; 2.0, -2.0; 3.0, -3.0]);
        assert_eq!(q.new_matrix(), dmatrix![11.0, -11.0; 12.0, -12.0; 13.0, -13.0]);
    }

    #[test]
    fn full_replacement() {
        let mut q = QueuePair::new(2, 2).unwrap();
        q.push_row(row(9.0), row(9.0)).unwrap();
        let a = dmatrix![1.0, 2.0; 3.0, 4.0];
        let b = dmatrix![5.0, 6.0; 7.0, 8.0];
        q.push_pair(&a, &b).unwrap();
        assert_eq!(q.old_matrix(), a);
        assert_eq!(q.new_matrix(), b);
    }

    #[test]
    fn push_errors() {
        let mut q = QueuePair::new(4, 2).unwrap();
        let a = dmatrix![1.0, 2.0];
        let b = dmatrix![1.0, 2.0; 3.0, 4.0];
        assert!(matches!(q.push_pair(&a, &b), Err(Error::Invalid(_))));
        let c = dmatrix![1.0, 2.0, 3.0];
        assert!(matches!(q.push_pair(&c, &c), Err(Error::Dimension { .. })));
        assert!(QueuePair::new(0, 2).is_err());
    }

    #[test]
    fn running_stats_match_recomputation() {
        let mut q = QueuePair::new(5, 2).unwrap();
        for i in 0..13 {
            let x = i as f64;
            q.push_row(dvector![x, 1.0 - x], dvector![2.0 * x, x * x]).unwrap();
        }
        let qo = q.old_matrix();
        let qn = q.new_matrix();
        let s = q.stats();
        assert!((&s.gram - qo.transpose() * &qo).norm() < 1e-9);
        assert!((&s.cross - qo.transpose() * &qn).norm() < 1e-9);
        assert!((s.new_sq_norm - qn.norm_squared()).abs() < 1e-9);
    }

    #[test]
    fn zero_noise_single_class_repeats_prototype() {
        let mut t = PrototypeTable::new(2);
        t.insert(4, dvector![1.5, -2.0], 1).unwrap();
        let init = init_with_pseudo_features(&t, &Projector::identity(2), 6, 0.0, 1).unwrap();
        for r in init.pair.old_queue().rows() {
            assert_eq!(r, &dvector![1.5, -2.0]);
        }
        assert_eq!(
            init.warnings,
            vec![InitWarning::RankDeficientPseudoFeatures {
                classes: 1,
                capacity: 6
            }]
        );
    }

    #[test]
    fn identity_projection_copies_rows() {
        let mut t = PrototypeTable::new(3);
        t.insert(0, dvector![1.0, 2.0, 3.0], 1).unwrap();
        t.insert(1, dvector![-1.0, 0.0, 1.0], 1).unwrap();
        let init = init_with_pseudo_features(&t, &Projector::identity(3), 50, 0.3, 9).unwrap();
        assert_eq!(init.pair.len(), 50);
        assert_eq!(init.pair.old_matrix(), init.pair.new_matrix());
        assert!(init.warnings.is_empty());
    }

    #[test]
    fn pseudo_init_errors() {
        let t = PrototypeTable::new(2);
        assert!(matches!(
            init_with_pseudo_features(&t, &Projector::identity(2), 4, 0.1, 0),
            Err(Error::Empty(_))
        ));
        let mut t = PrototypeTable::new(2);
        t.insert(0, dvector![1.0, 0.0], 1).unwrap();
        assert!(init_with_pseudo_features(&t, &Projector::identity(3), 4, 0.1, 0).is_err());
    }
}
