use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototypes::ClassId;

/// Format tag of serialized model snapshots.
pub const MODEL_FORMAT: &str = "semevo-toy-model/1";

/// Two-layer tanh feature extractor with a bias-free linear classification head.
///
/// `features(x) = tanh(x·W1 + b1)·W2 + b2`, `logits = features·H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub head: DMatrix<f64>,
    /// Class id of each head column.
    pub class_ids: Vec<ClassId>,
}

/// Activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub inputs: DMatrix<f64>,
    pub hidden: DMatrix<f64>,
    pub features: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

/// Gradients with the same layout as [`ToyModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub head: DMatrix<f64>,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let dist = Normal::new(0.0, std).expect("std is positive");
    DMatrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

impl ToyModel {
    pub fn new(in_dim: usize, hidden: usize, dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || dim == 0 {
            return Err(Error::Invalid("toy model layer sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            w1: gaussian(in_dim, hidden, (1.0 / in_dim as f64).sqrt(), &mut rng),
            b1: DVector::zeros(hidden),
            w2: gaussian(hidden, dim, (1.0 / hidden as f64).sqrt(), &mut rng),
            b2: DVector::zeros(dim),
            head: DMatrix::zeros(dim, 0),
            class_ids: Vec::new(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.head.ncols()
    }

    pub fn column_of(&self, class_id: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    /// Appends one head column per new class, initialized with small seeded noise.
    pub fn extend_head(&mut self, new_classes: &[ClassId], seed: u64) -> Result<()> {
        if let Some(c) = new_classes.iter().find(|c| self.class_ids.contains(c)) {
            return Err(Error::Invalid(format!("class {c} already has a head column")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.feature_dim();
        let extra = gaussian(d, new_classes.len(), 0.1 / (d as f64).sqrt(), &mut rng);
        let old = self.num_classes();
        let mut head = DMatrix::zeros(d, old + new_classes.len());
        head.columns_mut(0, old).copy_from(&self.head);
        head.columns_mut(old, new_classes.len()).copy_from(&extra);
        self.head = head;
        self.class_ids.extend_from_slice(new_classes);
        Ok(())
    }

    pub fn forward(&self, inputs: &DMatrix<f64>) -> Result<Forward> {
        if inputs.ncols() != self.in_dim() {
            return Err(Error::Dimension {
                expected: self.in_dim(),
                found: inputs.ncols(),
            });
        }
        let mut hidden = inputs * &self.w1;
        for mut r in hidden.row_iter_mut() {
            r += self.b1.transpose();
        }
        hidden.apply(|v| *v = v.tanh());
        let mut features = &hidden * &self.w2;
        for mut r in features.row_iter_mut() {
            r += self.b2.transpose();
        }
        let logits = &features * &self.head;
        Ok(Forward {
            inputs: inputs.clone(),
            hidden,
            features,
            logits,
        })
    }

    pub fn features(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(inputs)?.features)
    }

    /// Backpropagates gradients given w.r.t. the features and the logits.
    pub fn backward(&self, fwd: &Forward, d_features: &DMatrix<f64>, d_logits: &DMatrix<f64>) -> ModelGrads {
        let head = fwd.features.tr_mul(d_logits);
        let dz = d_features + d_logits * self.head.transpose();
        let w2 = fwd.hidden.tr_mul(&dz);
        let b2 = column_sums(&dz);
        let mut dpre = &dz * self.w2.transpose();
        dpre.zip_apply(&fwd.hidden, |g, h| *g *= 1.0 - h * h);
        let w1 = fwd.inputs.tr_mul(&dpre);
        let b1 = column_sums(&dpre);
        ModelGrads { w1, b1, w2, b2, head }
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.head.len()
    }

    /// All parameters in a fixed order (w1, b1, w2, b2, head; column-major within each).
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .chain(self.head.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.head.iter_mut())
    }

    /// `self -= lr · grads`
    pub fn sgd_step(&mut self, grads: &ModelGrads, lr: f64) {
        self.w1 -= &grads.w1 * lr;
        self.b1 -= &grads.b1 * lr;
        self.w2 -= &grads.w2 * lr;
        self.b2 -= &grads.b2 * lr;
        self.head -= &grads.head * lr;
    }

    /// Frobenius norm of the extractor parameter difference (head excluded).
    pub fn extractor_distance(&self, other: &ToyModel) -> f64 {
        ((&self.w1 - &other.w1).norm_squared()
            + (&self.b1 - &other.b1).norm_squared()
            + (&self.w2 - &other.w2).norm_squared()
            + (&self.b2 - &other.b2).norm_squared())
        .sqrt()
    }

    pub fn to_json(&self) -> Result<String> {
        let snapshot = ModelSnapshot {
            format: MODEL_FORMAT.to_string(),
            model: self.clone(),
        };
        serde_json::to_string(&snapshot).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snapshot: ModelSnapshot = serde_json::from_str(text).map_err(|e| Error::Serialize(e.to_string()))?;
        if snapshot.format != MODEL_FORMAT {
            return Err(Error::Serialize(format!("unsupported model format {}", snapshot.format)));
        }
        Ok(snapshot.model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelSnapshot {
    format: String,
    model: ToyModel,
}

impl ModelGrads {
    pub fn zeros_like(model: &ToyModel) -> Self {
        Self {
            w1: DMatrix::zeros(model.w1.nrows(), model.w1.ncols()),
            b1: DVector::zeros(model.b1.len()),
            w2: DMatrix::zeros(model.w2.nrows(), model.w2.ncols()),
            b2: DVector::zeros(model.b2.len()),
            head: DMatrix::zeros(model.head.nrows(), model.head.ncols()),
        }
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &ModelGrads, scale: f64) {
        self.w1 += &other.w1 * scale;
        self.b1 += &other.b1 * scale;
        self.w2 += &other.w2 * scale;
        self.b2 += &other.b2 * scale;
        self.head += &other.head * scale;
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .chain(self.head.iter())
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|v| *v == 0.0)
    }
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    m.row_sum().transpose()
}
