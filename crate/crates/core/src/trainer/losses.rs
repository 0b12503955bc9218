//! Cross-entropy, distillation and supervised contrastive losses with analytic gradients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::model::{ModelGrads, ToyModel};
use crate::error::{Error, Result};
use crate::prototypes::ClassId;

pub const DEFAULT_LAMBDA_KD: f64 = 10.0;
pub const DEFAULT_LAMBDA_SCL: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<ClassId>,
}

impl LabeledBatch {
    pub fn new(inputs: DMatrix<f64>, labels: Vec<ClassId>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Invalid(format!(
                "batch has {} rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Empty("batch"));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: DEFAULT_LAMBDA_KD,
            lambda2: DEFAULT_LAMBDA_SCL,
            tau: DEFAULT_TAU,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Invalid(format!("temperature {} must be positive", self.tau)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Invalid("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which samples enter the contrastive denominator for an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SclDenominator {
    /// Other-class samples only.
    Negatives,
    /// Every sample except the anchor.
    AllOthers,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Distill over a softmax renormalized on the old classes (otherwise the full softmax
    /// restricted to them).
    pub kd_renormalize: bool,
    /// L2-normalize embeddings before the contrastive dot products.
    pub scl_normalize: bool,
    pub scl_denominator: SclDenominator,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            kd_renormalize: true,
            scl_normalize: true,
            scl_denominator: SclDenominator::Negatives,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grads: ModelGrads,
    /// Set when no sample in the batch could contribute (contrastive loss only).
    pub degenerate: bool,
}

fn softmax_rows(logits: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mut probs = logits.clone();
    let mut lse = DVector::zeros(logits.nrows());
    for (i, mut row) in probs.row_iter_mut().enumerate() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
        lse[i] = max + sum.ln();
    }
    (probs, lse)
}

/// Mean softmax cross-entropy of the head outputs.
pub fn ce_loss(model: &ToyModel, batch: &LabeledBatch) -> Result<LossOutput> {
    let cols = batch
        .labels
        .iter()
        .map(|&c| {
            model
                .column_of(c)
                .ok_or_else(|| Error::Invalid(format!("label {c} outside the head's {} classes", model.num_classes())))
        })
        .collect::<Result<Vec<_>>>()?;
    let fwd = model.forward(&batch.inputs)?;
    let b = batch.len() as f64;
    let (mut d_logits, lse) = softmax_rows(&fwd.logits);
    let mut value = 0.0;
    for (i, &y) in cols.iter().enumerate() {
        value += lse[i] - fwd.logits[(i, y)];
        d_logits[(i, y)] -= 1.0;
    }
    d_logits /= b;
    let d_features = DMatrix::zeros(fwd.features.nrows(), fwd.features.ncols());
    Ok(LossOutput {
        value: value / b,
        grads: model.backward(&fwd, &d_features, &d_logits),
        degenerate: false,
    })
}

/// Distillation of the old model's class probabilities into the first `old_class_count`
/// outputs of `model`. The old model's outputs are constants.
pub fn kd_loss(
    model: &ToyModel,
    old_model: &ToyModel,
    inputs: &DMatrix<f64>,
    old_class_count: usize,
    renormalize: bool,
) -> Result<LossOutput> {
    if old_class_count == 0 {
        return Ok(LossOutput {
            value: 0.0,
            grads: ModelGrads::zeros_like(model),
            degenerate: false,
        });
    }
    if old_model.num_classes() != old_class_count || old_class_count > model.num_classes() {
        return Err(Error::Invalid(format!(
            "old head has {} classes, expected {old_class_count} <= {}",
            old_model.num_classes(),
            model.num_classes()
        )));
    }
    if model.class_ids[..old_class_count] != old_model.class_ids[..] {
        return Err(Error::Invalid("old head columns are not a prefix of the current head".into()));
    }

    let (targets, _) = softmax_rows(&old_model.forward(inputs)?.logits);
    let fwd = model.forward(inputs)?;
    let b = inputs.nrows() as f64;
    let k = model.num_classes();
    let m = old_class_count;

    let scored = if renormalize {
        fwd.logits.columns(0, m).into_owned()
    } else {
        fwd.logits.clone()
    };
    let (probs, lse) = softmax_rows(&scored);

    let mut value = 0.0;
    let mut d_logits = DMatrix::zeros(fwd.logits.nrows(), k);
    for i in 0..inputs.nrows() {
        let mass: f64 = targets.row(i).sum();
        for j in 0..m {
            value -= targets[(i, j)] * (fwd.logits[(i, j)] - lse[i]);
        }
        for j in 0..probs.ncols() {
            let target = if j < m { targets[(i, j)] } else { 0.0 };
            d_logits[(i, j)] = (probs[(i, j)] * mass - target) / b;
        }
    }
    let d_features = DMatrix::zeros(fwd.features.nrows(), fwd.features.ncols());
    Ok(LossOutput {
        value: value / b,
        grads: model.backward(&fwd, &d_features, &d_logits),
        degenerate: false,
    })
}

#[derive(Debug, Clone)]
pub struct EmbeddingLoss {
    pub value: f64,
    pub grad: DMatrix<f64>,
    pub degenerate: bool,
}

/// Supervised contrastive loss of a batch of embeddings (rows) and its gradient.
///
/// For anchor `i` with positives `P(i)` and denominator set `D(i)`:
/// `Σ_{p∈P(i)} [log Σ_{k∈D(i)} exp(s_ik/τ) − s_ip/τ]`, averaged over all anchors. Anchors
/// with an empty positive or denominator set contribute zero.
pub fn scl_from_embeddings(
    embeddings: &DMatrix<f64>,
    labels: &[ClassId],
    tau: f64,
    options: &LossOptions,
) -> Result<EmbeddingLoss> {
    let n = embeddings.nrows();
    if labels.len() != n {
        return Err(Error::Invalid("label count differs from embedding rows".into()));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Invalid(format!("temperature {tau} must be positive")));
    }
    let norms: Vec<f64> = embeddings.row_iter().map(|r| r.norm()).collect();
    let units = if options.scl_normalize {
        if norms.contains(&0.0) {
            return Err(Error::Degenerate("zero-norm embedding in contrastive batch".into()));
        }
        let mut u = embeddings.clone();
        for (i, mut r) in u.row_iter_mut().enumerate() {
            r /= norms[i];
        }
        u
    } else {
        embeddings.clone()
    };
    let sims = &units * units.transpose() / tau;

    let mut value = 0.0;
    let mut d_sims = DMatrix::zeros(n, n);
    let mut contributing = 0usize;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let denom: Vec<usize> = match options.scl_denominator {
            SclDenominator::Negatives => (0..n).filter(|&j| labels[j] != labels[i]).collect(),
            SclDenominator::AllOthers => (0..n).filter(|&j| j != i).collect(),
        };
        if positives.is_empty() || denom.is_empty() {
            continue;
        }
        contributing += 1;
        let max = denom.iter().map(|&k| sims[(i, k)]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = denom.iter().map(|&k| (sims[(i, k)] - max).exp()).sum();
        let lse = max + sum.ln();
        let np = positives.len() as f64;
        for &p in &positives {
            value += lse - sims[(i, p)];
            d_sims[(i, p)] -= 1.0;
        }
        for &k in &denom {
            d_sims[(i, k)] += np * (sims[(i, k)] - lse).exp();
        }
    }

    let scale = 1.0 / (n as f64);
    let d_units = (&d_sims + d_sims.transpose()) * &units * (scale / tau);
    let grad = if options.scl_normalize {
        let mut g = d_units;
        for (i, mut r) in g.row_iter_mut().enumerate() {
            let u = units.row(i);
            let radial = u.dot(&r);
            r -= u * radial;
            r /= norms[i];
        }
        g
    } else {
        d_units
    };
    Ok(EmbeddingLoss {
        value: value * scale,
        grad,
        degenerate: contributing == 0,
    })
}

/// Supervised contrastive loss on the model's features.
pub fn scl_loss(model: &ToyModel, batch: &LabeledBatch, tau: f64, options: &LossOptions) -> Result<LossOutput> {
    let fwd = model.forward(&batch.inputs)?;
    let emb = scl_from_embeddings(&fwd.features, &batch.labels, tau, options)?;
    let d_logits = DMatrix::zeros(fwd.logits.nrows(), fwd.logits.ncols());
    Ok(LossOutput {
        value: emb.value,
        grads: model.backward(&fwd, &emb.grad, &d_logits),
        degenerate: emb.degenerate,
    })
}

/// `L_ce + λ1·L_kd + λ2·L_scl`; the distillation term is skipped without an old model.
pub fn base_loss(
    model: &ToyModel,
    old_model: Option<&ToyModel>,
    batch: &LabeledBatch,
    weights: &LossWeights,
    options: &LossOptions,
) -> Result<LossOutput> {
    let mut out = ce_loss(model, batch)?;
    if let Some(old) = old_model {
        if weights.lambda1 != 0.0 {
            let kd = kd_loss(model, old, &batch.inputs, old.num_classes(), options.kd_renormalize)?;
            out.value += weights.lambda1 * kd.value;
            out.grads.add_scaled(&kd.grads, weights.lambda1);
        }
    }
    if weights.lambda2 != 0.0 {
        let scl = scl_loss(model, batch, weights.tau, options)?;
        out.value += weights.lambda2 * scl.value;
        out.grads.add_scaled(&scl.grads, weights.lambda2);
        out.degenerate = scl.degenerate;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn model_with_head(head: DMatrix<f64>) -> ToyModel {
        let mut m = ToyModel::new(2, 3, head.nrows(), 1).unwrap();
        let ids: Vec<ClassId> = (0..head.ncols() as u32).collect();
        m.extend_head(&ids, 2).unwrap();
        m.head = head;
        m
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let m = model_with_head(DMatrix::zeros(4, 5));
        let batch = LabeledBatch::new(dmatrix![0.3, -0.2; 1.0, 0.5], vec![0, 3]).unwrap();
        let out = ce_loss(&m, &batch).unwrap();
        assert!((out.value - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_unknown_label() {
        let m = model_with_head(DMatrix::zeros(4, 2));
        let batch = LabeledBatch::new(dmatrix![0.3, -0.2], vec![7]).unwrap();
        assert!(ce_loss(&m, &batch).is_err());
    }

    #[test]
    fn ce_vanishes_with_growing_margin() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 10.0, 100.0] {
            // constant feature e1, so the logits are exactly (margin, 0)
            let mut m = model_with_head(dmatrix![margin, 0.0; 0.0, 0.0]);
            m.w2.fill(0.0);
            m.b2 = nalgebra::dvector![1.0, 0.0];
            let batch = LabeledBatch::new(dmatrix![0.4, 0.1], vec![0]).unwrap();
            let loss = ce_loss(&m, &batch).unwrap().value;
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-40);
    }

    #[test]
    fn kd_without_old_classes_is_zero() {
        let m = model_with_head(DMatrix::zeros(4, 2));
        let out = kd_loss(&m, &m, &dmatrix![1.0, 2.0], 0, true).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grads.is_zero());
    }

    #[test]
    fn kd_matched_distributions() {
        let mut old = ToyModel::new(2, 3, 4, 5).unwrap();
        old.extend_head(&[0, 1, 2], 6).unwrap();
        let mut cur = old.clone();
        cur.extend_head(&[3, 4], 7).unwrap();
        let x = dmatrix![0.5, -1.0; 0.2, 0.9];
        let out = kd_loss(&cur, &old, &x, 3, true).unwrap();
        let (p, _) = softmax_rows(&old.forward(&x).unwrap().logits);
        let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>() / 2.0;
        assert!((out.value - entropy).abs() < 1e-12);
        assert!(out.grads.values().all(|g| g.abs() < 1e-14));
    }

    #[test]
    fn kd_one_hot_target_fully_matched() {
        let big = 800.0;
        let old = model_with_head(dmatrix![big, 0.0; 0.0, 0.0; 0.0, 0.0]);
        let mut cur = old.clone();
        cur.extend_head(&[9], 3).unwrap();
        // features of a positive input are dominated by b2, which we set
        let mut old = old;
        old.b2 = nalgebra::dvector![1.0, 0.0, 0.0];
        old.w2.fill(0.0);
        cur.b2 = old.b2.clone();
        cur.w2.fill(0.0);
        let out = kd_loss(&cur, &old, &dmatrix![0.1, 0.1], 2, true).unwrap();
        assert!(out.value.abs() < 1e-12);
    }

    #[test]
    fn scl_empty_positive_sets_contribute_zero() {
        let z = dmatrix![1.0, 0.0; 0.0, 1.0; -1.0, 0.0];
        let out = scl_from_embeddings(&z, &[0, 1, 2], 1.0, &LossOptions::default()).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.degenerate);
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn scl_partially_degenerate_batch() {
        let z = dmatrix![1.0, 0.0; 0.9, 0.1; 0.0, 1.0];
        let out = scl_from_embeddings(&z, &[0, 0, 1], 0.5, &LossOptions::default()).unwrap();
        assert!(!out.degenerate);
        // anchor 2 has no positive; anchors 0 and 1 each see one positive and one negative
        let u1 = (0.9f64, 0.1f64);
        let n1 = (u1.0 * u1.0 + u1.1 * u1.1).sqrt();
        let (s01, s12) = (u1.0 / n1 / 0.5, u1.1 / n1 / 0.5);
        let expected = ((0.0 - s01) + (s12 - s01)) / 3.0;
        assert!((out.value - expected).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        let w = LossWeights {
            tau: 0.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
