use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{RelationLabel, NUM_CLASSES};
use crate::tensor::{Real, Tensor};

/// Floor applied to the true-class probability before the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;
/// Allowed deviation of a probability row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;

/// Per-class loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f32; NUM_CLASSES]", into = "[f32; NUM_CLASSES]")]
pub struct LossWeights([f32; NUM_CLASSES]);

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights([0.8, 0.8, 0.8, 0.8, 0.1])
    }
}

impl LossWeights {
    pub fn new(weights: [f32; NUM_CLASSES]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::invalid(format!("loss weights {weights:?} must all be positive")));
        }
        Ok(LossWeights(weights))
    }

    pub fn get(&self, label: RelationLabel) -> f32 {
        self.0[label.index()]
    }

    pub fn as_array(&self) -> [f32; NUM_CLASSES] {
        self.0
    }
}

impl TryFrom<[f32; NUM_CLASSES]> for LossWeights {
    type Error = Error;

    fn try_from(w: [f32; NUM_CLASSES]) -> Result<Self> {
        LossWeights::new(w)
    }
}

impl From<LossWeights> for [f32; NUM_CLASSES] {
    fn from(w: LossWeights) -> Self {
        w.0
    }
}

fn check_rows<T: Real>(pred: &Tensor<T>, truth: &[RelationLabel]) -> Result<()> {
    if pred.shape() != [truth.len(), NUM_CLASSES] {
        return Err(Error::shape(format!(
            "prediction shape {:?} for {} labels",
            pred.shape(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    for (i, row) in pred.data().chunks(NUM_CLASSES).enumerate() {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|v| !(v.as_f64() >= 0.0)) {
            return Err(Error::invalid(format!("row {i} is not a probability distribution (sum {sum})")));
        }
    }
    Ok(())
}

/// Batch mean of `-w[c]·ln(max(p[c], 1e-12))` over the true classes `c`.
pub fn weighted_ce<T: Real>(pred: &Tensor<T>, truth: &[RelationLabel], w: &LossWeights) -> Result<f64> {
    check_rows(pred, truth)?;
    let total: f64 = pred
        .data()
        .chunks(NUM_CLASSES)
        .zip(truth)
        .map(|(row, &t)| -(w.get(t) as f64) * row[t.index()].as_f64().max(LOG_CLAMP).ln())
        .sum();
    Ok(total / truth.len() as f64)
}

/// Gradient of `weighted_ce(softmax(z))` with respect to the logits `z`:
/// `w[c]·(p - onehot(c)) / batch`.
pub fn weighted_ce_grad<T: Real>(probs: &Tensor<T>, truth: &[RelationLabel], w: &LossWeights) -> Result<Tensor<T>> {
    check_rows(probs, truth)?;
    let scale = 1.0 / truth.len() as f64;
    let mut g = probs.clone();
    for (row, &t) in g.data_mut().chunks_mut(NUM_CLASSES).zip(truth) {
        let k = T::of(w.get(t) as f64 * scale);
        row[t.index()] = row[t.index()] - T::one();
        row.iter_mut().for_each(|v| *v *= k);
    }
    Ok(g)
}
