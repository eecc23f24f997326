use crate::tensor::{Scalar, Tensor};
use crate::{EngineError, Result};

/// Softmax probabilities and mean cross-entropy for one batch.
#[derive(Clone, Debug)]
pub struct CrossEntropy<T> {
    pub loss: T,
    pub probs: Tensor<T>,
    labels: Vec<usize>,
}

/// Row-wise softmax of `(n, classes, 1, 1)` logits.
///
/// Each row is shifted by its maximum before exponentiation, so logits of
/// any finite magnitude are safe.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let classes = logits.item_len();
    let mut data = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(classes.max(1)) {
        let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| T::lit(e / total)));
    }
    Tensor::new([logits.batch(), classes, 1, 1], data).expect("softmax keeps dims")
}

pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<CrossEntropy<T>> {
    let n = logits.batch();
    let classes = logits.item_len();
    if labels.len() != n {
        return Err(EngineError::Input(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(EngineError::Input(format!("label {bad} outside [0, {classes})")));
    }
    if !logits.all_finite() {
        return Err(EngineError::Input("non-finite logits".into()));
    }
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[label];
    }
    Ok(CrossEntropy {
        loss: T::lit(total / n.max(1) as f64),
        probs: softmax(logits),
        labels: labels.to_vec(),
    })
}

impl<T: Scalar> CrossEntropy<T> {
    /// Gradient of the mean loss with respect to the logits.
    pub fn grad(&self) -> Tensor<T> {
        let n = self.probs.batch();
        let classes = self.probs.item_len();
        let scale = T::lit(1.0 / n.max(1) as f64);
        let mut g = self.probs.clone();
        for (i, row) in g.data_mut().chunks_mut(classes).enumerate() {
            row[self.labels[i]] = row[self.labels[i]] - T::one();
            row.iter_mut().for_each(|v| *v = *v * scale);
        }
        g
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}
