use std::collections::BTreeMap;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::s4d::{argmax, softmax, S4dModel};
use super::ClassifyResult;
use crate::features::FeatureTensor;

/// Anything that maps one `[features × steps]` window to class probabilities.
pub trait Classifier {
    fn n_classes(&self) -> usize;
    fn predict_proba(&self, x: ArrayView2<f64>) -> ClassifyResult<Vec<f64>>;
}

impl Classifier for S4dModel {
    fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn predict_proba(&self, x: ArrayView2<f64>) -> ClassifyResult<Vec<f64>> {
        Ok(softmax(self.forward_conv(x)?.view()).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub per_class_recall: Vec<f64>,
    pub n: usize,
}

pub fn evaluate_labels(truth: &[usize], predicted: &[usize], n_classes: usize) -> Evaluation {
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let n = truth.len();
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let per_class_recall = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[c] as f64 / total as f64
            }
        })
        .collect();
    Evaluation {
        confusion,
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        per_class_recall,
        n,
    }
}

/// Per-window argmax predictions.
pub fn predict_labels(model: &dyn Classifier, set: &FeatureTensor) -> ClassifyResult<Vec<usize>> {
    set.data
        .axis_iter(Axis(0))
        .map(|x| model.predict_proba(x).map(|p| argmax(ndarray::ArrayView1::from(&p[..]))))
        .collect()
}

pub fn evaluate(model: &dyn Classifier, test_set: &FeatureTensor) -> ClassifyResult<Evaluation> {
    let predicted = predict_labels(model, test_set)?;
    Ok(evaluate_labels(&test_set.labels, &predicted, model.n_classes()))
}

/// Accuracy of a per-trial majority vote over each parent epoch's windows
/// (ties go to the lowest class id).
pub fn trial_majority_accuracy(set: &FeatureTensor, predicted: &[usize], n_classes: usize) -> f64 {
    let mut votes: BTreeMap<usize, (usize, Vec<usize>)> = BTreeMap::new();
    for ((origin, &label), &p) in set.origins.iter().zip(&set.labels).zip(predicted) {
        let entry = votes.entry(origin.epoch).or_insert_with(|| (label, vec![0; n_classes]));
        entry.1[p] += 1;
    }
    if votes.is_empty() {
        return 0.0;
    }
    let correct = votes
        .values()
        .filter(|(label, counts)| {
            let best = counts.iter().enumerate().fold((0, 0), |b, (c, &n)| if n > b.1 { (c, n) } else { b }).0;
            best == *label
        })
        .count();
    correct as f64 / votes.len() as f64
}
