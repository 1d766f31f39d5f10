use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::eval::Classifier;
use super::s4d::softmax;
use super::{ClassifyError, ClassifyResult};
use crate::features::FeatureTensor;

/// Mean over time of every feature channel: `[n × features]`.
pub fn time_pooled(set: &FeatureTensor) -> Array2<f64> {
    set.data.mean_axis(Axis(2)).expect("non-empty time axis")
}

fn pool_window(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(1)).expect("non-empty time axis")
}

/// Euclidean k-nearest-neighbours over time-pooled features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub n_classes: usize,
    pub points: Array2<f64>,
    pub labels: Vec<usize>,
}

impl KnnModel {
    pub fn fit(points: Array2<f64>, labels: Vec<usize>, k: usize, n_classes: usize) -> ClassifyResult<Self> {
        if k == 0 || k > points.nrows() {
            return Err(ClassifyError::Parameter(format!(
                "k = {k} but the training set has {} points",
                points.nrows()
            )));
        }
        if labels.len() != points.nrows() {
            return Err(ClassifyError::Shape("labels and points differ in count".into()));
        }
        Ok(Self { k, n_classes, points, labels })
    }

    pub fn fit_tensor(set: &FeatureTensor, k: usize) -> ClassifyResult<Self> {
        Self::fit(time_pooled(set), set.labels.clone(), k, set.class_names.len())
    }

    /// Vote fractions among the `k` nearest points; ties between equal
    /// distances resolve by training order.
    pub fn vote(&self, q: ArrayView1<f64>) -> ClassifyResult<Vec<f64>> {
        if q.len() != self.points.ncols() {
            return Err(ClassifyError::Shape(format!(
                "kNN fitted on {} features, got {}",
                self.points.ncols(),
                q.len()
            )));
        }
        let mut d: Vec<(f64, usize)> = self
            .points
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(i, p)| (p.iter().zip(q.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0.0; self.n_classes];
        for &(_, i) in d.iter().take(self.k) {
            votes[self.labels[i]] += 1.0 / self.k as f64;
        }
        Ok(votes)
    }
}

impl Classifier for KnnModel {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict_proba(&self, x: ArrayView2<f64>) -> ClassifyResult<Vec<f64>> {
        self.vote(pool_window(x).view())
    }
}

/// Multinomial logistic regression with an L2 penalty, fitted by full-batch
/// gradient descent on time-pooled features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// `[n_classes × features]`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub l2: f64,
}

impl LinearModel {
    pub fn fit(points: &Array2<f64>, labels: &[usize], n_classes: usize, l2: f64, iterations: usize) -> ClassifyResult<Self> {
        let (n, f) = points.dim();
        if n == 0 || labels.len() != n {
            return Err(ClassifyError::Shape("empty or mislabelled training set".into()));
        }
        let mut w = Array2::<f64>::zeros((n_classes, f));
        let mut b = Array1::<f64>::zeros(n_classes);
        // Step size from the Lipschitz bound of the softmax loss.
        let max_norm = points.axis_iter(Axis(0)).map(|r| r.dot(&r)).fold(0.0, f64::max);
        let lr = 1.0 / (0.5 * (max_norm + 1.0) + l2);
        for _ in 0..iterations {
            let mut logits = points.dot(&w.t());
            logits += &b.view().insert_axis(Axis(0));
            let mut g = Array2::zeros((n, n_classes));
            for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
                let mut p = softmax(row);
                p[labels[i]] -= 1.0;
                g.row_mut(i).assign(&(p / n as f64));
            }
            let gw = g.t().dot(points) + &(&w * l2);
            let gb = g.sum_axis(Axis(0));
            w -= &(gw * lr);
            b -= &(gb * lr);
        }
        Ok(Self { weights: w, bias: b, l2 })
    }

    pub fn fit_tensor(set: &FeatureTensor, l2: f64, iterations: usize) -> ClassifyResult<Self> {
        Self::fit(&time_pooled(set), &set.labels, set.class_names.len(), l2, iterations)
    }

    pub fn proba(&self, q: ArrayView1<f64>) -> ClassifyResult<Vec<f64>> {
        if q.len() != self.weights.ncols() {
            return Err(ClassifyError::Shape(format!(
                "linear model fitted on {} features, got {}",
                self.weights.ncols(),
                q.len()
            )));
        }
        Ok(softmax((self.weights.dot(&q) + &self.bias).view()).to_vec())
    }
}

impl Classifier for LinearModel {
    fn n_classes(&self) -> usize {
        self.bias.len()
    }

    fn predict_proba(&self, x: ArrayView2<f64>) -> ClassifyResult<Vec<f64>> {
        self.proba(pool_window(x).view())
    }
}
