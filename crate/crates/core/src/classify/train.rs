use log::info;
use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::s4d::{argmax, softmax, S4dModel};
use super::{ClassifyError, ClassifyResult};
use crate::features::FeatureTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> ClassifyResult<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(ClassifyError::Config("learning rate, batch size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(ClassifyError::Config("moment coefficients must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochMetrics>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_params: usize,
}

/// First/second-moment optimizer state over the flattened parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    cfg: TrainConfig,
}

impl Adam {
    pub fn new(model: &S4dModel, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.1.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, cfg: cfg.clone() }
    }

    pub fn step(&mut self, model: &mut S4dModel, grad: &S4dModel) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let grads = grad.tensors();
        for (k, p) in model.tensors_mut().into_iter().enumerate() {
            let g = grads[k].1;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= self.cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.cfg.adam_eps);
            }
        }
    }
}

fn check_set(model: &S4dModel, set: &FeatureTensor, what: &str) -> ClassifyResult<()> {
    if set.n_windows() == 0 {
        return Err(ClassifyError::Parameter(format!("{what} set is empty")));
    }
    if set.static_block.ncols() != 0 {
        return Err(ClassifyError::Shape(format!("{what} set has an unstacked static block")));
    }
    if set.n_features() != model.config.d_input {
        return Err(ClassifyError::Shape(format!(
            "{what} set has {} feature channels, model expects {}",
            set.n_features(),
            model.config.d_input
        )));
    }
    if let Some(&l) = set.labels.iter().find(|&&l| l >= model.config.n_classes) {
        return Err(ClassifyError::Parameter(format!("{what} label {l} out of range")));
    }
    Ok(())
}

/// Mean cross-entropy and accuracy with dropout off.
pub fn evaluate_loss(model: &S4dModel, set: &FeatureTensor) -> ClassifyResult<(f64, f64)> {
    let logits = model.forward_batch(&set.data)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &label) in logits.axis_iter(Axis(0)).zip(&set.labels) {
        let p = softmax(row);
        loss -= p[label].max(1e-300).ln();
        if argmax(p.view()) == label {
            correct += 1;
        }
    }
    let n = set.n_windows() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Cross-entropy training with Adam and early stopping on validation loss.
/// The returned model holds the best validation weights.
pub fn train(
    model: &S4dModel,
    train_set: &FeatureTensor,
    val_set: &FeatureTensor,
    cfg: &TrainConfig,
) -> ClassifyResult<(S4dModel, TrainingReport)> {
    cfg.validate()?;
    check_set(model, train_set, "training")?;
    check_set(model, val_set, "validation")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = model.clone();
    let mut adam = Adam::new(&current, cfg);
    let mut best = current.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_set.n_windows()).collect();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(ArrayView2<f64>, usize)> = chunk
                .iter()
                .map(|&i| (train_set.data.index_axis(Axis(0), i), train_set.labels[i]))
                .collect();
            let (loss, ok, grad) = match current.loss_and_grad(&batch, Some(&mut rng)) {
                Ok(r) => r,
                Err(ClassifyError::Numeric { .. }) => {
                    return Err(ClassifyError::Diverged { epoch, checkpoint: Box::new(best) });
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(ClassifyError::Diverged { epoch, checkpoint: Box::new(best) });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
            adam.step(&mut current, &grad);
        }
        let n = train_set.n_windows() as f64;
        let (val_loss, val_accuracy) = match evaluate_loss(&current, val_set) {
            Ok(r) if r.0.is_finite() => r,
            _ => return Err(ClassifyError::Diverged { epoch, checkpoint: Box::new(best) }),
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        };
        info!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}",
            metrics.train_loss, metrics.train_accuracy, val_loss, val_accuracy
        );
        epochs.push(metrics);
        if val_loss < best_loss {
            best_loss = val_loss;
            best = current.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let report = TrainingReport {
        epochs,
        best_epoch,
        stopped_early,
        seed: cfg.seed,
        n_train: train_set.n_windows(),
        n_val: val_set.n_windows(),
        n_params: best.n_params(),
    };
    Ok((best, report))
}
