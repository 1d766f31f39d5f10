//! Bidirectional S4D sequence classifier with hand-written reverse-mode
//! gradients, Monte-Carlo dropout, kNN / softmax baselines, evaluation and
//! the model bundle format.

pub mod baseline;
pub mod bundle;
pub mod eval;
pub mod mc;
pub mod s4d;
pub mod stream;
pub mod train;

pub use baseline::{time_pooled, KnnModel, LinearModel};
pub use bundle::{load_model, read_bundle, save_model, write_bundle, BundlePreprocessing, ClassifierModel, ModelBundle};
pub use eval::{evaluate, evaluate_labels, predict_labels, trial_majority_accuracy, Classifier, Evaluation};
pub use mc::{mc_dropout_predict, mc_dropout_predict_with, PredictionWithConfidence};
pub use s4d::{argmax, softmax, Kernels, S4dConfig, S4dDirection, S4dLayer, S4dModel};
pub use stream::StreamState;
pub use train::{evaluate_loss, train, Adam, EpochMetrics, TrainConfig, TrainingReport};

use thiserror::Error;

use crate::features::FeatureError;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric failure in layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },
    #[error("training diverged in epoch {epoch}; last good checkpoint kept")]
    Diverged { epoch: usize, checkpoint: Box<s4d::S4dModel> },
    #[error("incompatible bundle version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed model bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type ClassifyResult<T> = Result<T, ClassifyError>;
