use ndarray::{Array1, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::s4d::{argmax, gelu, softmax, Kernels, S4dModel};
use super::{ClassifyError, ClassifyResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionWithConfidence {
    /// Mean class probabilities over the passes.
    pub mean: Vec<f64>,
    /// Per-class standard deviation over the passes.
    pub std: Vec<f64>,
    pub label: usize,
}

/// Monte-Carlo dropout prediction; kernels are computed for the input length.
pub fn mc_dropout_predict(
    model: &S4dModel,
    input: ArrayView2<f64>,
    n_passes: usize,
    seed: u64,
) -> ClassifyResult<PredictionWithConfidence> {
    let kernels = model.kernels(input.ncols());
    mc_dropout_predict_with(model, &kernels, input, n_passes, seed)
}

/// Monte-Carlo dropout prediction over precomputed kernels. The first
/// layer's pre-dropout activations are shared by all passes.
pub fn mc_dropout_predict_with(
    model: &S4dModel,
    kernels: &Kernels,
    input: ArrayView2<f64>,
    n_passes: usize,
    seed: u64,
) -> ClassifyResult<PredictionWithConfidence> {
    if n_passes < 2 {
        return Err(ClassifyError::Parameter(format!("MC dropout needs at least 2 passes, got {n_passes}")));
    }
    model.check_input(&input)?;
    let k = model.config.n_classes;
    let p = model.config.dropout;
    if p == 0.0 {
        let probs = softmax(model.forward_with(kernels, input)?.view());
        return Ok(PredictionWithConfidence {
            label: argmax(probs.view()),
            mean: probs.to_vec(),
            std: vec![0.0; k],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u0 = model.encode(&input);
    let act0 = model.layer_ssm(0, kernels, &u0).mapv(gelu);
    let keep = 1.0 / (1.0 - p);
    let mut sum = Array1::<f64>::zeros(k);
    let mut sum_sq = Array1::<f64>::zeros(k);
    for _ in 0..n_passes {
        let mut act = act0.clone();
        act.mapv_inplace(|v| if rng.gen::<f64>() < p { 0.0 } else { v * keep });
        let mut u = model.mix(0, &act, &u0);
        for li in 1..model.layers.len() {
            let mut act = model.layer_ssm(li, kernels, &u).mapv(gelu);
            act.mapv_inplace(|v| if rng.gen::<f64>() < p { 0.0 } else { v * keep });
            u = model.mix(li, &act, &u);
        }
        let (_, logits) = model.head(&u);
        let probs = softmax(logits.view());
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(ClassifyError::Numeric { layer: model.layers.len(), detail: "non-finite MC probabilities".into() });
        }
        sum_sq += &probs.mapv(|v| v * v);
        sum += &probs;
    }
    let n = n_passes as f64;
    let mean = &sum / n;
    let std: Vec<f64> = sum_sq.iter().zip(mean.iter()).map(|(s, m)| (s / n - m * m).max(0.0).sqrt()).collect();
    let total = mean.sum();
    let mean = mean / total;
    Ok(PredictionWithConfidence { label: argmax(mean.view()), mean: mean.to_vec(), std })
}
