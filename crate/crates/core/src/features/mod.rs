//! Morlet time-frequency power and CSP log-variance features, sliding
//! windows over epochs, and epoch-grouped stratified splitting.

pub mod csp;
pub mod morlet;
pub mod scaler;
pub mod split;
pub mod window;

pub use csp::{csp_fit, csp_transform, CspModel};
pub use morlet::{morlet_power, MorletBank};
pub use scaler::FeatureScaler;
pub use split::{stratified_split, stratified_split_indices};
pub use window::{window_epochs, window_offsets};

use ndarray::{concatenate, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{EpochOrigin, EpochSet};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("CSP fit failed: {0}")]
    Fit(String),
    #[error("non-finite feature values: {0}")]
    Numeric(String),
}

pub type FeatureResult<T> = Result<T, FeatureError>;

/// Feature extraction settings, as stored in configs and model bundles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub freqs_hz: Vec<f64>,
    pub n_cycles: f64,
    pub time_decim: usize,
    /// CSP filters per class; 0 disables the CSP block.
    pub csp_components: usize,
    pub window_s: f64,
    pub stride_s: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            freqs_hz: (0..14).map(|i| 6.0 + 2.0 * i as f64).collect(),
            n_cycles: 2.0,
            time_decim: 3,
            csp_components: 4,
            window_s: 1.0,
            stride_s: 2.0 / 3.0,
        }
    }
}

/// Per-window feature sequences plus an optional static block.
#[derive(Debug, Clone)]
pub struct FeatureTensor {
    /// `[n_windows × feature_channels × time_steps]`.
    pub data: Array3<f64>,
    /// `[n_windows × n_static]`; zero columns once stacked.
    pub static_block: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub origins: Vec<EpochOrigin>,
}

impl FeatureTensor {
    pub fn n_windows(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_features(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn n_steps(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn validate(&self) -> FeatureResult<()> {
        let n = self.n_windows();
        if self.labels.len() != n || self.origins.len() != n || self.static_block.nrows() != n {
            return Err(FeatureError::Shape(format!(
                "{n} windows but {} labels, {} origins, {} static rows",
                self.labels.len(),
                self.origins.len(),
                self.static_block.nrows()
            )));
        }
        if self.data.iter().chain(self.static_block.iter()).any(|v| !v.is_finite()) {
            return Err(FeatureError::Numeric("feature tensor contains NaN or Inf".into()));
        }
        Ok(())
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), rows),
            static_block: self.static_block.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            class_names: self.class_names.clone(),
            origins: rows.iter().map(|&r| self.origins[r]).collect(),
        }
    }
}

/// Broadcast the static block along time and append it as extra channels.
pub fn stack_features(morlet_part: &FeatureTensor, csp_part: &Array2<f64>) -> FeatureResult<FeatureTensor> {
    let n = morlet_part.n_windows();
    if csp_part.nrows() != n {
        return Err(FeatureError::Shape(format!(
            "{n} Morlet windows but {} CSP rows",
            csp_part.nrows()
        )));
    }
    let t = morlet_part.n_steps();
    let k = csp_part.ncols();
    let broadcast = Array3::from_shape_fn((n, k, t), |(i, j, _)| csp_part[(i, j)]);
    let data = concatenate(Axis(1), &[morlet_part.data.view(), broadcast.view()])
        .map_err(|e| FeatureError::Shape(e.to_string()))?;
    Ok(FeatureTensor {
        data,
        static_block: Array2::zeros((n, 0)),
        labels: morlet_part.labels.clone(),
        class_names: morlet_part.class_names.clone(),
        origins: morlet_part.origins.clone(),
    })
}

/// Fitted feature chain: Morlet bank, optional CSP and the feature scaler.
#[derive(Debug, Clone)]
pub struct FeaturePipeline {
    pub config: FeatureConfig,
    pub bank: MorletBank,
    pub csp: Option<CspModel>,
    pub scaler: FeatureScaler,
}

impl FeaturePipeline {
    /// Fit CSP on the training epochs, then window them and fit the scaler.
    /// Returns the pipeline and the scaled training features.
    pub fn fit(config: &FeatureConfig, train: &EpochSet) -> FeatureResult<(Self, FeatureTensor)> {
        let bank = MorletBank::new(&config.freqs_hz, config.n_cycles, config.time_decim, train.sample_rate_hz)?;
        let csp = if config.csp_components > 0 {
            Some(csp_fit(train, config.csp_components)?)
        } else {
            None
        };
        let raw = raw_features(&bank, csp.as_ref(), config, train)?;
        let scaler = FeatureScaler::fit(&raw, bank.n_features(train.n_channels()))?;
        let scaled = scaler.transform(&raw)?;
        Ok((Self { config: config.clone(), bank, csp, scaler }, scaled))
    }

    /// Window `epochs` and compute scaled, stacked features.
    pub fn transform_epochs(&self, epochs: &EpochSet) -> FeatureResult<FeatureTensor> {
        let raw = raw_features(&self.bank, self.csp.as_ref(), &self.config, epochs)?;
        self.scaler.transform(&raw)
    }

    /// Features for one already-windowed `[channels × frames]` segment.
    pub fn transform_window(&self, window: ArrayView2<f64>) -> FeatureResult<Array2<f64>> {
        let mut out = self.bank.power_window(window)?;
        if let Some(csp) = &self.csp {
            let (static_row, _) = csp.transform_window(window)?;
            let t = out.ncols();
            let block = Array2::from_shape_fn((static_row.len(), t), |(j, _)| static_row[j]);
            out = concatenate(Axis(0), &[out.view(), block.view()]).map_err(|e| FeatureError::Shape(e.to_string()))?;
        }
        self.scaler.transform_window(&mut out)?;
        Ok(out)
    }

    pub fn window_frames(&self) -> usize {
        (self.config.window_s * self.bank.sample_rate_hz).round() as usize
    }

    pub fn n_features(&self, n_channels: usize) -> usize {
        self.bank.n_features(n_channels) + self.csp.as_ref().map_or(0, CspModel::n_features)
    }
}

fn raw_features(
    bank: &MorletBank,
    csp: Option<&CspModel>,
    config: &FeatureConfig,
    epochs: &EpochSet,
) -> FeatureResult<FeatureTensor> {
    let windows = window_epochs(epochs, config.window_s, config.stride_s)?;
    let morlet = bank.power(&windows)?;
    let static_block = match csp {
        Some(model) => csp_transform(model, &windows)?.0,
        None => Array2::zeros((windows.n_epochs(), 0)),
    };
    stack_features(&morlet, &static_block)
}
