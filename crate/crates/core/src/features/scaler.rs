use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureResult, FeatureTensor};

/// Floor added to Morlet power before the log.
const POWER_FLOOR: f64 = 1e-10;

/// Log-compresses Morlet power rows and z-scores every feature channel with
/// training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    /// Leading feature channels that hold power and get `ln(p + floor)`.
    pub log_channels: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(stacked: &FeatureTensor, log_channels: usize) -> FeatureResult<Self> {
        let n_feat = stacked.n_features();
        if log_channels > n_feat {
            return Err(FeatureError::Parameter(format!(
                "{log_channels} log channels but only {n_feat} features"
            )));
        }
        if stacked.n_windows() == 0 {
            return Err(FeatureError::Parameter("cannot fit a scaler on zero windows".into()));
        }
        let mut mean = Vec::with_capacity(n_feat);
        let mut std = Vec::with_capacity(n_feat);
        for (j, lane) in stacked.data.axis_iter(Axis(1)).enumerate() {
            let vals: Vec<f64> = if j < log_channels {
                lane.iter().map(|&p| (p + POWER_FLOOR).ln()).collect()
            } else {
                lane.iter().copied().collect()
            };
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            mean.push(m);
            std.push(if s > 1e-12 { s } else { 1.0 });
        }
        Ok(Self { log_channels, mean, std })
    }

    pub fn transform(&self, stacked: &FeatureTensor) -> FeatureResult<FeatureTensor> {
        if stacked.n_features() != self.mean.len() {
            return Err(FeatureError::Shape(format!(
                "scaler fitted on {} features, got {}",
                self.mean.len(),
                stacked.n_features()
            )));
        }
        let mut out = stacked.clone();
        for (j, mut lane) in out.data.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s, log) = (self.mean[j], self.std[j], j < self.log_channels);
            lane.mapv_inplace(|v| (if log { (v + POWER_FLOOR).ln() } else { v } - m) / s);
        }
        out.validate()?;
        Ok(out)
    }

    /// In-place scaling of one `[features × steps]` window.
    pub fn transform_window(&self, window: &mut Array2<f64>) -> FeatureResult<()> {
        if window.nrows() != self.mean.len() {
            return Err(FeatureError::Shape(format!(
                "scaler fitted on {} features, got {}",
                self.mean.len(),
                window.nrows()
            )));
        }
        for (j, mut row) in window.rows_mut().into_iter().enumerate() {
            let (m, s, log) = (self.mean[j], self.std[j], j < self.log_channels);
            row.mapv_inplace(|v| (if log { (v + POWER_FLOOR).ln() } else { v } - m) / s);
        }
        if window.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::Numeric("scaled window contains NaN or Inf".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::EpochOrigin;
    use ndarray::Array3;

    fn tensor() -> FeatureTensor {
        FeatureTensor {
            data: Array3::from_shape_fn((6, 3, 5), |(i, j, k)| 1.0 + (i * 7 + j * 3 + k) as f64),
            static_block: Array2::zeros((6, 0)),
            labels: vec![0; 6],
            class_names: vec!["a".into()],
            origins: (0..6).map(|epoch| EpochOrigin { epoch, offset: 0 }).collect(),
        }
    }

    #[test]
    fn fitted_data_is_standardised() {
        let t = tensor();
        let s = FeatureScaler::fit(&t, 2).unwrap();
        let out = s.transform(&t).unwrap();
        for lane in out.data.axis_iter(Axis(1)) {
            assert!(lane.mean().unwrap().abs() < 1e-12);
            assert!((lane.std(0.0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn window_path_matches_tensor_path() {
        let t = tensor();
        let s = FeatureScaler::fit(&t, 2).unwrap();
        let out = s.transform(&t).unwrap();
        let mut w = t.data.index_axis(Axis(0), 4).to_owned();
        s.transform_window(&mut w).unwrap();
        assert_eq!(w, out.data.index_axis(Axis(0), 4));
    }

    #[test]
    fn feature_count_mismatch_is_shape_error() {
        let s = FeatureScaler::fit(&tensor(), 1).unwrap();
        let mut w = Array2::zeros((2, 5));
        assert!(matches!(s.transform_window(&mut w), Err(FeatureError::Shape(_))));
    }
}
