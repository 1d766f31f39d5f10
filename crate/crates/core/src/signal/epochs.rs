use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use super::types::{EpochOrigin, EpochSet, NormStats, Recording};
use super::{SignalError, SignalResult};

/// Marker label → class name, as read from a mapping file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassMapping {
    pub labels: BTreeMap<String, String>,
}

impl ClassMapping {
    pub fn new<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self { labels: pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect() }
    }

    /// Sorted, de-duplicated class names; class ids index into this list.
    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.labels.values().cloned().collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn class_of(&self, marker_label: &str) -> Option<&str> {
        self.labels.get(marker_label).map(String::as_str)
    }

    pub fn load(path: impl AsRef<Path>) -> SignalResult<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> SignalResult<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Epoch window and baseline, seconds relative to the epoching marker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochParams {
    pub tmin: f64,
    pub tmax: f64,
    pub baseline: Option<(f64, f64)>,
}

impl Default for EpochParams {
    /// Task-onset aligned 3 s epochs; the baseline is the half second before
    /// the 1 s cue, i.e. `[-1.5, -1.0]` relative to task onset.
    fn default() -> Self {
        Self { tmin: 0.0, tmax: 3.0, baseline: Some((-1.5, -1.0)) }
    }
}

/// Cut one epoch per recognized marker and subtract the per-channel baseline mean.
///
/// Returns the epochs and the number of recognized markers skipped because
/// their window ran past the recording edges.
pub fn epoch_and_baseline(
    rec: &Recording,
    mapping: &ClassMapping,
    params: &EpochParams,
) -> SignalResult<(EpochSet, usize)> {
    if !(params.tmin < params.tmax) {
        return Err(SignalError::Parameter(format!(
            "tmin ({}) must be < tmax ({})",
            params.tmin, params.tmax
        )));
    }
    if let Some((b0, b1)) = params.baseline {
        if !(b0 < b1) {
            return Err(SignalError::Parameter("baseline start must precede its end".into()));
        }
        if b1 > params.tmax {
            return Err(SignalError::Parameter("baseline must end within the epoch or before it".into()));
        }
    }
    let fs = rec.montage.sample_rate_hz;
    let n_frames = ((params.tmax - params.tmin) * fs).round() as usize;
    let class_names = mapping.class_names();
    let n_ch = rec.montage.n_channels();
    let total = rec.n_frames() as i64;

    let mut data: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = 0usize;
    for marker in &rec.markers {
        let Some(class) = mapping.class_of(&marker.label) else { continue };
        let start = ((marker.timestamp + params.tmin) * fs).round() as i64;
        let end = start + n_frames as i64;
        let base = params.baseline.map(|(b0, b1)| {
            (((marker.timestamp + b0) * fs).round() as i64, ((marker.timestamp + b1) * fs).round() as i64)
        });
        let lo = base.map_or(start, |(b0, _)| b0.min(start));
        let hi = base.map_or(end, |(_, b1)| b1.max(end));
        if lo < 0 || hi > total {
            skipped += 1;
            continue;
        }
        let label = class_names.iter().position(|c| c == class).expect("class from mapping");
        for ch in 0..n_ch {
            let row = rec.samples.row(ch);
            let offset = match base {
                Some((b0, b1)) if b1 > b0 => {
                    let seg = row.slice(ndarray::s![b0 as usize..b1 as usize]);
                    seg.sum() / seg.len() as f64
                }
                _ => 0.0,
            };
            data.extend(row.slice(ndarray::s![start as usize..end as usize]).iter().map(|v| v - offset));
        }
        labels.push(label);
    }
    if skipped > 0 {
        warn!("{skipped} marker(s) too close to the recording edge were skipped");
    }
    if labels.is_empty() {
        return Err(SignalError::NoEpochs(format!(
            "no recognized markers in session {} (mapping has {} labels)",
            rec.session_id,
            mapping.labels.len()
        )));
    }
    let n = labels.len();
    let epochs = Array3::from_shape_vec((n, n_ch, n_frames), data).expect("epoch layout");
    Ok((
        EpochSet {
            epochs,
            labels,
            class_names,
            channel_names: rec.montage.channel_names.clone(),
            sample_rate_hz: fs,
            tmin: params.tmin,
            tmax: params.tmax,
            baseline: params.baseline,
            norm: None,
            origins: (0..n).map(|epoch| EpochOrigin { epoch, offset: 0 }).collect(),
        },
        skipped,
    ))
}

const VARIANCE_GUARD: f64 = 1e-12;

/// Per-channel statistics over every epoch and frame.
pub fn fit_norm_stats(set: &EpochSet) -> NormStats {
    let n_ch = set.n_channels();
    let mut mean = vec![0.0; n_ch];
    let mut std = vec![1.0; n_ch];
    let mut flagged = Vec::new();
    for ch in 0..n_ch {
        let view = set.epochs.index_axis(Axis(1), ch);
        let n = view.len() as f64;
        let m = view.sum() / n;
        let var = view.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        mean[ch] = m;
        if var > VARIANCE_GUARD {
            std[ch] = var.sqrt();
        } else {
            flagged.push(ch);
        }
    }
    NormStats { mean, std, flagged }
}

/// Z-score each channel with `stats`, or with statistics fitted on `set` itself.
pub fn normalize_epochs(set: &EpochSet, stats: Option<&NormStats>) -> SignalResult<(EpochSet, NormStats)> {
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != set.n_channels() || s.std.len() != set.n_channels() {
                return Err(SignalError::Shape(format!(
                    "normalization stats cover {} channels, epochs have {}",
                    s.mean.len(),
                    set.n_channels()
                )));
            }
            s.clone()
        }
        None => fit_norm_stats(set),
    };
    let mut out = set.clone();
    for (ch, mut lane) in out.epochs.axis_iter_mut(Axis(1)).enumerate() {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        lane.mapv_inplace(|v| (v - m) / s);
    }
    out.norm = Some(stats.clone());
    Ok((out, stats))
}
