use std::collections::HashSet;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{SignalError, SignalResult};

/// Reference scheme the samples are currently expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceScheme {
    Device,
    CommonAverage,
}

/// Channel layout and sampling rate of a stream or recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Montage {
    pub channel_names: Vec<String>,
    pub sample_rate_hz: f64,
    pub reference_scheme: ReferenceScheme,
}

impl Montage {
    pub fn new(channel_names: Vec<String>, sample_rate_hz: f64) -> SignalResult<Self> {
        let montage = Self {
            channel_names,
            sample_rate_hz,
            reference_scheme: ReferenceScheme::Device,
        };
        montage.validate()?;
        Ok(montage)
    }

    /// The 24-channel 10-20 layout used as the device default.
    pub fn default_24() -> Self {
        let names = [
            "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "FC5", "FC1", "FC2", "FC6", "T7", "C3", "Cz",
            "C4", "T8", "CP5", "CP1", "CP2", "CP6", "P3", "Pz", "P4", "Oz",
        ];
        Self {
            channel_names: names.iter().map(|s| s.to_string()).collect(),
            sample_rate_hz: 250.0,
            reference_scheme: ReferenceScheme::Device,
        }
    }

    pub fn validate(&self) -> SignalResult<()> {
        if self.channel_names.is_empty() {
            return Err(SignalError::Parameter("montage has no channels".into()));
        }
        if !(self.sample_rate_hz > 0.0) || !self.sample_rate_hz.is_finite() {
            return Err(SignalError::Parameter(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.channel_names {
            if !seen.insert(name.as_str()) {
                return Err(SignalError::Parameter(format!("duplicate channel label {name}")));
            }
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.channel_names.iter().position(|c| c == label)
    }

    /// Montage restricted to the given channel indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            channel_names: indices.iter().map(|&i| self.channel_names[i].clone()).collect(),
            sample_rate_hz: self.sample_rate_hz,
            reference_scheme: self.reference_scheme,
        }
    }
}

/// A block of consecutive frames from one stream.
#[derive(Debug, Clone)]
pub struct SampleChunk {
    /// `[channels × frames]`, microvolts.
    pub samples: Array2<f64>,
    /// Stream-clock time of the first frame, seconds.
    pub start_timestamp: f64,
    pub montage: Arc<Montage>,
}

impl SampleChunk {
    pub fn new(samples: Array2<f64>, start_timestamp: f64, montage: Arc<Montage>) -> SignalResult<Self> {
        if samples.ncols() == 0 {
            return Err(SignalError::Shape("chunk must contain at least one frame".into()));
        }
        if samples.nrows() != montage.n_channels() {
            return Err(SignalError::Shape(format!(
                "chunk has {} rows but montage has {} channels",
                samples.nrows(),
                montage.n_channels()
            )));
        }
        Ok(Self { samples, start_timestamp, montage })
    }

    pub fn n_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.samples.ncols()
    }

    /// Timestamp one frame past the end of this chunk.
    pub fn end_timestamp(&self) -> f64 {
        self.start_timestamp + self.n_frames() as f64 / self.montage.sample_rate_hz
    }

    pub fn with_samples(&self, samples: Array2<f64>) -> Self {
        Self {
            samples,
            start_timestamp: self.start_timestamp,
            montage: Arc::clone(&self.montage),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    /// Seconds on the recording's time axis (frame `i` sits at `i / fs`).
    pub timestamp: f64,
    pub label: String,
}

impl Marker {
    pub fn new(timestamp: f64, label: impl Into<String>) -> Self {
        Self { timestamp, label: label.into() }
    }
}

/// A continuous multichannel recording with its event markers.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub montage: Montage,
    /// `[channels × frames]`, microvolts.
    pub samples: Array2<f64>,
    pub markers: Vec<Marker>,
    pub session_id: String,
}

impl Recording {
    pub fn new(
        montage: Montage,
        samples: Array2<f64>,
        mut markers: Vec<Marker>,
        session_id: impl Into<String>,
    ) -> SignalResult<Self> {
        montage.validate()?;
        if samples.nrows() != montage.n_channels() {
            return Err(SignalError::Shape(format!(
                "sample matrix has {} rows, montage has {} channels",
                samples.nrows(),
                montage.n_channels()
            )));
        }
        markers.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        Ok(Self { montage, samples, markers, session_id: session_id.into() })
    }

    pub fn n_frames(&self) -> usize {
        self.samples.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames() as f64 / self.montage.sample_rate_hz
    }
}

/// Per-channel z-scoring statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose variance was below the guard and were scaled by 1.
    pub flagged: Vec<usize>,
}

/// Origin of a (possibly windowed) epoch: parent epoch index and frame offset into it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpochOrigin {
    pub epoch: usize,
    pub offset: usize,
}

/// Labeled, equal-length segments cut from continuous data.
#[derive(Debug, Clone)]
pub struct EpochSet {
    /// `[n_epochs × channels × frames]`.
    pub epochs: Array3<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub channel_names: Vec<String>,
    pub sample_rate_hz: f64,
    pub tmin: f64,
    pub tmax: f64,
    pub baseline: Option<(f64, f64)>,
    pub norm: Option<NormStats>,
    pub origins: Vec<EpochOrigin>,
}

impl EpochSet {
    pub fn n_epochs(&self) -> usize {
        self.epochs.shape()[0]
    }

    pub fn n_channels(&self) -> usize {
        self.epochs.shape()[1]
    }

    pub fn n_frames(&self) -> usize {
        self.epochs.shape()[2]
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Subset by row index, keeping every other field.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            epochs: self.epochs.select(ndarray::Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            origins: rows.iter().map(|&r| self.origins[r]).collect(),
            class_names: self.class_names.clone(),
            channel_names: self.channel_names.clone(),
            sample_rate_hz: self.sample_rate_hz,
            tmin: self.tmin,
            tmax: self.tmax,
            baseline: self.baseline,
            norm: self.norm.clone(),
        }
    }
}
