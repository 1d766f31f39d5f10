use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::transfer::ControlFrame;
use super::{RuntimeError, RuntimeResult};
use crate::signal::{Marker, SampleChunk};

/// Seconds since a fixed origin on the monotonic clock.
#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }

    pub fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

/// Pipeline stages in processing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Acquisition,
    Preprocessing,
    Classification,
    Transfer,
}

impl StageId {
    pub const ALL: [StageId; 4] = [Self::Acquisition, Self::Preprocessing, Self::Classification, Self::Transfer];

    pub fn name(self) -> &'static str {
        match self {
            Self::Acquisition => "acquisition",
            Self::Preprocessing => "preprocessing",
            Self::Classification => "classification",
            Self::Transfer => "transfer",
        }
    }
}

/// When a stage took a message off its inbox and when it published the result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: StageId,
    pub received: f64,
    pub published: f64,
}

/// One preprocessed, normalized window turned into a feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    /// Stream time (s) of the frame just after the window.
    pub end_ts: f64,
    /// `[features × steps]`.
    pub features: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbs {
    pub end_ts: f64,
    pub probs: Vec<f64>,
    /// Spread over MC-dropout passes; zeros for deterministic inference.
    pub std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum Payload {
    RawChunk(SampleChunk),
    PreprocessedChunk(SampleChunk),
    FeatureWindow(FeatureWindow),
    ClassProbs(ClassProbs),
    ControlFrame(ControlFrame),
    /// Event markers travel in-band so they stay ordered with the data.
    Marker(Marker),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::RawChunk(_) => "raw_chunk",
            Self::PreprocessedChunk(_) => "preprocessed_chunk",
            Self::FeatureWindow(_) => "feature_window",
            Self::ClassProbs(_) => "class_probs",
            Self::ControlFrame(_) => "control_frame",
            Self::Marker(_) => "marker",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageMessage {
    pub seq: u64,
    pub payload: Payload,
    pub stamps: Vec<StageStamp>,
}

impl StageMessage {
    pub fn new(seq: u64, payload: Payload) -> Self {
        Self { seq, payload, stamps: Vec::new() }
    }

    /// Append a stage stamp; stages must come in order and times must not go back.
    pub fn stamp(&mut self, stage: StageId, received: f64, published: f64) -> RuntimeResult<()> {
        if published < received {
            return Err(RuntimeError::Parameter(format!("{} published before it received", stage.name())));
        }
        if let Some(last) = self.stamps.last() {
            if last.stage >= stage || received < last.published {
                return Err(RuntimeError::Parameter(format!(
                    "stamp for {} out of order after {}",
                    stage.name(),
                    last.stage.name()
                )));
            }
        }
        self.stamps.push(StageStamp { stage, received, published });
        Ok(())
    }

    /// Continue with a new payload, keeping sequence number and stamps.
    pub fn with_payload(&self, payload: Payload) -> Self {
        Self { seq: self.seq, payload, stamps: self.stamps.clone() }
    }
}
