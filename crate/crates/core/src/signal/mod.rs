//! Raw-signal types and the preprocessing chain shared by the offline and
//! online paths: band-pass, crop, channel rejection, ASR, common average
//! reference, epoching, baseline correction and normalization.

pub mod asr;
pub mod epochs;
pub mod filter;
pub mod io;
pub mod preprocess;
pub mod types;

pub use asr::{asr_calibrate, asr_process, AsrModel, AsrStream};
pub use epochs::{epoch_and_baseline, fit_norm_stats, normalize_epochs, ClassMapping, EpochParams};
pub use filter::{apply_filter, design_bandpass, measure_group_delay, BandpassSpec, Biquad, FilterState};
pub use io::{load_recording, read_recording, save_recording, write_recording};
pub use preprocess::{
    common_average_reference, crop_head, reject_channels, PreprocessPlan, PreprocessStep, RejectedChannel,
    RejectionCriteria, RejectionReason,
};
pub use types::{EpochOrigin, EpochSet, Marker, Montage, NormStats, Recording, ReferenceScheme, SampleChunk};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("filter design failed: {0}")]
    Design(String),
    #[error("recording too short: {0}")]
    Length(String),
    #[error("data quality: {0}")]
    DataQuality(String),
    #[error("ASR calibration failed: {0}")]
    Calibration(String),
    #[error("no usable epochs: {0}")]
    NoEpochs(String),
    #[error("malformed recording file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type SignalResult<T> = Result<T, SignalError>;
