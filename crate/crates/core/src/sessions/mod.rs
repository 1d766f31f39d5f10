//! Experiment orchestration: cue schedules, the paradigm runner with marker
//! injection and calibration capture, synthetic EEG and offline training.

pub mod paradigm;
pub mod schedule;
pub mod synth;
pub mod train;

pub use paradigm::{run_paradigm, FileSink, MemorySink, Paradigm, ParadigmOptions, RecordingSink};
pub use schedule::{generate_cue_sequence, longest_run, Cue, CueSchedule, TrialTiming, MAX_RUN};
pub use synth::{default_signatures, synth_calibration, synth_generate, Signature, SynthConfig};
pub use train::{cli_train, offline_train, BaselineScores, OfflineConfig, TrainOutcome, TrainPaths, TrainReport};

use thiserror::Error;

use crate::classify::ClassifyError;
use crate::features::FeatureError;
use crate::runtime::RuntimeError;
use crate::signal::{Recording, SignalError};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("ASR needs a calibration recording: {0}")]
    MissingCalibration(String),
    #[error("source starved after {waited_s:.1} s without data ({} frames kept)", partial.n_frames())]
    Starved { waited_s: f64, partial: Box<Recording> },
    #[error("{stage} failed on {file}: {detail}")]
    Stage { stage: &'static str, file: String, detail: String },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type SessionResult<T> = Result<T, SessionError>;
