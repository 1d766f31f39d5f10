//! Online operation: stream sources, the threaded four-stage pipeline
//! (acquisition → preprocessing → classification → transfer), the transfer
//! function, latency accounting, ITR and the WebSocket feedback protocol.

pub mod itr;
pub mod latency;
pub mod messages;
pub mod online;
pub mod pipeline;
pub mod protocol;
pub mod qte;
pub mod queue;
pub mod source;
pub mod transfer;
pub mod ws;

pub use itr::{compute_itr, ItrParams};
pub use latency::{latency_report, read_ledger, write_ledger, LatencyRecord, LatencyReport, StageStats};
pub use messages::{ClassProbs, FeatureWindow, MonotonicClock, Payload, StageId, StageMessage, StageStamp};
pub use online::{OnlineClassifier, OnlinePreprocessor};
pub use pipeline::{build_pipeline, PipelineConfig, PipelineEvent, PipelineHandle, PipelineStats};
pub use protocol::{ClientMessage, ServerMessage};
pub use qte::{QteConfig, QteHarness, QteOutcome, QteSummary};
pub use queue::{queue, DropCounter, OverflowPolicy, QueueSender};
pub use source::{open_replay, ReplaySource, SourceEvent, StreamSource};
pub use transfer::{transfer_step, Action, ControlFrame, TransferConfig, TransferState};
pub use ws::{broadcast_frames, WsHub, WsHubHandle};

use thiserror::Error;

use crate::classify::ClassifyError;
use crate::features::FeatureError;
use crate::signal::SignalError;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("pipeline startup failed: {0}")]
    Startup(String),
    #[error("stage {stage} failed: {detail}")]
    Stage { stage: &'static str, detail: String },
    #[error("latency report: {0}")]
    Report(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    WebSocket(#[from] Box<tungstenite::Error>),
}

impl From<tungstenite::Error> for RuntimeError {
    fn from(e: tungstenite::Error) -> Self {
        Self::WebSocket(Box::new(e))
    }
}

pub type RuntimeResult<T> = Result<T, RuntimeError>;
