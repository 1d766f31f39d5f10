use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::transfer::{Action, ControlFrame, TransferConfig};
use super::{RuntimeError, RuntimeResult};

/// Messages pushed to console clients, one JSON object per WebSocket text message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Control(ControlFrame),
    Cue {
        #[serde(rename = "class")]
        class_name: String,
        duration_ms: u64,
    },
    Config {
        thresholds: BTreeMap<String, f64>,
        mapping: BTreeMap<String, Action>,
        buffer_len: usize,
    },
    GameResult {
        event: String,
        success: bool,
    },
}

impl ServerMessage {
    pub fn config(cfg: &TransferConfig) -> Self {
        Self::Config { thresholds: cfg.thresholds.clone(), mapping: cfg.mapping.clone(), buffer_len: cfg.buffer_len }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    SetThreshold {
        #[serde(rename = "class")]
        class_name: String,
        value: f64,
    },
    SetMapping {
        #[serde(rename = "class")]
        class_name: String,
        action: Action,
    },
    GameEvent {
        event: String,
        ts: f64,
    },
}

impl ClientMessage {
    pub fn parse(text: &str) -> RuntimeResult<Self> {
        serde_json::from_str(text).map_err(|e| RuntimeError::Protocol(format!("bad client message: {e}")))
    }

    /// The transfer config after a threshold or mapping edit; `None` for
    /// messages that do not touch the config.
    pub fn apply(&self, cfg: &TransferConfig) -> RuntimeResult<Option<TransferConfig>> {
        let mut next = cfg.clone();
        match self {
            Self::SetThreshold { class_name, value } => {
                check_class(cfg, class_name)?;
                next.thresholds.insert(class_name.clone(), *value);
            }
            Self::SetMapping { class_name, action } => {
                check_class(cfg, class_name)?;
                next.mapping.insert(class_name.clone(), *action);
            }
            Self::GameEvent { .. } => return Ok(None),
        }
        next.validate()?;
        Ok(Some(next))
    }
}

fn check_class(cfg: &TransferConfig, class: &str) -> RuntimeResult<()> {
    if cfg.class_names.iter().any(|c| c == class) {
        Ok(())
    } else {
        Err(RuntimeError::Protocol(format!("unknown class '{class}'")))
    }
}
