use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{RuntimeError, RuntimeResult};

/// What a confidently detected class drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    XNeg,
    XPos,
    YNeg,
    YPos,
    Neutral,
    BinA,
    BinB,
}

impl Action {
    /// Axis index (0 = x, 1 = y) and sign for continuous actions.
    fn axis(self) -> Option<(usize, f64)> {
        match self {
            Self::XNeg => Some((0, -1.0)),
            Self::XPos => Some((0, 1.0)),
            Self::YNeg => Some((1, -1.0)),
            Self::YPos => Some((1, 1.0)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    /// Class names in classifier output order.
    pub class_names: Vec<String>,
    /// Probability vectors averaged per decision.
    pub buffer_len: usize,
    pub thresholds: BTreeMap<String, f64>,
    pub mapping: BTreeMap<String, Action>,
    /// Binary accumulator gain per tick.
    pub delta_up: f64,
    /// Decay per tick for accumulators and idle axes.
    pub delta_down: f64,
}

impl TransferConfig {
    /// Threshold 0.5 everywhere; left → x_neg, right → y_pos, anything else neutral.
    pub fn default_for(class_names: &[String]) -> Self {
        let mapping = class_names
            .iter()
            .map(|c| {
                let action = match c.as_str() {
                    "left" => Action::XNeg,
                    "right" => Action::YPos,
                    _ => Action::Neutral,
                };
                (c.clone(), action)
            })
            .collect();
        Self {
            class_names: class_names.to_vec(),
            buffer_len: 10,
            thresholds: class_names.iter().map(|c| (c.clone(), 0.5)).collect(),
            mapping,
            delta_up: 0.2,
            delta_down: 0.1,
        }
    }

    pub fn validate(&self) -> RuntimeResult<()> {
        let n = self.class_names.len();
        if n < 2 {
            return Err(RuntimeError::Config("transfer function needs at least 2 classes".into()));
        }
        if self.buffer_len == 0 {
            return Err(RuntimeError::Config("buffer_len must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.delta_up) || !(0.0..=1.0).contains(&self.delta_down) {
            return Err(RuntimeError::Config("fill rates must lie in [0, 1]".into()));
        }
        for c in &self.class_names {
            let theta = self
                .thresholds
                .get(c)
                .ok_or_else(|| RuntimeError::Config(format!("class '{c}' has no threshold")))?;
            if !(*theta > 1.0 / n as f64 && *theta <= 1.0) {
                return Err(RuntimeError::Config(format!("threshold {theta} for '{c}' outside (1/{n}, 1]")));
            }
            if !self.mapping.contains_key(c) {
                return Err(RuntimeError::Config(format!("class '{c}' is not mapped to an action")));
            }
        }
        let known = |k: &String| self.class_names.contains(k);
        if let Some(k) = self.thresholds.keys().chain(self.mapping.keys()).find(|k| !known(k)) {
            return Err(RuntimeError::Config(format!("unknown class '{k}' in transfer config")));
        }
        Ok(())
    }
}

/// One tick of control output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlFrame {
    pub x: f64,
    pub y: f64,
    /// True only on the tick the accumulator fills.
    pub a: bool,
    pub b: bool,
    pub a_fill: f64,
    pub b_fill: f64,
    /// Smoothed class probabilities.
    pub probs: Vec<f64>,
    pub label: String,
    /// Stream time (s) of the data the frame was computed from.
    pub ts: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferState {
    pub buffer: VecDeque<Vec<f64>>,
    pub x: f64,
    pub y: f64,
    pub a_fill: f64,
    pub b_fill: f64,
    pub last: Option<ControlFrame>,
}

const FILL_EPS: f64 = 1e-9;

fn decay(v: f64, by: f64) -> f64 {
    v.signum() * (v.abs() - by).max(0.0)
}

impl TransferState {
    /// Advance by one probability vector; see [`transfer_step`].
    pub fn step(&mut self, cfg: &TransferConfig, probs: &[f64], ts: f64) -> RuntimeResult<ControlFrame> {
        let n = cfg.class_names.len();
        if probs.len() != n {
            return Err(RuntimeError::Parameter(format!("expected {n} probabilities, got {}", probs.len())));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(RuntimeError::Parameter("probabilities are not on the simplex".into()));
        }
        self.buffer.push_back(probs.to_vec());
        while self.buffer.len() > cfg.buffer_len {
            self.buffer.pop_front();
        }
        let mut mean = vec![0.0; n];
        for p in &self.buffer {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        let len = self.buffer.len() as f64;
        mean.iter_mut().for_each(|m| *m /= len);
        let label = mean
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        let class = &cfg.class_names[label];
        let theta = cfg.thresholds[class];
        let action = if mean[label] >= theta { cfg.mapping[class] } else { Action::Neutral };

        let dd = cfg.delta_down;
        let mut axes = [decay(self.x, dd), decay(self.y, dd)];
        let (mut a_fill, mut b_fill) = (decay(self.a_fill, dd), decay(self.b_fill, dd));
        if let Some((axis, sign)) = action.axis() {
            let magnitude = if theta >= 1.0 { 1.0 } else { (mean[label] - theta) / (1.0 - theta) };
            axes[axis] = sign * magnitude.clamp(0.0, 1.0);
        }
        match action {
            Action::BinA => a_fill = (self.a_fill + cfg.delta_up).min(1.0),
            Action::BinB => b_fill = (self.b_fill + cfg.delta_up).min(1.0),
            _ => {}
        }
        let a = a_fill >= 1.0 - FILL_EPS;
        let b = b_fill >= 1.0 - FILL_EPS;
        if a {
            a_fill = 0.0;
        }
        if b {
            b_fill = 0.0;
        }
        self.x = axes[0];
        self.y = axes[1];
        self.a_fill = a_fill;
        self.b_fill = b_fill;
        let frame = ControlFrame {
            x: axes[0],
            y: axes[1],
            a,
            b,
            a_fill,
            b_fill,
            probs: mean,
            label: class.clone(),
            ts,
        };
        self.last = Some(frame.clone());
        Ok(frame)
    }
}

/// Push `probs` into the rolling buffer, average, and map the most probable
/// class to control signals if it clears its threshold.
pub fn transfer_step(
    state: &TransferState,
    cfg: &TransferConfig,
    probs: &[f64],
    ts: f64,
) -> RuntimeResult<(TransferState, ControlFrame)> {
    let mut next = state.clone();
    let frame = next.step(cfg, probs, ts)?;
    Ok((next, frame))
}
