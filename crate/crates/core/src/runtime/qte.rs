use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::protocol::ServerMessage;
use super::transfer::ControlFrame;
use crate::signal::{ClassMapping, Marker};

/// Quick-time event rules of the training game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QteConfig {
    /// Seconds from cue to deadline.
    pub duration_s: f64,
    pub delta_up: f64,
    pub delta_down: f64,
    /// Per-class confidence needed for a frame to count; missing classes use 0.5.
    pub thresholds: BTreeMap<String, f64>,
}

impl Default for QteConfig {
    fn default() -> Self {
        Self { duration_s: 3.0, delta_up: 0.2, delta_down: 0.1, thresholds: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QteOutcome {
    pub class: String,
    pub start_ts: f64,
    pub success: bool,
    /// Jump time on success, deadline otherwise.
    pub end_ts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QteSummary {
    pub outcomes: Vec<QteOutcome>,
    /// class → (successes, attempts)
    pub per_class: BTreeMap<String, (usize, usize)>,
    pub success_rate: f64,
}

impl QteSummary {
    /// `game_result` messages in outcome order.
    pub fn game_results(&self) -> Vec<ServerMessage> {
        self.outcomes
            .iter()
            .map(|o| ServerMessage::GameResult { event: format!("qte/{}", o.class), success: o.success })
            .collect()
    }

    /// Start and outcome markers per QTE, as the console would log them.
    pub fn markers(&self) -> Vec<Marker> {
        self.outcomes
            .iter()
            .flat_map(|o| {
                let end = if o.success { "jump" } else { "fail" };
                [Marker::new(o.start_ts, format!("game/qte_start/{}", o.class)), Marker::new(o.end_ts, format!("game/{end}"))]
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Active {
    class: String,
    start: f64,
    bar: f64,
}

/// Headless quick-time game: each cue marker opens a QTE for its class;
/// matching, confident frames fill the bar, others drain it; a full bar
/// before the deadline is a success.
#[derive(Debug, Clone)]
pub struct QteHarness {
    config: QteConfig,
    mapping: ClassMapping,
    active: Option<Active>,
    outcomes: Vec<QteOutcome>,
}

const FILL_EPS: f64 = 1e-9;

impl QteHarness {
    pub fn new(config: QteConfig, mapping: ClassMapping) -> Self {
        Self { config, mapping, active: None, outcomes: Vec::new() }
    }

    pub fn on_marker(&mut self, marker: &Marker) {
        let Some(class) = self.mapping.class_of(&marker.label) else { return };
        let class = class.to_string();
        self.expire(marker.timestamp);
        if let Some(a) = self.active.take() {
            // A new cue before the previous QTE resolved ends it as a failure.
            self.finish(a, false, marker.timestamp);
        }
        self.active = Some(Active { class, start: marker.timestamp, bar: 0.0 });
    }

    pub fn on_frame(&mut self, frame: &ControlFrame) {
        self.expire(frame.ts);
        let Some(a) = self.active.as_mut() else { return };
        if frame.ts < a.start {
            return;
        }
        let theta = self.config.thresholds.get(&frame.label).copied().unwrap_or(0.5);
        let idx = self.mapping.class_names().iter().position(|c| *c == frame.label);
        let confident = idx.and_then(|i| frame.probs.get(i)).is_some_and(|&p| p >= theta);
        if frame.label == a.class && confident {
            a.bar = (a.bar + self.config.delta_up).min(1.0);
        } else {
            a.bar = (a.bar - self.config.delta_down).max(0.0);
        }
        if a.bar >= 1.0 - FILL_EPS {
            let a = self.active.take().expect("active QTE");
            self.finish(a, true, frame.ts);
        }
    }

    fn expire(&mut self, now: f64) {
        if let Some(a) = &self.active {
            if now > a.start + self.config.duration_s {
                let a = self.active.take().expect("active QTE");
                let deadline = a.start + self.config.duration_s;
                self.finish(a, false, deadline);
            }
        }
    }

    fn finish(&mut self, a: Active, success: bool, end_ts: f64) {
        self.outcomes.push(QteOutcome { class: a.class, start_ts: a.start, success, end_ts });
    }

    /// Close any open QTE at its deadline and summarize.
    pub fn finish_all(mut self) -> QteSummary {
        if let Some(a) = self.active.take() {
            let deadline = a.start + self.config.duration_s;
            self.finish(a, false, deadline);
        }
        let mut per_class: BTreeMap<String, (usize, usize)> =
            self.mapping.class_names().into_iter().map(|c| (c, (0, 0))).collect();
        for o in &self.outcomes {
            let e = per_class.entry(o.class.clone()).or_default();
            e.1 += 1;
            if o.success {
                e.0 += 1;
            }
        }
        let n = self.outcomes.len();
        let wins = self.outcomes.iter().filter(|o| o.success).count();
        QteSummary {
            outcomes: self.outcomes,
            per_class,
            success_rate: if n == 0 { 0.0 } else { wins as f64 / n as f64 },
        }
    }

    /// Play a whole session from markers and frames, ordered by stream time
    /// (markers first on ties).
    pub fn evaluate(config: QteConfig, mapping: ClassMapping, markers: &[Marker], frames: &[ControlFrame]) -> QteSummary {
        let mut h = Self::new(config, mapping);
        let mut m: Vec<&Marker> = markers.iter().collect();
        m.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let mut f: Vec<&ControlFrame> = frames.iter().collect();
        f.sort_by(|a, b| a.ts.total_cmp(&b.ts));
        let (mut i, mut j) = (0, 0);
        while i < m.len() || j < f.len() {
            if j >= f.len() || (i < m.len() && m[i].timestamp <= f[j].ts) {
                h.on_marker(m[i]);
                i += 1;
            } else {
                h.on_frame(f[j]);
                j += 1;
            }
        }
        h.finish_all()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mapping() -> ClassMapping {
        ClassMapping::new([("task/left", "left"), ("task/rest", "rest"), ("task/right", "right")])
    }

    fn frame(ts: f64, label: &str, p: f64) -> ControlFrame {
        let names = ["left", "rest", "right"];
        let i = names.iter().position(|n| *n == label).unwrap();
        let mut probs = vec![(1.0 - p) / 2.0; 3];
        probs[i] = p;
        ControlFrame { x: 0.0, y: 0.0, a: false, b: false, a_fill: 0.0, b_fill: 0.0, probs, label: label.into(), ts }
    }

    #[test]
    fn five_matching_frames_jump_on_the_fifth() {
        let markers = [Marker::new(10.0, "task/left")];
        let frames: Vec<_> = (0..8).map(|k| frame(10.05 + 0.1 * k as f64, "left", 0.9)).collect();
        let s = QteHarness::evaluate(QteConfig::default(), mapping(), &markers, &frames);
        assert_eq!(s.outcomes.len(), 1);
        assert!(s.outcomes[0].success);
        assert!((s.outcomes[0].end_ts - 10.45).abs() < 1e-9);
        assert_eq!(s.per_class["left"], (1, 1));
    }

    #[test]
    fn mismatching_frames_fail_once_at_deadline() {
        let markers = [Marker::new(0.0, "task/right"), Marker::new(9.0, "task/rest")];
        let mut frames: Vec<_> = (0..40).map(|k| frame(0.1 * k as f64, "left", 0.9)).collect();
        // unconfident matching frames do not count either
        frames.extend((0..30).map(|k| frame(9.0 + 0.1 * k as f64, "rest", 0.4)));
        let s = QteHarness::evaluate(QteConfig::default(), mapping(), &markers, &frames);
        assert_eq!(s.outcomes.len(), 2);
        assert!(s.outcomes.iter().all(|o| !o.success));
        assert_eq!(s.outcomes[0].end_ts, 3.0);
        assert_eq!(s.success_rate, 0.0);
        assert_eq!(s.markers().len(), 4);
        let total: usize = s.per_class.values().map(|v| v.1).sum();
        assert_eq!(total, markers.len());
    }

    #[test]
    fn bar_drains_on_misses() {
        let markers = [Marker::new(0.0, "task/left")];
        // hit, hit, miss, hit, hit, hit, hit → 0.2 0.4 0.3 0.5 0.7 0.9 1.1
        let labels = ["left", "left", "rest", "left", "left", "left", "left"];
        let frames: Vec<_> = labels.iter().enumerate().map(|(k, l)| frame(0.1 * (k + 1) as f64, l, 0.8)).collect();
        let s = QteHarness::evaluate(QteConfig::default(), mapping(), &markers, &frames);
        assert!(s.outcomes[0].success);
        assert!((s.outcomes[0].end_ts - 0.7).abs() < 1e-9);
        let s = QteHarness::evaluate(QteConfig::default(), mapping(), &markers, &frames[..6]);
        assert!(!s.outcomes[0].success);
    }
}
