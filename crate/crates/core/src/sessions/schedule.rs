use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SessionError, SessionResult};
use crate::signal::Marker;

/// Longest allowed run of one class in a cue sequence.
pub const MAX_RUN: usize = 3;

/// Phase durations of one trial, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialTiming {
    pub fixation_s: f64,
    pub cue_s: f64,
    pub task_s: f64,
    pub break_s: f64,
}

impl Default for TrialTiming {
    fn default() -> Self {
        Self { fixation_s: 2.0, cue_s: 1.0, task_s: 3.0, break_s: 3.0 }
    }
}

impl TrialTiming {
    pub fn trial_s(&self) -> f64 {
        self.fixation_s + self.cue_s + self.task_s + self.break_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cue {
    pub class: String,
    pub cue_onset_s: f64,
}

impl Cue {
    pub fn task_onset_s(&self, timing: &TrialTiming) -> f64 {
        self.cue_onset_s + timing.cue_s
    }
}

/// Ordered cues of one session. Marker labels are `cue/<class>` at cue
/// onset and `task/<class>` at task onset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueSchedule {
    pub cues: Vec<Cue>,
    pub timing: TrialTiming,
    /// Silence before the first trial, seconds.
    pub lead_in_s: f64,
    /// Silence after the last trial, seconds.
    pub lead_out_s: f64,
    pub seed: u64,
}

pub const DEFAULT_LEAD_IN_S: f64 = 12.0;
pub const DEFAULT_LEAD_OUT_S: f64 = 3.0;

impl CueSchedule {
    /// Lay `classes` out as consecutive trials after the lead-in.
    pub fn from_sequence(classes: &[String], timing: TrialTiming, lead_in_s: f64, seed: u64) -> Self {
        let cues = classes
            .iter()
            .enumerate()
            .map(|(k, c)| Cue {
                class: c.clone(),
                cue_onset_s: lead_in_s + k as f64 * timing.trial_s() + timing.fixation_s,
            })
            .collect();
        Self { cues, timing, lead_in_s, lead_out_s: DEFAULT_LEAD_OUT_S, seed }
    }

    pub fn duration_s(&self) -> f64 {
        self.lead_in_s + self.cues.len() as f64 * self.timing.trial_s() + self.lead_out_s
    }

    pub fn markers(&self) -> Vec<Marker> {
        let mut out = Vec::with_capacity(2 * self.cues.len());
        for c in &self.cues {
            out.push(Marker::new(c.cue_onset_s, format!("cue/{}", c.class)));
            out.push(Marker::new(c.task_onset_s(&self.timing), format!("task/{}", c.class)));
        }
        out
    }

    /// Class occupying each task phase, as `(start, end, class)`.
    pub fn task_spans(&self) -> Vec<(f64, f64, &str)> {
        self.cues
            .iter()
            .map(|c| {
                let t = c.task_onset_s(&self.timing);
                (t, t + self.timing.task_s, c.class.as_str())
            })
            .collect()
    }
}

/// Balanced, seeded random order with no run longer than [`MAX_RUN`].
pub fn generate_cue_sequence(classes: &[String], n_per_class: usize, seed: u64) -> SessionResult<CueSchedule> {
    let order = balanced_order(classes, n_per_class, seed)?;
    Ok(CueSchedule::from_sequence(&order, TrialTiming::default(), DEFAULT_LEAD_IN_S, seed))
}

fn balanced_order(classes: &[String], n_per_class: usize, seed: u64) -> SessionResult<Vec<String>> {
    if classes.is_empty() || n_per_class == 0 {
        return Err(SessionError::Config("need at least one class and one cue per class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if classes.len() == 1 {
        return Ok(vec![classes[0].clone(); n_per_class]);
    }
    // Draw classes weighted by how many cues they have left, never extending
    // a full run; restart on the rare dead end.
    'attempt: loop {
        let mut left = vec![n_per_class; classes.len()];
        let mut order: Vec<usize> = Vec::with_capacity(n_per_class * classes.len());
        while order.len() < n_per_class * classes.len() {
            let blocked = (order.len() >= MAX_RUN && order[order.len() - MAX_RUN..].iter().all(|&c| c == order[order.len() - 1]))
                .then(|| order[order.len() - 1]);
            let weights: Vec<usize> =
                (0..classes.len()).map(|c| if Some(c) == blocked { 0 } else { left[c] }).collect();
            let total: usize = weights.iter().sum();
            if total == 0 {
                continue 'attempt;
            }
            let mut r = rng.gen_range(0..total);
            let pick = weights
                .iter()
                .position(|&w| {
                    if r < w {
                        true
                    } else {
                        r -= w;
                        false
                    }
                })
                .expect("weighted pick");
            left[pick] -= 1;
            order.push(pick);
        }
        return Ok(order.into_iter().map(|c| classes[c].clone()).collect());
    }
}

pub fn longest_run(order: &[String]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for (i, c) in order.iter().enumerate() {
        run = if i > 0 && order[i - 1] == *c { run + 1 } else { 1 };
        best = best.max(run);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three() -> Vec<String> {
        vec!["left".into(), "rest".into(), "right".into()]
    }

    #[test]
    fn balanced_counts_and_timing() {
        let s = generate_cue_sequence(&three(), 10, 1).unwrap();
        assert_eq!(s.cues.len(), 30);
        for c in three() {
            assert_eq!(s.cues.iter().filter(|q| q.class == c).count(), 10);
        }
        let spacing = s.timing.cue_s + s.timing.task_s + s.timing.break_s;
        assert!(s.cues.windows(2).all(|w| w[1].cue_onset_s - w[0].cue_onset_s >= spacing));
        assert_eq!(s.markers().len(), 60);
        assert_eq!(s.markers()[1].label, format!("task/{}", s.cues[0].class));
        assert!((s.duration_s() - (12.0 + 30.0 * 9.0 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_order() {
        assert_eq!(generate_cue_sequence(&three(), 10, 5).unwrap(), generate_cue_sequence(&three(), 10, 5).unwrap());
        assert_ne!(generate_cue_sequence(&three(), 10, 5).unwrap(), generate_cue_sequence(&three(), 10, 6).unwrap());
    }

    #[test]
    fn run_length_cap_over_many_schedules() {
        for seed in 0..10_000 {
            let s = generate_cue_sequence(&three(), 10, seed).unwrap();
            let order: Vec<String> = s.cues.into_iter().map(|c| c.class).collect();
            assert!(longest_run(&order) <= MAX_RUN, "seed {seed}");
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(generate_cue_sequence(&[], 3, 0).is_err());
        assert!(generate_cue_sequence(&three(), 0, 0).is_err());
        assert_eq!(generate_cue_sequence(&three()[..1], 5, 0).unwrap().cues.len(), 5);
    }

    proptest! {
        #[test]
        fn any_class_count_is_balanced(k in 2usize..6, n in 1usize..15, seed in any::<u64>()) {
            let classes: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
            let s = generate_cue_sequence(&classes, n, seed).unwrap();
            let order: Vec<String> = s.cues.iter().map(|c| c.class.clone()).collect();
            prop_assert!(longest_run(&order) <= MAX_RUN);
            for c in &classes {
                prop_assert_eq!(order.iter().filter(|o| *o == c).count(), n);
            }
        }
    }
}
