use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::messages::{StageId, StageStamp};
use super::{RuntimeError, RuntimeResult};

/// Fewest messages a report is computed from.
pub const MIN_MESSAGES: usize = 100;

/// Stage timestamps (monotonic seconds) of one message that reached the
/// transfer stage, plus each stage's own compute time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub seq: u64,
    pub acquisition: f64,
    pub preprocessing: f64,
    pub classification: f64,
    pub transfer: f64,
    pub preprocessing_compute: f64,
    pub classification_compute: f64,
    pub transfer_compute: f64,
}

impl LatencyRecord {
    /// Build from the four stage stamps of a message, in stage order.
    pub fn from_stamps(seq: u64, stamps: &[StageStamp]) -> RuntimeResult<Self> {
        let find = |id: StageId| {
            stamps
                .iter()
                .find(|s| s.stage == id)
                .copied()
                .ok_or_else(|| RuntimeError::Report(format!("message {seq} lacks a {} stamp", id.name())))
        };
        let [acq, pre, cls, tra] = StageId::ALL.map(find);
        let (acq, pre, cls, tra) = (acq?, pre?, cls?, tra?);
        Ok(Self {
            seq,
            acquisition: acq.published,
            preprocessing: pre.published,
            classification: cls.published,
            transfer: tra.published,
            preprocessing_compute: pre.published - pre.received,
            classification_compute: cls.published - cls.received,
            transfer_compute: tra.published - tra.received,
        })
    }

    pub fn is_monotonic(&self) -> bool {
        self.acquisition <= self.preprocessing
            && self.preprocessing <= self.classification
            && self.classification <= self.transfer
            && self.preprocessing_compute >= 0.0
            && self.classification_compute >= 0.0
            && self.transfer_compute >= 0.0
    }

    /// Stage deltas: time from the previous stage's publication to this one's.
    pub fn deltas(&self) -> [f64; 3] {
        [
            self.preprocessing - self.acquisition,
            self.classification - self.preprocessing,
            self.transfer - self.classification,
        ]
    }

    pub fn total(&self) -> f64 {
        self.transfer - self.acquisition
    }

    pub fn compute_sum(&self) -> f64 {
        self.preprocessing_compute + self.classification_compute + self.transfer_compute
    }
}

/// Distribution summary in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_messages: usize,
    pub preprocessing: StageStats,
    pub classification: StageStats,
    pub transfer: StageStats,
    pub total: StageStats,
    pub preprocessing_compute: StageStats,
    pub classification_compute: StageStats,
    pub transfer_compute: StageStats,
    /// Every message's total is at least the sum of its stage compute times.
    pub accounting_ok: bool,
    pub timestamps_monotonic: bool,
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

fn stats(values: impl Iterator<Item = f64>) -> StageStats {
    let mut v: Vec<f64> = values.map(|s| s * 1000.0).collect();
    v.sort_by(f64::total_cmp);
    StageStats { median_ms: percentile(&v, 0.5), p95_ms: percentile(&v, 0.95), p99_ms: percentile(&v, 0.99) }
}

pub fn latency_report(records: &[LatencyRecord]) -> RuntimeResult<LatencyReport> {
    if records.is_empty() {
        return Err(RuntimeError::Report("latency ledger is empty".into()));
    }
    if records.len() < MIN_MESSAGES {
        return Err(RuntimeError::Report(format!(
            "{} messages recorded, need at least {MIN_MESSAGES}",
            records.len()
        )));
    }
    let delta = |i: usize| records.iter().map(move |r| r.deltas()[i]);
    Ok(LatencyReport {
        n_messages: records.len(),
        preprocessing: stats(delta(0)),
        classification: stats(delta(1)),
        transfer: stats(delta(2)),
        total: stats(records.iter().map(LatencyRecord::total)),
        preprocessing_compute: stats(records.iter().map(|r| r.preprocessing_compute)),
        classification_compute: stats(records.iter().map(|r| r.classification_compute)),
        transfer_compute: stats(records.iter().map(|r| r.transfer_compute)),
        accounting_ok: records.iter().all(|r| r.total() >= r.compute_sum() - 1e-12),
        timestamps_monotonic: records.iter().all(LatencyRecord::is_monotonic),
    })
}

impl LatencyReport {
    /// Plain-text table of the stage statistics.
    pub fn table(&self) -> String {
        let mut out = format!("{:<24}{:>12}{:>12}{:>12}\n", "stage", "median ms", "p95 ms", "p99 ms");
        for (name, s) in [
            ("preprocessing", &self.preprocessing),
            ("classification", &self.classification),
            ("transfer", &self.transfer),
            ("total", &self.total),
            ("  preprocessing compute", &self.preprocessing_compute),
            ("  classification compute", &self.classification_compute),
            ("  transfer compute", &self.transfer_compute),
        ] {
            out += &format!("{name:<24}{:>12.2}{:>12.2}{:>12.2}\n", s.median_ms, s.p95_ms, s.p99_ms);
        }
        out += &format!("messages: {}\n", self.n_messages);
        out
    }
}

/// One JSON object per line.
pub fn write_ledger<W: Write>(records: &[LatencyRecord], mut out: W) -> RuntimeResult<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_ledger<R: BufRead>(input: R) -> RuntimeResult<Vec<LatencyRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
