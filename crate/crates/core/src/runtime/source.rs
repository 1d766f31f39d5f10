use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::RuntimeResult;
use crate::signal::{load_recording, Marker, Montage, Recording, SampleChunk};

#[derive(Debug, Clone)]
pub enum SourceEvent {
    Chunk(SampleChunk),
    Marker(Marker),
}

/// A producer of sample chunks and in-band markers.
pub trait StreamSource: Send {
    fn montage(&self) -> &Montage;
    /// Next event, waiting as needed to honour pacing; `None` at end of stream.
    fn next_event(&mut self) -> Option<SourceEvent>;
}

/// Replays a recording in fixed-size chunks. Stream time starts at 0 with
/// the first frame.
#[derive(Debug)]
pub struct ReplaySource {
    rec: Recording,
    montage: Arc<Montage>,
    chunk_frames: usize,
    factor: f64,
    pos: usize,
    next_marker: usize,
    pending: VecDeque<SourceEvent>,
    started: Option<Instant>,
}

pub const DEFAULT_CHUNK_FRAMES: usize = 10;

impl ReplaySource {
    /// `factor` scales real time: 1 replays at the recorded rate, 0 as fast
    /// as possible.
    pub fn new(rec: Recording, chunk_frames: usize, factor: f64) -> RuntimeResult<Self> {
        if chunk_frames == 0 {
            return Err(super::RuntimeError::Parameter("chunk size must be positive".into()));
        }
        if !(factor >= 0.0) || !factor.is_finite() {
            return Err(super::RuntimeError::Parameter(format!("realtime factor must be ≥ 0, got {factor}")));
        }
        let montage = Arc::new(rec.montage.clone());
        Ok(Self {
            rec,
            montage,
            chunk_frames,
            factor,
            pos: 0,
            next_marker: 0,
            pending: VecDeque::new(),
            started: None,
        })
    }

    fn queue_markers_before(&mut self, ts: f64) {
        while let Some(m) = self.rec.markers.get(self.next_marker) {
            if m.timestamp >= ts {
                break;
            }
            self.pending.push_back(SourceEvent::Marker(m.clone()));
            self.next_marker += 1;
        }
    }
}

/// Replay source over a recording file.
pub fn open_replay(path: impl AsRef<Path>, realtime_factor: f64) -> RuntimeResult<ReplaySource> {
    ReplaySource::new(load_recording(path)?, DEFAULT_CHUNK_FRAMES, realtime_factor)
}

impl StreamSource for ReplaySource {
    fn montage(&self) -> &Montage {
        &self.montage
    }

    fn next_event(&mut self) -> Option<SourceEvent> {
        if let Some(ev) = self.pending.pop_front() {
            return Some(ev);
        }
        let n = self.rec.n_frames();
        if self.pos >= n {
            self.queue_markers_before(f64::INFINITY);
            return self.pending.pop_front();
        }
        let fs = self.montage.sample_rate_hz;
        let started = *self.started.get_or_insert_with(Instant::now);
        let end = (self.pos + self.chunk_frames).min(n);
        let end_ts = end as f64 / fs;
        if self.factor > 0.0 {
            let due = started + Duration::from_secs_f64(end_ts / self.factor);
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        let samples = self.rec.samples.slice(ndarray::s![.., self.pos..end]).to_owned();
        let chunk = SampleChunk { samples, start_timestamp: self.pos as f64 / fs, montage: self.montage.clone() };
        self.pos = end;
        self.queue_markers_before(end_ts);
        Some(SourceEvent::Chunk(chunk))
    }
}
