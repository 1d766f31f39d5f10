use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::RecvTimeoutError;
use ndarray::{Array2, ArrayView2};

use super::schedule::CueSchedule;
use super::{SessionError, SessionResult};
use crate::runtime::{ServerMessage, SourceEvent, StreamSource};
use crate::signal::{load_recording, save_recording, Marker, Montage, Recording};

/// Destination of a recording in progress.
pub trait RecordingSink {
    fn begin(&mut self, montage: &Montage, session_id: &str) -> SessionResult<()>;
    fn write_chunk(&mut self, samples: ArrayView2<f64>) -> SessionResult<()>;
    fn write_marker(&mut self, marker: &Marker) -> SessionResult<()>;
    /// Close the sink and return what it holds.
    fn finish(&mut self) -> SessionResult<Recording>;
}

#[derive(Debug, Default)]
pub struct MemorySink {
    montage: Option<Montage>,
    session_id: String,
    channels: Vec<Vec<f64>>,
    markers: Vec<Marker>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }
}

impl RecordingSink for MemorySink {
    fn begin(&mut self, montage: &Montage, session_id: &str) -> SessionResult<()> {
        self.montage = Some(montage.clone());
        self.session_id = session_id.to_string();
        self.channels = vec![Vec::new(); montage.n_channels()];
        self.markers.clear();
        Ok(())
    }

    fn write_chunk(&mut self, samples: ArrayView2<f64>) -> SessionResult<()> {
        if samples.nrows() != self.channels.len() {
            return Err(SessionError::Config(format!(
                "chunk has {} channels, recording has {}",
                samples.nrows(),
                self.channels.len()
            )));
        }
        for (dst, row) in self.channels.iter_mut().zip(samples.rows()) {
            dst.extend(row.iter());
        }
        Ok(())
    }

    fn write_marker(&mut self, marker: &Marker) -> SessionResult<()> {
        self.markers.push(marker.clone());
        Ok(())
    }

    fn finish(&mut self) -> SessionResult<Recording> {
        let montage = self.montage.clone().ok_or_else(|| SessionError::Config("sink was never started".into()))?;
        let frames = self.channels.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.channels.iter().flatten().copied().collect();
        let samples = Array2::from_shape_vec((self.channels.len(), frames), flat).expect("rows share a length");
        Ok(Recording::new(montage, samples, self.markers.clone(), self.session_id.clone())?)
    }
}

/// Buffers in memory and writes the recording file on `finish`, including
/// after a failed session.
#[derive(Debug)]
pub struct FileSink {
    inner: MemorySink,
    path: PathBuf,
}

impl FileSink {
    pub fn new(path: impl AsRef<Path>) -> Self {
        Self { inner: MemorySink::new(), path: path.as_ref().to_path_buf() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl RecordingSink for FileSink {
    fn begin(&mut self, montage: &Montage, session_id: &str) -> SessionResult<()> {
        self.inner.begin(montage, session_id)
    }

    fn write_chunk(&mut self, samples: ArrayView2<f64>) -> SessionResult<()> {
        self.inner.write_chunk(samples)
    }

    fn write_marker(&mut self, marker: &Marker) -> SessionResult<()> {
        self.inner.write_marker(marker)
    }

    fn finish(&mut self) -> SessionResult<Recording> {
        save_recording(&self.inner.finish()?, &self.path)?;
        Ok(load_recording(&self.path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Paradigm {
    Cued(CueSchedule),
    /// Eyes-open rest bracketed by `calibration/start` and `calibration/end`.
    Calibration { seconds: f64 },
}

impl Paradigm {
    pub fn calibration() -> Self {
        Self::Calibration { seconds: 60.0 }
    }

    pub fn duration_s(&self) -> f64 {
        match self {
            Self::Cued(s) => s.duration_s(),
            Self::Calibration { seconds } => *seconds,
        }
    }

    fn markers(&self) -> Vec<Marker> {
        match self {
            Self::Cued(s) => s.markers(),
            Self::Calibration { seconds } => {
                vec![Marker::new(0.0, "calibration/start"), Marker::new(*seconds, "calibration/end")]
            }
        }
    }

    fn cue_message(&self, marker: &Marker) -> Option<ServerMessage> {
        match self {
            Self::Cued(s) => marker.label.strip_prefix("cue/").map(|class| ServerMessage::Cue {
                class_name: class.to_string(),
                duration_ms: (s.timing.cue_s * 1000.0).round() as u64,
            }),
            Self::Calibration { seconds } => (marker.label == "calibration/start").then(|| ServerMessage::Cue {
                class_name: "calibration".into(),
                duration_ms: (seconds * 1000.0).round() as u64,
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParadigmOptions {
    /// Longest wait for the next chunk before the session is abandoned.
    pub starvation_timeout: Duration,
    pub session_id: String,
}

impl Default for ParadigmOptions {
    fn default() -> Self {
        Self { starvation_timeout: Duration::from_secs(5), session_id: "session".into() }
    }
}

/// Record `paradigm` from `source` into `sink`. Markers are written as soon
/// as stream time passes them, in the same sequence as the samples; cue
/// messages go to `on_cue` at the same moment. Markers coming from the
/// source itself are ignored.
pub fn run_paradigm(
    paradigm: &Paradigm,
    mut source: Box<dyn StreamSource>,
    sink: &mut dyn RecordingSink,
    options: &ParadigmOptions,
    on_cue: &mut dyn FnMut(ServerMessage),
) -> SessionResult<Recording> {
    let montage = source.montage().clone();
    let fs = montage.sample_rate_hz;
    let total_frames = (paradigm.duration_s() * fs).round() as usize;
    if total_frames == 0 {
        return Err(SessionError::Config("paradigm has zero duration".into()));
    }
    let planned = paradigm.markers();
    sink.begin(&montage, &options.session_id)?;

    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = crossbeam_channel::unbounded();
    let reader_stop = stop.clone();
    // Detached: a live source may block indefinitely, and it exits on its
    // next event once the receiver is gone.
    std::thread::spawn(move || {
        while !reader_stop.load(Ordering::Relaxed) {
            match source.next_event() {
                Some(SourceEvent::Chunk(c)) => {
                    if tx.send(c).is_err() {
                        break;
                    }
                }
                Some(SourceEvent::Marker(_)) => {}
                None => break,
            }
        }
    });

    let mut written = 0usize;
    let mut next = 0usize;
    let mut emit = |upto: f64, inclusive: bool, next: &mut usize, sink: &mut dyn RecordingSink| -> SessionResult<()> {
        while let Some(m) = planned.get(*next) {
            if m.timestamp > upto || (!inclusive && m.timestamp == upto) {
                break;
            }
            sink.write_marker(m)?;
            if let Some(msg) = paradigm.cue_message(m) {
                on_cue(msg);
            }
            *next += 1;
        }
        Ok(())
    };
    emit(0.0, true, &mut next, sink)?;
    let mut last_data = Instant::now();
    while written < total_frames {
        match rx.recv_timeout(options.starvation_timeout) {
            Ok(chunk) => {
                if chunk.n_channels() != montage.n_channels() {
                    stop.store(true, Ordering::Relaxed);
                    return Err(SessionError::Config("source changed its channel count mid-stream".into()));
                }
                let take = chunk.n_frames().min(total_frames - written);
                sink.write_chunk(chunk.samples.slice(ndarray::s![.., ..take]))?;
                written += take;
                last_data = Instant::now();
                emit(written as f64 / fs, written == total_frames, &mut next, sink)?;
            }
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => {
                stop.store(true, Ordering::Relaxed);
                let partial = sink.finish()?;
                return Err(SessionError::Starved { waited_s: last_data.elapsed().as_secs_f64(), partial: Box::new(partial) });
            }
        }
    }
    stop.store(true, Ordering::Relaxed);
    drop(rx);
    sink.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::ReplaySource;
    use crate::sessions::schedule::generate_cue_sequence;
    use crate::signal::SampleChunk;

    fn montage() -> Montage {
        Montage::new(vec!["C3".into(), "Cz".into(), "C4".into()], 250.0).unwrap()
    }

    fn source(seconds: f64) -> Box<dyn StreamSource> {
        let n = (seconds * 250.0) as usize;
        let samples = Array2::from_shape_fn((3, n), |(c, t)| ((c * 7 + t) as f32 * 0.01).sin() as f64);
        let rec = Recording::new(montage(), samples, vec![Marker::new(1.0, "from-source")], "src").unwrap();
        Box::new(ReplaySource::new(rec, 25, 0.0).unwrap())
    }

    fn classes() -> Vec<String> {
        vec!["left".into(), "rest".into(), "right".into()]
    }

    #[test]
    fn cued_session_has_every_marker_in_order() {
        let schedule = generate_cue_sequence(&classes(), 10, 5).unwrap();
        let mut cues = Vec::new();
        let rec = run_paradigm(
            &Paradigm::Cued(schedule.clone()),
            source(schedule.duration_s() + 5.0),
            &mut MemorySink::new(),
            &ParadigmOptions::default(),
            &mut |m| cues.push(m),
        )
        .unwrap();
        assert_eq!(rec.n_frames(), (schedule.duration_s() * 250.0).round() as usize);
        assert_eq!(rec.markers, schedule.markers());
        let tasks: Vec<&str> = rec.markers.iter().filter_map(|m| m.label.strip_prefix("task/")).collect();
        let expected: Vec<&str> = schedule.cues.iter().map(|c| c.class.as_str()).collect();
        assert_eq!(tasks, expected);
        assert_eq!(cues.len(), 30);
        assert!(matches!(&cues[0], ServerMessage::Cue { class_name, duration_ms: 1000 } if *class_name == expected[0]));
    }

    #[test]
    fn calibration_spans_one_minute() {
        let mut cues = Vec::new();
        let rec = run_paradigm(
            &Paradigm::calibration(),
            source(70.0),
            &mut MemorySink::new(),
            &ParadigmOptions::default(),
            &mut |m| cues.push(m),
        )
        .unwrap();
        assert_eq!(rec.markers.len(), 2);
        assert_eq!(rec.markers[0].label, "calibration/start");
        assert_eq!(rec.markers[1].label, "calibration/end");
        assert!((rec.markers[1].timestamp - rec.markers[0].timestamp - 60.0).abs() <= 0.5);
        assert_eq!(rec.duration_s(), 60.0);
        assert_eq!(cues.len(), 1);
    }

    #[test]
    fn file_sink_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.rec");
        let mut sink = FileSink::new(&path);
        let rec = run_paradigm(&Paradigm::Calibration { seconds: 5.0 }, source(6.0), &mut sink, &ParadigmOptions::default(), &mut |_| {})
            .unwrap();
        let loaded = load_recording(&path).unwrap();
        assert_eq!(loaded, rec);
        let again = dir.path().join("again.rec");
        save_recording(&loaded, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    /// Delivers a few chunks, then goes silent.
    struct Stalling {
        montage: Montage,
        left: usize,
    }

    impl StreamSource for Stalling {
        fn montage(&self) -> &Montage {
            &self.montage
        }

        fn next_event(&mut self) -> Option<SourceEvent> {
            if self.left == 0 {
                std::thread::sleep(Duration::from_secs(3));
                return None;
            }
            self.left -= 1;
            let chunk = SampleChunk::new(Array2::ones((3, 50)), 0.0, Arc::new(self.montage.clone())).unwrap();
            Some(SourceEvent::Chunk(chunk))
        }
    }

    #[test]
    fn starvation_keeps_the_partial_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.rec");
        let schedule = generate_cue_sequence(&classes(), 2, 1).unwrap();
        let options = ParadigmOptions { starvation_timeout: Duration::from_millis(200), ..ParadigmOptions::default() };
        let started = Instant::now();
        let err = run_paradigm(
            &Paradigm::Cued(schedule),
            Box::new(Stalling { montage: montage(), left: 4 }),
            &mut FileSink::new(&path),
            &options,
            &mut |_| {},
        )
        .unwrap_err();
        assert!(started.elapsed() < Duration::from_secs(2));
        match err {
            SessionError::Starved { partial, .. } => {
                assert_eq!(partial.n_frames(), 200);
                assert_eq!(load_recording(&path).unwrap(), *partial);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn exhausted_source_is_starvation() {
        let schedule = generate_cue_sequence(&classes(), 2, 1).unwrap();
        let err = run_paradigm(&Paradigm::Cued(schedule), source(5.0), &mut MemorySink::new(), &ParadigmOptions::default(), &mut |_| {});
        assert!(matches!(err, Err(SessionError::Starved { ref partial, .. }) if partial.n_frames() == 1250));
    }
}
