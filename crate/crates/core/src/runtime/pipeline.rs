use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::latency::LatencyRecord;
use super::messages::{MonotonicClock, Payload, StageId, StageMessage};
use super::online::{OnlineClassifier, OnlinePreprocessor};
use super::queue::{queue, DropCounter, OverflowPolicy};
use super::source::{SourceEvent, StreamSource};
use super::transfer::{ControlFrame, TransferConfig, TransferState};
use super::{RuntimeError, RuntimeResult};
use crate::classify::ModelBundle;
use crate::signal::Marker;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Seconds between classifier ticks.
    pub hop_s: f64,
    pub queue_capacity: usize,
    pub overflow: OverflowPolicy,
    /// MC-dropout passes per tick; below 2 the model runs deterministically.
    pub mc_passes: usize,
    pub seed: u64,
    /// `None` uses [`TransferConfig::default_for`] the bundle's classes.
    pub transfer: Option<TransferConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            hop_s: 0.1,
            queue_capacity: 64,
            overflow: OverflowPolicy::DropOldest,
            mc_passes: 20,
            seed: 0,
            transfer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineEvent {
    Frame { frame: ControlFrame, latency: LatencyRecord },
    Marker(Marker),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    /// Messages discarded per queue.
    pub dropped: BTreeMap<String, u64>,
}

impl PipelineStats {
    pub fn total_dropped(&self) -> u64 {
        self.dropped.values().sum()
    }
}

/// Running pipeline: read [`Self::events`], push transfer-config updates,
/// then [`Self::join`] at end of stream or [`Self::shutdown`] to stop early.
pub struct PipelineHandle {
    events: Receiver<PipelineEvent>,
    config_tx: Sender<TransferConfig>,
    transfer: TransferConfig,
    stop: Arc<AtomicBool>,
    threads: Vec<(&'static str, JoinHandle<RuntimeResult<()>>)>,
    counters: Vec<(&'static str, DropCounter)>,
}

const POLL: Duration = Duration::from_millis(20);

fn stage_err(stage: &'static str) -> impl Fn(RuntimeError) -> RuntimeError {
    move |e| RuntimeError::Stage { stage, detail: e.to_string() }
}

/// Run `body` on every inbox message until the inbox closes. After a stop
/// request the remaining messages are drained without processing.
fn stage_loop(
    inbox: Receiver<StageMessage>,
    stop: &AtomicBool,
    mut body: impl FnMut(StageMessage) -> RuntimeResult<()>,
) -> RuntimeResult<()> {
    loop {
        match inbox.recv_timeout(POLL) {
            Ok(msg) => {
                if !stop.load(Ordering::Relaxed) {
                    body(msg)?;
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return Ok(()),
        }
    }
}

fn spawn(
    name: &'static str,
    stop: &Arc<AtomicBool>,
    f: impl FnOnce() -> RuntimeResult<()> + Send + 'static,
) -> RuntimeResult<(&'static str, JoinHandle<RuntimeResult<()>>)> {
    let stop = stop.clone();
    let h = std::thread::Builder::new().name(format!("mibci-{name}")).spawn(move || {
        let r = f().map_err(stage_err(name));
        if let Err(e) = &r {
            warn!("{e}");
            stop.store(true, Ordering::Relaxed);
        }
        r
    })?;
    Ok((name, h))
}

/// Wire source → preprocess → classify → transfer, each stage on its own
/// thread with a bounded inbox.
pub fn build_pipeline(
    bundle: &ModelBundle,
    source: Box<dyn StreamSource>,
    config: &PipelineConfig,
) -> RuntimeResult<PipelineHandle> {
    OnlinePreprocessor::check_montage(bundle, source.montage())?;
    let fs = source.montage().sample_rate_hz;
    let hop = (config.hop_s * fs).round() as usize;
    let mut pre = OnlinePreprocessor::from_bundle(bundle, hop)?;
    let mut cls = OnlineClassifier::new(bundle.classifier.clone(), pre.feature_steps(), config.mc_passes, config.seed);
    let transfer = config.transfer.clone().unwrap_or_else(|| TransferConfig::default_for(&bundle.class_names));
    transfer.validate()?;
    if transfer.class_names != bundle.class_names {
        return Err(RuntimeError::Config(format!(
            "transfer config classes {:?} differ from the model's {:?}",
            transfer.class_names, bundle.class_names
        )));
    }

    let stop = Arc::new(AtomicBool::new(false));
    let clock = MonotonicClock::new();
    let cap = config.queue_capacity;
    let (raw_tx, raw_rx, raw_drop) = queue::<StageMessage>(cap, config.overflow, stop.clone());
    let (win_tx, win_rx, win_drop) = queue::<StageMessage>(cap, config.overflow, stop.clone());
    let (prob_tx, prob_rx, prob_drop) = queue::<StageMessage>(cap, config.overflow, stop.clone());
    let (out_tx, out_rx, out_drop) = queue::<PipelineEvent>(cap.max(256), config.overflow, stop.clone());
    let (config_tx, config_rx) = unbounded::<TransferConfig>();

    let mut threads = Vec::new();
    let s = stop.clone();
    let mut source = source;
    threads.push(spawn("acquisition", &stop, move || {
        let mut seq = 0u64;
        while !s.load(Ordering::Relaxed) {
            let Some(ev) = source.next_event() else { break };
            let msg = match ev {
                SourceEvent::Chunk(chunk) => {
                    let now = clock.now();
                    let mut m = StageMessage::new(seq, Payload::RawChunk(chunk));
                    m.stamp(StageId::Acquisition, now, now)?;
                    seq += 1;
                    m
                }
                SourceEvent::Marker(marker) => StageMessage::new(seq, Payload::Marker(marker)),
            };
            if !raw_tx.send(msg) {
                break;
            }
        }
        debug!("acquisition finished after {seq} chunks");
        Ok(())
    })?);

    let s = stop.clone();
    threads.push(spawn("preprocessing", &stop, move || {
        let mut seq = 0u64;
        stage_loop(raw_rx, &s, |msg| {
            match &msg.payload {
                Payload::RawChunk(chunk) => {
                    let received = clock.now();
                    for window in pre.push(chunk)? {
                        let mut out = msg.with_payload(Payload::FeatureWindow(window));
                        out.seq = seq;
                        seq += 1;
                        out.stamp(StageId::Preprocessing, received, clock.now())?;
                        win_tx.send(out);
                    }
                }
                Payload::Marker(_) => {
                    win_tx.send(msg);
                }
                other => return Err(RuntimeError::Parameter(format!("preprocessing got {}", other.kind()))),
            }
            Ok(())
        })
    })?);

    let s = stop.clone();
    threads.push(spawn("classification", &stop, move || {
        stage_loop(win_rx, &s, |msg| {
            match &msg.payload {
                Payload::FeatureWindow(w) => {
                    let received = clock.now();
                    let probs = cls.classify(w.end_ts, w.features.view())?;
                    let mut out = msg.with_payload(Payload::ClassProbs(probs));
                    out.stamp(StageId::Classification, received, clock.now())?;
                    prob_tx.send(out);
                }
                Payload::Marker(_) => {
                    prob_tx.send(msg);
                }
                other => return Err(RuntimeError::Parameter(format!("classification got {}", other.kind()))),
            }
            Ok(())
        })
    })?);

    let s = stop.clone();
    let mut cfg = transfer.clone();
    threads.push(spawn("transfer", &stop, move || {
        let mut state = TransferState::default();
        stage_loop(prob_rx, &s, |msg| {
            match &msg.payload {
                Payload::ClassProbs(p) => {
                    let received = clock.now();
                    // Whole-value config swaps only land between ticks.
                    if let Some(new_cfg) = config_rx.try_iter().last() {
                        cfg = new_cfg;
                    }
                    let frame = state.step(&cfg, &p.probs, p.end_ts)?;
                    let mut out = msg.with_payload(Payload::ControlFrame(frame.clone()));
                    out.stamp(StageId::Transfer, received, clock.now())?;
                    let latency = LatencyRecord::from_stamps(out.seq, &out.stamps)?;
                    out_tx.send(PipelineEvent::Frame { frame, latency });
                }
                Payload::Marker(m) => {
                    out_tx.send(PipelineEvent::Marker(m.clone()));
                }
                other => return Err(RuntimeError::Parameter(format!("transfer got {}", other.kind()))),
            }
            Ok(())
        })
    })?);

    Ok(PipelineHandle {
        events: out_rx,
        config_tx,
        transfer,
        stop,
        threads,
        counters: vec![
            ("preprocessing_inbox", raw_drop),
            ("classification_inbox", win_drop),
            ("transfer_inbox", prob_drop),
            ("output", out_drop),
        ],
    })
}

impl PipelineHandle {
    pub fn events(&self) -> &Receiver<PipelineEvent> {
        &self.events
    }

    pub fn transfer_config(&self) -> &TransferConfig {
        &self.transfer
    }

    /// Replace the transfer configuration; takes effect before the next tick.
    pub fn update_transfer(&mut self, cfg: TransferConfig) -> RuntimeResult<()> {
        cfg.validate()?;
        if cfg.class_names != self.transfer.class_names {
            return Err(RuntimeError::Config("transfer config must keep the model's classes".into()));
        }
        self.transfer = cfg.clone();
        self.config_tx
            .send(cfg)
            .map_err(|_| RuntimeError::Stage { stage: "transfer", detail: "stage has exited".into() })
    }

    /// A sender that can push config updates from another thread.
    pub fn config_sender(&self) -> Sender<TransferConfig> {
        self.config_tx.clone()
    }

    pub fn stats(&self) -> PipelineStats {
        PipelineStats { dropped: self.counters.iter().map(|(n, c)| (n.to_string(), c.get())).collect() }
    }

    pub fn is_stopping(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }

    /// Ask every stage to stop; pending messages are discarded.
    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::Relaxed);
    }

    /// Stop early and join all stages.
    pub fn shutdown(self) -> RuntimeResult<PipelineStats> {
        self.request_stop();
        self.join()
    }

    /// Read every event until the stream ends, then join.
    pub fn collect(self) -> RuntimeResult<(Vec<PipelineEvent>, PipelineStats)> {
        let events: Vec<PipelineEvent> = self.events.iter().collect();
        Ok((events, self.join()?))
    }

    /// Wait for the stream to end and every stage to finish. Events still
    /// queued stay readable from a receiver cloned beforehand.
    pub fn join(self) -> RuntimeResult<PipelineStats> {
        let stats_counters = self.counters.clone();
        let mut first_err = None;
        for (name, h) in self.threads {
            match h.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => {
                    first_err.get_or_insert(e);
                }
                Err(_) => {
                    first_err.get_or_insert(RuntimeError::Stage { stage: name, detail: "thread panicked".into() });
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(PipelineStats { dropped: stats_counters.iter().map(|(n, c)| (n.to_string(), c.get())).collect() }),
        }
    }
}
