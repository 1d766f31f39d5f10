use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use mibci::classify::{ModelBundle, S4dConfig, TrainConfig};
use mibci::runtime::{build_pipeline, OverflowPolicy, PipelineConfig, PipelineEvent, ReplaySource};
use mibci::sessions::{generate_cue_sequence, offline_train, synth_calibration, synth_generate, OfflineConfig, SynthConfig};
use mibci::signal::{ClassMapping, Montage, Recording};

fn classes() -> Vec<String> {
    vec!["left".into(), "rest".into(), "right".into()]
}

fn recording(n_per_class: usize, seed: u64) -> Recording {
    let schedule = generate_cue_sequence(&classes(), n_per_class, seed).unwrap();
    synth_generate(&SynthConfig { seed, ..SynthConfig::default() }, &schedule, schedule.duration_s()).unwrap()
}

fn bundle() -> &'static ModelBundle {
    static BUNDLE: OnceLock<ModelBundle> = OnceLock::new();
    BUNDLE.get_or_init(|| {
        let calib = synth_calibration(&SynthConfig { seed: 90, ..SynthConfig::default() }, 60.0).unwrap();
        let mapping = ClassMapping::new([("task/left", "left"), ("task/rest", "rest"), ("task/right", "right")]);
        let cfg = OfflineConfig {
            seed: 3,
            model: S4dConfig { d_model: 8, d_state: 4, ..S4dConfig::default() },
            train: TrainConfig { max_epochs: 1, ..TrainConfig::default() },
            ..OfflineConfig::default()
        };
        let mut bundle = offline_train(&[recording(8, 3)], Some(&calib), &mapping, &cfg).unwrap().bundle;
        bundle.preprocessing.crop_s = 1.0;
        bundle
    })
}

/// Timing tests must not share the CPU with each other.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn source(seconds: f64, factor: f64) -> Box<ReplaySource> {
    let mut rec = recording(3, 21);
    let frames = (seconds * rec.montage.sample_rate_hz) as usize;
    rec.samples = rec.samples.slice(ndarray::s![.., ..frames]).to_owned();
    rec.markers.retain(|m| m.timestamp < seconds);
    Box::new(ReplaySource::new(rec, 10, factor).unwrap())
}

#[test]
fn realtime_replay_ticks_at_configured_rate() {
    let _guard = serial();
    let config = PipelineConfig { mc_passes: 4, ..PipelineConfig::default() };
    let handle = build_pipeline(bundle(), source(14.0, 1.0), &config).unwrap();
    let events = handle.events().clone();
    let mut arrivals = Vec::new();
    let mut stamps = Vec::new();
    for ev in events.iter() {
        if let PipelineEvent::Frame { frame, .. } = ev {
            arrivals.push(Instant::now());
            stamps.push(frame.ts);
        }
    }
    handle.join().unwrap();
    // crop, lookback and window leave about 11.5 s of ticks
    assert!(arrivals.len() > 100, "{} frames", arrivals.len());
    let span = arrivals.last().unwrap().duration_since(arrivals[0]).as_secs_f64();
    let rate = (arrivals.len() - 1) as f64 / span;
    assert!((rate - 10.0).abs() <= 1.0, "wall-clock tick rate {rate}");
    let stream_rate = (stamps.len() - 1) as f64 / (stamps.last().unwrap() - stamps[0]);
    assert!((stream_rate - 10.0).abs() <= 1.0, "stream tick rate {stream_rate}");
}

#[test]
fn shutdown_joins_within_two_seconds() {
    let _guard = serial();
    let handle = build_pipeline(bundle(), source(60.0, 1.0), &PipelineConfig::default()).unwrap();
    std::thread::sleep(Duration::from_secs(3));
    let t = Instant::now();
    handle.shutdown().unwrap();
    assert!(t.elapsed() < Duration::from_secs(2), "shutdown took {:?}", t.elapsed());
}

#[test]
fn overflow_drops_oldest_and_keeps_order() {
    let _guard = serial();
    let config = PipelineConfig {
        queue_capacity: 2,
        overflow: OverflowPolicy::DropOldest,
        mc_passes: 30,
        ..PipelineConfig::default()
    };
    let handle = build_pipeline(bundle(), source(40.0, 100.0), &config).unwrap();
    let (events, stats) = handle.collect().unwrap();
    assert!(stats.total_dropped() > 0, "{stats:?}");
    let mut last_ts = f64::NEG_INFINITY;
    let mut last_seq = None;
    let mut frames = 0;
    for ev in &events {
        if let PipelineEvent::Frame { frame, latency } = ev {
            frames += 1;
            assert!(frame.ts > last_ts);
            last_ts = frame.ts;
            assert!(latency.is_monotonic());
            assert!(last_seq.map_or(true, |s| latency.seq > s));
            last_seq = Some(latency.seq);
        }
    }
    assert!(frames > 0);
}

#[test]
fn block_policy_loses_nothing() {
    let _guard = serial();
    let config = PipelineConfig { queue_capacity: 2, overflow: OverflowPolicy::Block, ..PipelineConfig::default() };
    let handle = build_pipeline(bundle(), source(8.0, 0.0), &config).unwrap();
    let (events, stats) = handle.collect().unwrap();
    assert_eq!(stats.total_dropped(), 0);
    let frames = events.iter().filter(|e| matches!(e, PipelineEvent::Frame { .. })).count();
    // ticks every 0.1 s from 2.5 s (crop, baseline lookback, window) to 8 s
    assert_eq!(frames, 56);
}

#[test]
fn montage_mismatch_fails_at_startup() {
    let _guard = serial();
    let mut rec = recording(1, 5);
    let names: Vec<String> = rec.montage.channel_names.iter().map(|c| format!("{c}x")).collect();
    rec.montage = Montage::new(names, rec.montage.sample_rate_hz).unwrap();
    let src = Box::new(ReplaySource::new(rec, 10, 0.0).unwrap());
    assert!(build_pipeline(bundle(), src, &PipelineConfig::default()).is_err());
}
