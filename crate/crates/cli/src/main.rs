//! `mibci` command line: synthetic data, recording, training, online runs
//! and latency/ITR reporting.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use mibci::classify::load_model;
use mibci::runtime::{
    broadcast_frames, build_pipeline, compute_itr, latency_report, open_replay, read_ledger, write_ledger, ItrParams,
    LatencyRecord, PipelineConfig, PipelineEvent, QteConfig, QteHarness, ReplaySource, ServerMessage, StreamSource,
    WsHub,
};
use mibci::sessions::{
    cli_train, generate_cue_sequence, run_paradigm, synth_calibration, synth_generate, CueSchedule, FileSink,
    OfflineConfig, Paradigm, ParadigmOptions, SynthConfig, TrainPaths,
};
use mibci::signal::{save_recording, ClassMapping};

#[derive(Parser)]
#[command(name = "mibci", version, about = "Motor-imagery BCI pipeline")]
struct Cli {
    /// JSON settings file with optional `synth`, `session`, `offline`,
    /// `pipeline` and `qte` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the settings.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic task recording, calibration recording and class mapping.
    Simulate {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        erd: Option<f64>,
    },
    /// Run the cued paradigm against a source and save the recording.
    Record {
        /// `replay:<file>` or `synth[:<config.json>]`.
        #[arg(long)]
        source: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        factor: f64,
        /// Forward cues to consoles on this address.
        #[arg(long)]
        ws: Option<String>,
    },
    /// Record the eyes-open calibration block.
    Calibrate {
        #[arg(long)]
        source: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60.0)]
        seconds: f64,
        #[arg(long, default_value_t = 1.0)]
        factor: f64,
        #[arg(long)]
        ws: Option<String>,
    },
    /// Train a model bundle from labelled recordings.
    Train {
        #[arg(long = "recording", required = true)]
        recordings: Vec<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the online pipeline and serve control frames over WebSocket.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long, default_value_t = 1.0)]
        factor: f64,
        #[arg(long, default_value = "127.0.0.1:8765")]
        ws: String,
        /// Write the latency ledger (JSON lines) here.
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Replay a recording through the pipeline headless and score quick-time events.
    Replay {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        recording: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        factor: f64,
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Summarize a latency ledger.
    LatencyReport {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Information transfer rate in bits per minute.
    Itr {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        p: f64,
        #[arg(long)]
        t: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SessionSettings {
    classes: Vec<String>,
    trials_per_class: usize,
    calibration_s: f64,
    starvation_timeout_s: f64,
    session_id: String,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            classes: vec!["left".into(), "rest".into(), "right".into()],
            trials_per_class: 40,
            calibration_s: 60.0,
            starvation_timeout_s: 5.0,
            session_id: "session".into(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct Settings {
    synth: SynthConfig,
    session: SessionSettings,
    offline: OfflineConfig,
    pipeline: PipelineConfig,
    qte: QteConfig,
    #[serde(skip)]
    seed_override: Option<u64>,
}

impl Settings {
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut s: Settings = match path {
            Some(p) => serde_json::from_reader(BufReader::new(
                File::open(p).with_context(|| format!("opening settings {}", p.display()))?,
            ))
            .with_context(|| format!("parsing settings {}", p.display()))?,
            None => Settings::default(),
        };
        if let Some(seed) = seed {
            s.synth.seed = seed;
            s.offline.seed = seed;
            s.pipeline.seed = seed;
        }
        s.seed_override = seed;
        Ok(s)
    }

    fn schedule(&self) -> Result<CueSchedule> {
        Ok(generate_cue_sequence(&self.session.classes, self.session.trials_per_class, self.synth.seed)?)
    }

    fn mapping(&self) -> ClassMapping {
        ClassMapping::new(self.session.classes.iter().map(|c| (format!("task/{c}"), c.clone())))
    }
}

enum SourceSpec {
    Replay(PathBuf),
    Synth(Option<PathBuf>),
}

fn parse_source(spec: &str) -> Result<SourceSpec> {
    match spec.split_once(':') {
        Some(("replay", file)) => Ok(SourceSpec::Replay(file.into())),
        Some(("synth", file)) => Ok(SourceSpec::Synth(Some(file.into()))),
        None if spec == "synth" => Ok(SourceSpec::Synth(None)),
        _ => bail!("unknown source {spec:?}; expected replay:<file> or synth[:<config.json>]"),
    }
}

/// Build a paced source. Synthetic sources follow `paradigm` so their ERD
/// lines up with the cues the session will show.
fn open_source(spec: &str, factor: f64, settings: &Settings, paradigm: &Paradigm) -> Result<Box<dyn StreamSource>> {
    match parse_source(spec)? {
        SourceSpec::Replay(path) => {
            Ok(Box::new(open_replay(&path, factor).with_context(|| format!("opening {}", path.display()))?))
        }
        SourceSpec::Synth(file) => {
            let mut cfg = match file {
                Some(p) => serde_json::from_reader(BufReader::new(File::open(&p)?))
                    .with_context(|| format!("parsing synth config {}", p.display()))?,
                None => settings.synth.clone(),
            };
            if let Some(seed) = settings.seed_override {
                cfg.seed = seed;
            }
            let rec = match paradigm {
                Paradigm::Cued(schedule) => synth_generate(&cfg, schedule, schedule.duration_s() + 1.0)?,
                Paradigm::Calibration { seconds } => synth_calibration(&cfg, seconds + 1.0)?,
            };
            Ok(Box::new(ReplaySource::new(rec, 10, factor)?))
        }
    }
}

fn record(settings: &Settings, paradigm: Paradigm, source: &str, out: &Path, factor: f64, ws: Option<&str>) -> Result<()> {
    let src = open_source(source, factor, settings, &paradigm)?;
    let hub = match ws {
        Some(addr) => {
            let cfg = mibci::runtime::TransferConfig::default_for(&settings.session.classes);
            let hub = WsHub::bind(addr, cfg)?;
            info!("serving cues on ws://{}", hub.local_addr());
            Some(hub)
        }
        None => None,
    };
    let options = ParadigmOptions {
        starvation_timeout: std::time::Duration::from_secs_f64(settings.session.starvation_timeout_s),
        session_id: settings.session.session_id.clone(),
    };
    let mut sink = FileSink::new(out);
    let mut on_cue = |msg: ServerMessage| {
        if let ServerMessage::Cue { class_name, .. } = &msg {
            info!("cue {class_name}");
        }
        if let Some(h) = &hub {
            h.publish(msg);
        }
    };
    let rec = run_paradigm(&paradigm, src, &mut sink, &options, &mut on_cue)?;
    if let Some(h) = hub {
        h.shutdown();
    }
    println!(
        "wrote {} ({} frames, {} markers)",
        out.display(),
        rec.samples.ncols(),
        rec.markers.len()
    );
    Ok(())
}

fn write_ledger_file(records: &[LatencyRecord], path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_ledger(records, BufWriter::new(file))?;
    Ok(())
}

fn print_latency(records: &[LatencyRecord]) {
    match latency_report(records) {
        Ok(report) => println!("{}", report.table()),
        Err(e) => println!("no latency report: {e}"),
    }
}

fn run(settings: &Settings, model: &Path, source: &str, factor: f64, ws: &str, ledger: Option<&Path>) -> Result<()> {
    let bundle = load_model(model).with_context(|| format!("loading {}", model.display()))?;
    let paradigm = Paradigm::Cued(settings.schedule()?);
    let src = open_source(source, factor, settings, &paradigm)?;
    let pipeline = build_pipeline(&bundle, src, &settings.pipeline)?;
    let hub = WsHub::bind(ws, pipeline.transfer_config().clone())?;
    println!("serving control frames on ws://{}", hub.local_addr());
    let mut records = Vec::new();
    let mut frames = 0usize;
    let stats = broadcast_frames(pipeline, &hub, |ev| match ev {
        PipelineEvent::Frame { latency, .. } => {
            frames += 1;
            records.push(latency.clone());
        }
        PipelineEvent::Marker(m) => info!("marker {} at {:.3}", m.label, m.timestamp),
    })?;
    hub.shutdown();
    println!("{frames} control frames, {} dropped", stats.total_dropped());
    print_latency(&records);
    if let Some(path) = ledger {
        write_ledger_file(&records, path)?;
    }
    Ok(())
}

fn replay(settings: &Settings, model: &Path, recording: &Path, mapping: &Path, factor: f64, ledger: Option<&Path>) -> Result<()> {
    let bundle = load_model(model).with_context(|| format!("loading {}", model.display()))?;
    let mapping = ClassMapping::load(mapping).with_context(|| format!("loading {}", mapping.display()))?;
    let src = open_replay(recording, factor).with_context(|| format!("opening {}", recording.display()))?;
    let (events, stats) = build_pipeline(&bundle, Box::new(src), &settings.pipeline)?.collect()?;
    let mut markers = Vec::new();
    let mut frames = Vec::new();
    let mut records = Vec::new();
    for ev in events {
        match ev {
            PipelineEvent::Frame { frame, latency } => {
                frames.push(frame);
                records.push(latency);
            }
            PipelineEvent::Marker(m) => markers.push(m),
        }
    }
    let summary = QteHarness::evaluate(settings.qte.clone(), mapping, &markers, &frames);
    println!("{} control frames, {} dropped", frames.len(), stats.total_dropped());
    println!(
        "quick-time events: {}/{} succeeded ({:.1}%)",
        summary.outcomes.iter().filter(|o| o.success).count(),
        summary.outcomes.len(),
        100.0 * summary.success_rate
    );
    for (class, (ok, total)) in &summary.per_class {
        println!("  {class:<8} {ok}/{total}");
    }
    print_latency(&records);
    if let Some(path) = ledger {
        write_ledger_file(&records, path)?;
    }
    Ok(())
}

fn simulate(settings: &Settings, out_dir: &Path, erd: Option<f64>) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut cfg = settings.synth.clone();
    if let Some(erd) = erd {
        cfg = cfg.with_erd(erd);
    }
    let schedule = settings.schedule()?;
    let rec = synth_generate(&cfg, &schedule, schedule.duration_s())?;
    let calib_cfg = SynthConfig { seed: cfg.seed.wrapping_add(1000), ..cfg };
    let calib = synth_calibration(&calib_cfg, settings.session.calibration_s)?;
    save_recording(&rec, out_dir.join("session.rec"))?;
    save_recording(&calib, out_dir.join("calibration.rec"))?;
    settings.mapping().save(out_dir.join("mapping.json"))?;
    println!(
        "wrote session.rec ({:.0} s, {} cues), calibration.rec, mapping.json to {}",
        schedule.duration_s(),
        schedule.cues.len(),
        out_dir.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let settings = Settings::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Simulate { out_dir, erd } => simulate(&settings, &out_dir, erd),
        Command::Record { source, out, factor, ws } => {
            let paradigm = Paradigm::Cued(settings.schedule()?);
            record(&settings, paradigm, &source, &out, factor, ws.as_deref())
        }
        Command::Calibrate { source, out, seconds, factor, ws } => {
            record(&settings, Paradigm::Calibration { seconds }, &source, &out, factor, ws.as_deref())
        }
        Command::Train { recordings, calibration, mapping, out, report } => {
            let paths = TrainPaths { recordings, calibration, mapping, bundle_out: out, report_out: report };
            let outcome = cli_train(&paths, &settings.offline)?;
            println!("{}", outcome.report.confusion_table());
            println!("wrote {}", paths.bundle_out.display());
            Ok(())
        }
        Command::Run { model, source, factor, ws, ledger } => {
            run(&settings, &model, &source, factor, &ws, ledger.as_deref())
        }
        Command::Replay { model, recording, mapping, factor, ledger } => {
            replay(&settings, &model, &recording, &mapping, factor, ledger.as_deref())
        }
        Command::LatencyReport { input } => {
            let file = File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let records = read_ledger(BufReader::new(file))?;
            println!("{}", latency_report(&records)?.table());
            Ok(())
        }
        Command::Itr { n, p, t } => {
            println!("{:.2} bits/min", compute_itr(ItrParams { n, p, t })?);
            Ok(())
        }
    }
}
