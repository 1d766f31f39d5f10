use std::path::Path;
use std::process::{Command, Output};

fn mibci(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mibci")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(
        out.status.success(),
        "mibci {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn itr_prints_bits_per_minute() {
    let out = mibci(&["itr", "--n", "3", "--p", "0.73", "--t", "1.617"]);
    assert_eq!(stdout(&out).trim(), "17.57 bits/min");
}

#[test]
fn bad_source_is_reported() {
    let out = Command::new(env!("CARGO_BIN_EXE_mibci"))
        .args(["calibrate", "--source", "bluetooth:x", "--out", "/tmp/never.rec"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown source"));
}

#[test]
fn simulate_train_replay_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let settings = d.join("settings.json");
    std::fs::write(
        &settings,
        r#"{
            "session": {"trials_per_class": 8},
            "offline": {"model": {"d_model": 8, "d_state": 4}, "train": {"max_epochs": 2}},
            "pipeline": {"overflow": "block", "mc_passes": 2}
        }"#,
    )
    .unwrap();
    let cfg = p(&settings);
    let out = d.join("data");
    mibci(&["--config", cfg, "--seed", "5", "simulate", "--out-dir", p(&out)]);
    for f in ["session.rec", "calibration.rec", "mapping.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    let bundle = d.join("model.bundle");
    let report = d.join("report.json");
    let train = mibci(&[
        "--config",
        cfg,
        "--seed",
        "5",
        "train",
        "--recording",
        p(&out.join("session.rec")),
        "--calibration",
        p(&out.join("calibration.rec")),
        "--mapping",
        p(&out.join("mapping.json")),
        "--out",
        p(&bundle),
        "--report",
        p(&report),
    ]);
    assert!(stdout(&train).contains("window accuracy"));
    assert!(bundle.exists() && report.exists());

    let ledger = d.join("ledger.jsonl");
    let replay = mibci(&[
        "--config",
        cfg,
        "replay",
        "--model",
        p(&bundle),
        "--recording",
        p(&out.join("session.rec")),
        "--mapping",
        p(&out.join("mapping.json")),
        "--ledger",
        p(&ledger),
    ]);
    let text = stdout(&replay);
    assert!(text.contains("quick-time events: "), "{text}");
    assert!(text.contains("/24 succeeded"), "{text}");

    let report = mibci(&["latency-report", "--in", p(&ledger)]);
    assert!(stdout(&report).to_lowercase().contains("total"));
}

#[test]
fn calibrate_from_synthetic_source() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cal.rec");
    let run = mibci(&["calibrate", "--source", "synth", "--out", p(&out), "--seconds", "5", "--factor", "0"]);
    assert!(stdout(&run).contains("2 markers"), "{}", stdout(&run));
    let rec = mibci::signal::load_recording(&out).unwrap();
    assert_eq!(rec.samples.ncols(), 5 * 250);
}
