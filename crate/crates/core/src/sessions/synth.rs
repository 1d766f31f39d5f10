use std::collections::BTreeMap;
use std::f64::consts::TAU;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::schedule::CueSchedule;
use super::{SessionError, SessionResult};
use crate::signal::{Marker, Montage, Recording};

/// Task-locked power drop of one oscillation on one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub channel: String,
    pub band_hz: f64,
    /// Amplitude reduction during the task, in `[0, 1]`.
    pub erd_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub channel_names: Vec<String>,
    pub sample_rate_hz: f64,
    /// RMS of the 1/f background, microvolts.
    pub noise_rms_uv: f64,
    /// Peak amplitude of each oscillation, microvolts, before `snr`.
    pub oscillation_uv: f64,
    /// Oscillation centre frequencies present on every channel.
    pub bands_hz: Vec<f64>,
    /// Scales every oscillation amplitude.
    pub snr: f64,
    /// Phase random-walk step, radians per sample.
    pub phase_jitter: f64,
    /// Per-channel oscillation gain; channels not listed use 1.
    pub channel_gain: BTreeMap<String, f64>,
    /// class → ERD signatures; classes without an entry are unmodulated.
    pub signatures: BTreeMap<String, Vec<Signature>>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            channel_names: ["F3", "Fz", "F4", "C3", "Cz", "C4", "P3", "P4"].iter().map(|s| s.to_string()).collect(),
            sample_rate_hz: 250.0,
            noise_rms_uv: 10.0,
            oscillation_uv: 15.0,
            bands_hz: vec![10.0, 20.0],
            snr: 1.0,
            phase_jitter: 0.02,
            channel_gain: ["F3", "Fz", "F4", "P3", "P4"].iter().map(|c| (c.to_string(), 0.3)).collect(),
            signatures: default_signatures(0.5),
            seed: 0,
        }
    }
}

/// Contralateral ERD: left → C4, right → C3, at 10 and 20 Hz; rest unmodulated.
pub fn default_signatures(erd_fraction: f64) -> BTreeMap<String, Vec<Signature>> {
    let sig = |ch: &str| {
        [10.0, 20.0]
            .iter()
            .map(|&band_hz| Signature { channel: ch.into(), band_hz, erd_fraction })
            .collect::<Vec<_>>()
    };
    BTreeMap::from([("left".into(), sig("C4")), ("right".into(), sig("C3")), ("rest".into(), Vec::new())])
}

impl SynthConfig {
    pub fn with_erd(mut self, erd_fraction: f64) -> Self {
        for sigs in self.signatures.values_mut() {
            for s in sigs {
                s.erd_fraction = erd_fraction;
            }
        }
        self
    }

    pub fn montage(&self) -> SessionResult<Montage> {
        Ok(Montage::new(self.channel_names.clone(), self.sample_rate_hz)?)
    }

    pub fn validate(&self) -> SessionResult<()> {
        self.montage()?;
        if !(self.noise_rms_uv >= 0.0) || !(self.oscillation_uv >= 0.0) || !(self.snr >= 0.0) || !(self.phase_jitter >= 0.0) {
            return Err(SessionError::Config("amplitudes, snr and jitter must be non-negative".into()));
        }
        for (ch, g) in &self.channel_gain {
            if !self.channel_names.contains(ch) || !(*g >= 0.0) {
                return Err(SessionError::Config(format!("channel gain {g} for '{ch}' is invalid")));
            }
        }
        let nyquist = self.sample_rate_hz / 2.0;
        for (class, sigs) in &self.signatures {
            for s in sigs {
                if !(0.0..=1.0).contains(&s.erd_fraction) {
                    return Err(SessionError::Config(format!("erd_fraction {} for '{class}' outside [0, 1]", s.erd_fraction)));
                }
                if !self.channel_names.contains(&s.channel) {
                    return Err(SessionError::Config(format!("signature channel '{}' not in montage", s.channel)));
                }
                if !self.bands_hz.iter().any(|b| (b - s.band_hz).abs() < 1e-9) {
                    return Err(SessionError::Config(format!("signature band {} Hz is not generated", s.band_hz)));
                }
            }
        }
        if self.bands_hz.iter().any(|&b| !(b > 0.0 && b < nyquist)) {
            return Err(SessionError::Config("oscillation bands must lie in (0, Nyquist)".into()));
        }
        Ok(())
    }
}

/// Unit-RMS noise with a 1/f power spectrum.
fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.sample(StandardNormal), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex64::new(0.0, 0.0);
    for k in 1..n {
        let f = k.min(n - k) as f64;
        buf[k] /= f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.iter().map(|v| v / rms).collect()
    } else {
        x
    }
}

/// Pink background plus oscillations whose amplitude drops by the class
/// signature during each task phase. Samples are rounded to f32 precision
/// so the recording survives the file format unchanged.
pub fn synth_generate(cfg: &SynthConfig, schedule: &CueSchedule, duration_s: f64) -> SessionResult<Recording> {
    cfg.validate()?;
    if duration_s + 1e-9 < schedule.duration_s() {
        return Err(SessionError::Config(format!(
            "duration {duration_s} s is shorter than the schedule ({} s)",
            schedule.duration_s()
        )));
    }
    let fs = cfg.sample_rate_hz;
    let n = (duration_s * fs).round() as usize;
    let n_ch = cfg.channel_names.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spans: Vec<(usize, usize, &str)> = schedule
        .task_spans()
        .into_iter()
        .map(|(a, b, c)| ((a * fs).round() as usize, ((b * fs).round() as usize).min(n), c))
        .collect();

    let mut samples = Array2::<f64>::zeros((n_ch, n));
    for (ch, name) in cfg.channel_names.iter().enumerate() {
        let noise = pink_noise(n, &mut rng);
        let mut row: Vec<f64> = noise.iter().map(|v| v * cfg.noise_rms_uv).collect();
        for &band in &cfg.bands_hz {
            let mut gain = vec![1.0; n];
            for &(a, b, class) in &spans {
                let erd = cfg.signatures.get(class).and_then(|sigs| {
                    sigs.iter().find(|s| &s.channel == name && (s.band_hz - band).abs() < 1e-9)
                });
                if let Some(s) = erd {
                    gain[a..b].iter_mut().for_each(|g| *g = 1.0 - s.erd_fraction);
                }
            }
            let amp = cfg.oscillation_uv * cfg.snr * cfg.channel_gain.get(name).copied().unwrap_or(1.0);
            let step = TAU * band / fs;
            let mut phase = rng.gen_range(0.0..TAU);
            for (t, v) in row.iter_mut().enumerate() {
                *v += amp * gain[t] * phase.sin();
                phase += step + cfg.phase_jitter * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for (t, v) in row.into_iter().enumerate() {
            samples[(ch, t)] = v as f32 as f64;
        }
    }
    let markers: Vec<Marker> = schedule.markers();
    Ok(Recording::new(cfg.montage()?, samples, markers, format!("synth-{}", cfg.seed))?)
}

/// One minute of unmodulated data for ASR calibration, bracketed by
/// `calibration/start` and `calibration/end` markers.
pub fn synth_calibration(cfg: &SynthConfig, seconds: f64) -> SessionResult<Recording> {
    let schedule = CueSchedule { cues: Vec::new(), timing: Default::default(), lead_in_s: 0.0, lead_out_s: seconds, seed: cfg.seed };
    let mut rec = synth_generate(cfg, &schedule, seconds)?;
    rec.markers = vec![Marker::new(0.0, "calibration/start"), Marker::new(seconds, "calibration/end")];
    rec.session_id = format!("synth-calibration-{}", cfg.seed);
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sessions::schedule::generate_cue_sequence;

    /// Mean power in `[lo, hi]` Hz over the given segments, by direct DFT.
    fn band_power(x: &[f64], fs: f64, segments: &[(usize, usize)], lo: f64, hi: f64) -> f64 {
        let mut total = 0.0;
        for &(a, b) in segments {
            let seg = &x[a..b];
            let m = seg.len();
            let mean = seg.iter().sum::<f64>() / m as f64;
            let k_lo = (lo * m as f64 / fs).ceil() as usize;
            let k_hi = (hi * m as f64 / fs).floor() as usize;
            for k in k_lo..=k_hi {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in seg.iter().enumerate() {
                    let w = TAU * (k * t) as f64 / m as f64;
                    re += (v - mean) * w.cos();
                    im -= (v - mean) * w.sin();
                }
                total += (re * re + im * im) / (m * m) as f64;
            }
        }
        total / segments.len() as f64
    }

    fn classes() -> Vec<String> {
        vec!["left".into(), "rest".into(), "right".into()]
    }

    fn segments(s: &CueSchedule, class: &str, fs: f64) -> Vec<(usize, usize)> {
        s.task_spans()
            .into_iter()
            .filter(|x| x.2 == class)
            .map(|(a, b, _)| ((a * fs).round() as usize, (b * fs).round() as usize))
            .collect()
    }

    fn ratio(erd: f64, snr: f64, n_per: usize, seed: u64) -> f64 {
        let cfg = SynthConfig { snr, seed, ..SynthConfig::default() }.with_erd(erd);
        let s = generate_cue_sequence(&classes(), n_per, seed).unwrap();
        let rec = synth_generate(&cfg, &s, s.duration_s()).unwrap();
        let c4 = rec.samples.row(5).to_vec();
        let fs = cfg.sample_rate_hz;
        band_power(&c4, fs, &segments(&s, "left", fs), 9.0, 11.0)
            / band_power(&c4, fs, &segments(&s, "rest", fs), 9.0, 11.0)
    }

    #[test]
    fn half_amplitude_quarters_power() {
        let r = ratio(0.5, 1.0, 20, 1);
        assert!((r - 0.25).abs() < 0.15 * 0.25, "ratio {r}");
    }

    #[test]
    fn no_erd_means_no_difference() {
        let r = ratio(0.0, 1.0, 40, 2);
        assert!((r - 1.0).abs() < 0.05, "ratio {r}");
    }

    #[test]
    fn ratio_tracks_squared_amplitude() {
        for erd in [0.25, 0.5, 0.75] {
            let expected = (1.0 - erd) * (1.0 - erd);
            let r = ratio(erd, 10.0, 20, 3);
            assert!((r - expected).abs() < 0.05 * expected, "erd {erd}: {r} vs {expected}");
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let s = generate_cue_sequence(&classes(), 2, 4).unwrap();
        let cfg = SynthConfig { seed: 9, ..SynthConfig::default() };
        let a = synth_generate(&cfg, &s, s.duration_s()).unwrap();
        let b = synth_generate(&cfg, &s, s.duration_s()).unwrap();
        assert!(a.samples.iter().zip(b.samples.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.markers, b.markers);
        assert_eq!(a.markers.len(), 12);
        assert!(a.samples.iter().all(|v| (*v as f32) as f64 == *v));
    }

    #[test]
    fn config_errors() {
        let s = generate_cue_sequence(&classes(), 2, 4).unwrap();
        let short = synth_generate(&SynthConfig::default(), &s, 10.0);
        assert!(matches!(short, Err(SessionError::Config(_))));
        let bad = SynthConfig::default().with_erd(1.5);
        assert!(bad.validate().is_err());
        let mut missing = SynthConfig::default();
        missing.channel_names.retain(|c| c != "C4");
        assert!(missing.validate().is_err());
    }

    #[test]
    fn calibration_is_one_minute() {
        let rec = synth_calibration(&SynthConfig::default(), 60.0).unwrap();
        assert_eq!(rec.n_frames(), 15_000);
        assert_eq!(rec.markers[1].timestamp - rec.markers[0].timestamp, 60.0);
    }
}
