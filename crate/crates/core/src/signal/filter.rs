//! Streaming IIR band-pass filtering in second-order sections.
//!
//! The band-pass is a Chebyshev type II design: analog prototype, low-pass to
//! band-pass transform, then a pre-warped bilinear transform. Coefficients are
//! stored as cascaded biquads and applied in transposed direct form II with a
//! per-channel delay line, so a signal filtered chunk by chunk is bit-identical
//! to the same signal filtered in one call.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::types::SampleChunk;
use super::{SignalError, SignalResult};

/// Design parameters for the default band-pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandpassSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    /// Band-pass order (twice the analog prototype order).
    pub order: usize,
    pub stopband_db: f64,
    pub sample_rate_hz: f64,
}

impl Default for BandpassSpec {
    fn default() -> Self {
        Self {
            low_hz: 1.0,
            high_hz: 40.0,
            order: 12,
            stopband_db: 40.0,
            sample_rate_hz: 250.0,
        }
    }
}

/// Stopband edges sit at half the low cutoff and 1.2x the high cutoff.
const STOP_LOW_FACTOR: f64 = 0.5;
const STOP_HIGH_FACTOR: f64 = 1.2;
/// Extra stopband depth so the nominal attenuation holds after rounding.
const STOPBAND_MARGIN_DB: f64 = 0.1;

impl BandpassSpec {
    pub fn new(low_hz: f64, high_hz: f64, order: usize, stopband_db: f64, sample_rate_hz: f64) -> Self {
        Self { low_hz, high_hz, order, stopband_db, sample_rate_hz }
    }

    /// Frequencies (Hz) at which the response first reaches the stopband level.
    pub fn stopband_edges(&self) -> (f64, f64) {
        (self.low_hz * STOP_LOW_FACTOR, self.high_hz * STOP_HIGH_FACTOR)
    }

    fn validate(&self) -> SignalResult<()> {
        let nyq = self.sample_rate_hz / 2.0;
        if !(self.sample_rate_hz > 0.0) {
            return Err(SignalError::Parameter("sample rate must be positive".into()));
        }
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < nyq) {
            return Err(SignalError::Parameter(format!(
                "band edges must satisfy 0 < low < high < Nyquist ({nyq} Hz), got {}..{}",
                self.low_hz, self.high_hz
            )));
        }
        let (_, stop_hi) = self.stopband_edges();
        if stop_hi >= nyq {
            return Err(SignalError::Parameter(format!(
                "upper stopband edge {stop_hi} Hz is beyond Nyquist ({nyq} Hz)"
            )));
        }
        if self.order < 4 || self.order % 2 != 0 {
            return Err(SignalError::Parameter(format!(
                "band-pass order must be even and >= 4, got {}",
                self.order
            )));
        }
        if !(self.stopband_db > 0.0) {
            return Err(SignalError::Parameter("stopband attenuation must be positive".into()));
        }
        Ok(())
    }
}

/// One second-order section, `a[0]` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + self.b[1] * z1 + self.b[2] * z2;
        let den = self.a[0] + self.a[1] * z1 + self.a[2] * z2;
        num / den
    }

    fn poles(&self) -> [Complex64; 2] {
        quadratic_roots(self.a[0], self.a[1], self.a[2])
    }
}

/// Cascaded biquads plus per-channel delay lines.
#[derive(Debug, Clone)]
pub struct FilterState {
    spec: Option<BandpassSpec>,
    sections: Vec<Biquad>,
    n_channels: usize,
    /// `[channel][section] -> (s1, s2)`, flattened.
    delay: Vec<[f64; 2]>,
}

/// Design the Chebyshev II band-pass and allocate zeroed state for `n_channels`.
pub fn design_bandpass(spec: &BandpassSpec, n_channels: usize) -> SignalResult<FilterState> {
    spec.validate()?;
    let sections = cheby2_bandpass_sos(spec)?;
    let state = FilterState::from_sections(sections, n_channels)?;
    Ok(FilterState { spec: Some(spec.clone()), ..state })
}

impl FilterState {
    /// A filter from explicit sections; every section must be stable.
    pub fn from_sections(sections: Vec<Biquad>, n_channels: usize) -> SignalResult<Self> {
        for (i, s) in sections.iter().enumerate() {
            if s.b.iter().chain(s.a.iter()).any(|c| !c.is_finite()) {
                return Err(SignalError::Design(format!("section {i} has non-finite coefficients")));
            }
            if (s.a[0] - 1.0).abs() > 1e-12 {
                return Err(SignalError::Design(format!("section {i} is not normalized (a0 != 1)")));
            }
            for p in s.poles() {
                if p.norm() >= 1.0 - 1e-9 {
                    return Err(SignalError::Design(format!(
                        "section {i} has a pole at radius {} (unstable)",
                        p.norm()
                    )));
                }
            }
        }
        let delay = vec![[0.0; 2]; n_channels * sections.len()];
        Ok(Self { spec: None, sections, n_channels, delay })
    }

    /// Zero-order pass-through.
    pub fn identity(n_channels: usize) -> Self {
        Self { spec: None, sections: Vec::new(), n_channels, delay: Vec::new() }
    }

    pub fn spec(&self) -> Option<&BandpassSpec> {
        self.spec.as_ref()
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn poles(&self) -> Vec<Complex64> {
        self.sections.iter().flat_map(|s| s.poles()).collect()
    }

    pub fn reset(&mut self) {
        self.delay.iter_mut().for_each(|d| *d = [0.0; 2]);
    }

    /// Complex response at `freq_hz` for sample rate `fs`.
    pub fn response(&self, freq_hz: f64, fs: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / fs;
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(w))
    }

    pub fn magnitude_db(&self, freq_hz: f64, fs: f64) -> f64 {
        20.0 * self.response(freq_hz, fs).norm().log10()
    }

    /// Filter a chunk, advancing the delay lines.
    pub fn apply(&mut self, chunk: &SampleChunk) -> SignalResult<SampleChunk> {
        let mut out = chunk.samples.clone();
        self.process_in_place(&mut out)?;
        Ok(chunk.with_samples(out))
    }

    /// Filter `[channels × frames]` data in place.
    pub fn process_in_place(&mut self, data: &mut ndarray::Array2<f64>) -> SignalResult<()> {
        if data.nrows() != self.n_channels {
            return Err(SignalError::Shape(format!(
                "filter holds state for {} channels, data has {}",
                self.n_channels,
                data.nrows()
            )));
        }
        let n_sec = self.sections.len();
        if n_sec == 0 {
            return Ok(());
        }
        for (ch, mut row) in data.rows_mut().into_iter().enumerate() {
            let delay = &mut self.delay[ch * n_sec..(ch + 1) * n_sec];
            for x in row.iter_mut() {
                let mut v = *x;
                for (s, d) in self.sections.iter().zip(delay.iter_mut()) {
                    let y = s.b[0] * v + d[0];
                    d[0] = s.b[1] * v - s.a[1] * y + d[1];
                    d[1] = s.b[2] * v - s.a[2] * y;
                    v = y;
                }
                *x = v;
            }
        }
        Ok(())
    }

    /// Group delay `-dφ/dω` in seconds at each frequency of the grid.
    pub fn group_delay(&self, freqs_hz: &[f64], fs: f64) -> SignalResult<Vec<f64>> {
        let nyq = fs / 2.0;
        freqs_hz
            .iter()
            .map(|&f| {
                if !(f > 0.0 && f < nyq) {
                    return Err(SignalError::Parameter(format!(
                        "group delay frequency {f} Hz outside (0, {nyq})"
                    )));
                }
                let w = 2.0 * PI * f / fs;
                let samples: f64 = self
                    .sections
                    .iter()
                    .map(|s| poly_group_delay(&s.b, w) - poly_group_delay(&s.a, w))
                    .sum();
                Ok(samples / fs)
            })
            .collect()
    }
}

/// Group delay (samples) of the FIR polynomial `Σ c_k z^-k`.
fn poly_group_delay(c: &[f64; 3], w: f64) -> f64 {
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = Complex64::new(0.0, 0.0);
    for (k, &ck) in c.iter().enumerate() {
        let e = Complex64::from_polar(1.0, -w * k as f64);
        num += ck * k as f64 * e;
        den += ck * e;
    }
    (num / den).re
}

/// Streaming filter entry point.
pub fn apply_filter(state: &mut FilterState, chunk: &SampleChunk) -> SignalResult<SampleChunk> {
    state.apply(chunk)
}

/// Group delay in seconds over `freq_grid_hz`.
pub fn measure_group_delay(state: &FilterState, freq_grid_hz: &[f64], fs: f64) -> SignalResult<Vec<f64>> {
    state.group_delay(freq_grid_hz, fs)
}

fn quadratic_roots(a: f64, b: f64, c: f64) -> [Complex64; 2] {
    if a == 0.0 {
        // Degenerate section: linear or constant denominator.
        if b == 0.0 {
            return [Complex64::new(0.0, 0.0); 2];
        }
        return [Complex64::new(-c / b, 0.0), Complex64::new(0.0, 0.0)];
    }
    // Roots of a + b z^-1 + c z^-2, i.e. of a z^2 + b z + c.
    let disc = Complex64::new(b * b - 4.0 * a * c, 0.0).sqrt();
    [(-b + disc) / (2.0 * a), (-b - disc) / (2.0 * a)]
}

struct Zpk {
    zeros: Vec<Complex64>,
    poles: Vec<Complex64>,
    gain: f64,
}

/// Analog Chebyshev II low-pass prototype with stopband edge at 1 rad/s.
fn cheby2_prototype(n: usize, rs_db: f64) -> Zpk {
    let de = 1.0 / (10f64.powf(0.1 * rs_db) - 1.0).sqrt();
    let mu = (1.0 / de).asinh() / n as f64;
    let ms: Vec<f64> = (0..n).map(|i| -(n as f64) + 1.0 + 2.0 * i as f64).collect();
    let zeros: Vec<Complex64> = ms
        .iter()
        .filter(|&&m| m != 0.0)
        .map(|&m| Complex64::new(0.0, 1.0 / (m * PI / (2.0 * n as f64)).sin()))
        .collect();
    let poles: Vec<Complex64> = ms
        .iter()
        .map(|&m| {
            let p = -Complex64::from_polar(1.0, PI * m / (2.0 * n as f64));
            let p = Complex64::new(mu.sinh() * p.re, mu.cosh() * p.im);
            1.0 / p
        })
        .collect();
    let num: Complex64 = poles.iter().map(|p| -p).product();
    let den: Complex64 = zeros.iter().map(|z| -z).product();
    Zpk { zeros, poles, gain: (num / den).re }
}

fn lp_to_bp(proto: Zpk, wo: f64, bw: f64) -> Zpk {
    let split = |roots: &[Complex64]| -> Vec<Complex64> {
        let scaled: Vec<Complex64> = roots.iter().map(|r| r * bw / 2.0).collect();
        let mut out: Vec<Complex64> =
            scaled.iter().map(|r| r + (r * r - wo * wo).sqrt()).collect();
        out.extend(scaled.iter().map(|r| r - (r * r - wo * wo).sqrt()));
        out
    };
    let degree = proto.poles.len() - proto.zeros.len();
    let mut zeros = split(&proto.zeros);
    zeros.extend(std::iter::repeat(Complex64::new(0.0, 0.0)).take(degree));
    Zpk {
        zeros,
        poles: split(&proto.poles),
        gain: proto.gain * bw.powi(degree as i32),
    }
}

fn bilinear(analog: Zpk, fs: f64) -> Zpk {
    let fs2 = 2.0 * fs;
    let degree = analog.poles.len() - analog.zeros.len();
    let mut zeros: Vec<Complex64> = analog.zeros.iter().map(|z| (fs2 + z) / (fs2 - z)).collect();
    zeros.extend(std::iter::repeat(Complex64::new(-1.0, 0.0)).take(degree));
    let poles = analog.poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    let num: Complex64 = analog.zeros.iter().map(|z| fs2 - z).product();
    let den: Complex64 = analog.poles.iter().map(|p| fs2 - p).product();
    Zpk { zeros, poles, gain: analog.gain * (num / den).re }
}

fn cheby2_bandpass_sos(spec: &BandpassSpec) -> SignalResult<Vec<Biquad>> {
    let fs = spec.sample_rate_hz;
    let (f1, f2) = spec.stopband_edges();
    let w1 = 2.0 * fs * (PI * f1 / fs).tan();
    let w2 = 2.0 * fs * (PI * f2 / fs).tan();
    let proto = cheby2_prototype(spec.order / 2, spec.stopband_db + STOPBAND_MARGIN_DB);
    let analog = lp_to_bp(proto, (w1 * w2).sqrt(), w2 - w1);
    let digital = bilinear(analog, fs);
    // Peak of the equiripple-free passband sits at the image of the analog centre.
    let centre = ((w1 * w2).sqrt() / (2.0 * fs)).atan() * 2.0;
    zpk_to_sos(digital, centre)
}

/// Group conjugate pairs into biquads, normalizing each to unit gain at `w_ref`.
fn zpk_to_sos(zpk: Zpk, w_ref: f64) -> SignalResult<Vec<Biquad>> {
    const TOL: f64 = 1e-10;
    let split = |roots: &[Complex64]| {
        let mut pairs: Vec<Complex64> = roots.iter().filter(|r| r.im > TOL).copied().collect();
        let mut reals: Vec<f64> = roots.iter().filter(|r| r.im.abs() <= TOL).map(|r| r.re).collect();
        pairs.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
        reals.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
        (pairs, reals)
    };
    let (pole_pairs, mut pole_reals) = split(&zpk.poles);
    let (mut zero_pairs, mut zero_reals) = split(&zpk.zeros);

    // Each unit is a set of one or two poles; reals are paired up.
    let mut units: Vec<Vec<Complex64>> = pole_pairs.iter().map(|p| vec![*p, p.conj()]).collect();
    while !pole_reals.is_empty() {
        let take = pole_reals.len().min(2);
        units.push(pole_reals.drain(..take).map(|r| Complex64::new(r, 0.0)).collect());
    }
    units.sort_by(|a, b| a[0].norm().total_cmp(&b[0].norm()));

    let mut sections = Vec::with_capacity(units.len());
    for poles in units {
        let anchor = poles[0];
        let zeros: Vec<Complex64> = if let Some(idx) = nearest(&zero_pairs, anchor) {
            let z = zero_pairs.remove(idx);
            vec![z, z.conj()]
        } else {
            let mut zs = Vec::new();
            while zs.len() < poles.len() && !zero_reals.is_empty() {
                let reals: Vec<Complex64> = zero_reals.iter().map(|r| Complex64::new(*r, 0.0)).collect();
                let idx = nearest(&reals, anchor).unwrap_or(0);
                zs.push(Complex64::new(zero_reals.remove(idx), 0.0));
            }
            zs
        };
        sections.push(Biquad { b: monic_from_roots(&zeros), a: monic_from_roots(&poles) });
    }
    if !zero_pairs.is_empty() || !zero_reals.is_empty() {
        return Err(SignalError::Design("more zeros than poles after pairing".into()));
    }

    let mut total = zpk.gain;
    for s in sections.iter_mut() {
        let g = s.response(w_ref).norm();
        if !(g.is_finite() && g > 0.0) {
            return Err(SignalError::Design("section has zero gain at the passband centre".into()));
        }
        s.b.iter_mut().for_each(|c| *c /= g);
        total *= g;
    }
    if let Some(first) = sections.first_mut() {
        first.b.iter_mut().for_each(|c| *c *= total);
    }
    Ok(sections)
}

fn nearest(candidates: &[Complex64], target: Complex64) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - target).norm().total_cmp(&(b.1 - target).norm()))
        .map(|(i, _)| i)
}

fn monic_from_roots(roots: &[Complex64]) -> [f64; 3] {
    match roots {
        [] => [1.0, 0.0, 0.0],
        [r] => [1.0, -r.re, 0.0],
        [r1, r2] => [1.0, -(r1 + r2).re, (r1 * r2).re],
        _ => unreachable!("sections hold at most two roots"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn default_filter() -> FilterState {
        design_bandpass(&BandpassSpec::default(), 1).unwrap()
    }

    #[test]
    fn attenuates_line_noise_and_dc() {
        let f = default_filter();
        assert!(f.magnitude_db(50.0, 250.0) <= -40.0);
        assert!(f.magnitude_db(0.0, 250.0) <= -40.0);
        assert!(f.magnitude_db(0.25, 250.0) <= -40.0);
    }

    #[test]
    fn passband_within_one_db() {
        let f = default_filter();
        for i in 0..=220 {
            let hz = 8.0 + 0.1 * i as f64;
            let db = f.magnitude_db(hz, 250.0);
            assert!(db.abs() <= 1.0, "{hz} Hz -> {db} dB");
        }
    }

    #[test]
    fn order_eight_design_meets_twenty_hz_and_fifty_hz() {
        let f = design_bandpass(&BandpassSpec::new(1.0, 40.0, 8, 40.0, 250.0), 1).unwrap();
        assert!(f.magnitude_db(20.0, 250.0).abs() <= 1.0);
        assert!(f.magnitude_db(50.0, 250.0) <= -40.0);
        assert_eq!(f.sections().len(), 4);
    }

    #[test]
    fn odd_prototype_order_is_supported() {
        let f = design_bandpass(&BandpassSpec::new(1.0, 40.0, 6, 40.0, 250.0), 2).unwrap();
        assert_eq!(f.sections().len(), 3);
        assert!(f.magnitude_db(15.0, 250.0).abs() < 3.0);
    }

    #[test]
    fn poles_strictly_inside_unit_circle() {
        for order in [4, 6, 8, 10, 12, 16] {
            let f = design_bandpass(&BandpassSpec::new(1.0, 40.0, order, 40.0, 250.0), 1).unwrap();
            assert!(f.poles().iter().all(|p| p.norm() < 1.0 - 1e-9), "order {order}");
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let bad = [
            BandpassSpec::new(0.0, 40.0, 8, 40.0, 250.0),
            BandpassSpec::new(40.0, 1.0, 8, 40.0, 250.0),
            BandpassSpec::new(1.0, 130.0, 8, 40.0, 250.0),
            BandpassSpec::new(1.0, 110.0, 8, 40.0, 250.0), // stop edge beyond Nyquist
            BandpassSpec::new(1.0, 40.0, 7, 40.0, 250.0),
            BandpassSpec::new(1.0, 40.0, 2, 40.0, 250.0),
        ];
        for spec in bad {
            assert!(matches!(design_bandpass(&spec, 1), Err(SignalError::Parameter(_))), "{spec:?}");
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut f = design_bandpass(&BandpassSpec::default(), 3).unwrap();
        let mut data = Array2::zeros((3, 500));
        f.process_in_place(&mut data).unwrap();
        assert!(data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut f = design_bandpass(&BandpassSpec::default(), 3).unwrap();
        let mut data = Array2::zeros((2, 10));
        assert!(matches!(f.process_in_place(&mut data), Err(SignalError::Shape(_))));
    }

    #[test]
    fn identity_filter_has_zero_group_delay() {
        let f = FilterState::identity(1);
        let d = f.group_delay(&[1.0, 10.0, 100.0], 250.0).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
        assert!(f.group_delay(&[125.0], 250.0).is_err());
        assert!(f.group_delay(&[0.0], 250.0).is_err());
    }

    #[test]
    fn single_pole_group_delay_matches_closed_form() {
        let a = 0.8;
        let fs = 250.0;
        let f = FilterState::from_sections(
            vec![Biquad { b: [1.0 - a, 0.0, 0.0], a: [1.0, -a, 0.0] }],
            1,
        )
        .unwrap();
        let grid: Vec<f64> = (1..100).map(|i| i as f64 * 1.2).collect();
        let got = f.group_delay(&grid, fs).unwrap();
        for (hz, d) in grid.iter().zip(got) {
            let w = 2.0 * PI * hz / fs;
            let expected = (a * w.cos() - a * a) / (1.0 - 2.0 * a * w.cos() + a * a) / fs;
            assert!((d - expected).abs() < 1e-6, "{hz}: {d} vs {expected}");
        }
    }

    #[test]
    fn fifty_hz_steady_state_rms_below_one_percent() {
        let fs = 250.0;
        let mut f = design_bandpass(&BandpassSpec::default(), 1).unwrap();
        let n = 5000;
        let mut data = Array2::from_shape_fn((1, n), |(_, t)| (2.0 * PI * 50.0 * t as f64 / fs).sin());
        let input_rms = (0.5f64).sqrt();
        f.process_in_place(&mut data).unwrap();
        let tail = data.slice(ndarray::s![0, n / 2..]);
        let rms = (tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64).sqrt();
        // Oracle: steady-state gain is |H(50 Hz)|.
        let predicted = f.response(50.0, fs).norm() * input_rms;
        assert!(rms <= 0.01 * input_rms, "rms {rms}");
        assert!((rms - predicted).abs() < 1e-3 * input_rms);
    }
}
