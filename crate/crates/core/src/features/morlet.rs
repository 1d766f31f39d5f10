use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;

use super::{FeatureError, FeatureResult, FeatureTensor};
use crate::signal::EpochSet;

/// Gaussian envelope support, in standard deviations each side.
const SUPPORT_SIGMAS: f64 = 5.0;

/// Complex Morlet filter bank evaluated only at decimated output positions.
#[derive(Debug, Clone)]
pub struct MorletBank {
    pub freqs_hz: Vec<f64>,
    pub n_cycles: f64,
    pub time_decim: usize,
    pub sample_rate_hz: f64,
    wavelets: Vec<Vec<Complex64>>,
}

impl MorletBank {
    /// Wavelets are scaled to unit gain at their centre frequency, so a
    /// complex exponential of amplitude `a` at `f` yields power `a²`.
    pub fn new(freqs_hz: &[f64], n_cycles: f64, time_decim: usize, sample_rate_hz: f64) -> FeatureResult<Self> {
        if freqs_hz.is_empty() {
            return Err(FeatureError::Parameter("empty frequency grid".into()));
        }
        if !(n_cycles > 0.0) || time_decim == 0 || !(sample_rate_hz > 0.0) {
            return Err(FeatureError::Parameter("n_cycles, decimation and sample rate must be positive".into()));
        }
        let nyquist = sample_rate_hz / 2.0;
        if let Some(f) = freqs_hz.iter().find(|&&f| !(f > 0.0 && f < nyquist)) {
            return Err(FeatureError::Parameter(format!(
                "frequency {f} Hz outside (0, {nyquist}) Hz"
            )));
        }
        let wavelets = freqs_hz
            .iter()
            .map(|&f| {
                let sigma_t = n_cycles / (2.0 * std::f64::consts::PI * f);
                let half = (SUPPORT_SIGMAS * sigma_t * sample_rate_hz).ceil() as i64;
                let mut w: Vec<Complex64> = (-half..=half)
                    .map(|k| {
                        let t = k as f64 / sample_rate_hz;
                        let env = (-t * t / (2.0 * sigma_t * sigma_t)).exp();
                        Complex64::from_polar(env, 2.0 * std::f64::consts::PI * f * t)
                    })
                    .collect();
                let gain: f64 = w.iter().map(|c| c.norm()).sum();
                w.iter_mut().for_each(|c| *c /= gain);
                w
            })
            .collect();
        Ok(Self {
            freqs_hz: freqs_hz.to_vec(),
            n_cycles,
            time_decim,
            sample_rate_hz,
            wavelets,
        })
    }

    pub fn n_freqs(&self) -> usize {
        self.freqs_hz.len()
    }

    pub fn n_features(&self, n_channels: usize) -> usize {
        n_channels * self.n_freqs()
    }

    pub fn n_steps(&self, n_frames: usize) -> usize {
        n_frames.div_ceil(self.time_decim)
    }

    /// Frames needed for `n_cycles` at the lowest frequency.
    pub fn min_frames(&self) -> usize {
        let fmin = self.freqs_hz.iter().copied().fold(f64::INFINITY, f64::min);
        (self.n_cycles * self.sample_rate_hz / fmin).ceil() as usize
    }

    /// Power of one `[channels × frames]` segment as `[channels·freqs × steps]`,
    /// row `ch * n_freqs + f`. Zero-padded centred convolution.
    pub fn power_window(&self, x: ArrayView2<f64>) -> FeatureResult<Array2<f64>> {
        let n = x.ncols();
        if n < self.min_frames() {
            return Err(FeatureError::Parameter(format!(
                "{n} frames cannot hold {} cycles at the lowest frequency ({} frames needed)",
                self.n_cycles,
                self.min_frames()
            )));
        }
        let steps = self.n_steps(n);
        let n_f = self.n_freqs();
        let mut out = Array2::zeros((x.nrows() * n_f, steps));
        for (ch, row) in x.rows().into_iter().enumerate() {
            let row = row.to_vec();
            for (fi, w) in self.wavelets.iter().enumerate() {
                let half = (w.len() / 2) as i64;
                for (s, t) in (0..n).step_by(self.time_decim).enumerate() {
                    // y[t] = Σ_k x[t - k] w[k + half]
                    let lo = (t as i64 - (n as i64 - 1)).max(-half);
                    let hi = (t as i64).min(half);
                    let mut acc = Complex64::new(0.0, 0.0);
                    for k in lo..=hi {
                        acc += w[(k + half) as usize] * row[(t as i64 - k) as usize];
                    }
                    out[(ch * n_f + fi, s)] = acc.norm_sqr();
                }
            }
        }
        Ok(out)
    }

    /// Power for every epoch of `set`.
    pub fn power(&self, set: &EpochSet) -> FeatureResult<FeatureTensor> {
        if (set.sample_rate_hz - self.sample_rate_hz).abs() > 1e-9 {
            return Err(FeatureError::Parameter(format!(
                "bank built for {} Hz, epochs at {} Hz",
                self.sample_rate_hz, set.sample_rate_hz
            )));
        }
        let n = set.n_epochs();
        let mut data = Array3::zeros((n, self.n_features(set.n_channels()), self.n_steps(set.n_frames())));
        for (i, epoch) in set.epochs.axis_iter(Axis(0)).enumerate() {
            data.index_axis_mut(Axis(0), i).assign(&self.power_window(epoch)?);
        }
        Ok(FeatureTensor {
            data,
            static_block: Array2::zeros((n, 0)),
            labels: set.labels.clone(),
            class_names: set.class_names.clone(),
            origins: set.origins.clone(),
        })
    }
}

/// Single-trial Morlet power of every epoch, time axis decimated.
pub fn morlet_power(set: &EpochSet, freqs_hz: &[f64], n_cycles: f64, time_decim: usize) -> FeatureResult<FeatureTensor> {
    MorletBank::new(freqs_hz, n_cycles, time_decim, set.sample_rate_hz)?.power(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::EpochOrigin;
    use ndarray::Array3;
    use std::f64::consts::PI;

    fn grid() -> Vec<f64> {
        (0..14).map(|i| 6.0 + 2.0 * i as f64).collect()
    }

    fn set_from(epochs: Array3<f64>) -> EpochSet {
        let n = epochs.shape()[0];
        let c = epochs.shape()[1];
        EpochSet {
            epochs,
            labels: vec![0; n],
            class_names: vec!["a".into()],
            channel_names: (0..c).map(|i| format!("c{i}")).collect(),
            sample_rate_hz: 250.0,
            tmin: 0.0,
            tmax: 3.0,
            baseline: None,
            norm: None,
            origins: (0..n).map(|epoch| EpochOrigin { epoch, offset: 0 }).collect(),
        }
    }

    /// Gain of a centred Gaussian-windowed exponential at `f` probed at `f0`,
    /// from the continuous Fourier transform of the envelope.
    fn analytic_gain(f: f64, f0: f64, n_cycles: f64) -> f64 {
        let sigma_t = n_cycles / (2.0 * PI * f);
        (-2.0 * PI * PI * sigma_t * sigma_t * (f0 - f).powi(2)).exp()
    }

    #[test]
    fn sinusoid_peaks_at_its_frequency() {
        let amp = 3.0;
        let epochs = Array3::from_shape_fn((1, 3, 750), |(_, c, t)| {
            if c == 1 {
                0.0
            } else {
                amp * (2.0 * PI * 10.0 * t as f64 / 250.0).sin()
            }
        });
        let out = morlet_power(&set_from(epochs), &grid(), 2.0, 3).unwrap();
        assert_eq!(out.n_steps(), 250);
        let centre = 125;
        for ch in [0, 2] {
            let col: Vec<f64> = (0..14).map(|f| out.data[(0, ch * 14 + f, centre)]).collect();
            let best = col.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(grid()[best], 10.0);
            // sin(ωt) = (e^{iωt} - e^{-iωt}) / 2i, each exponential passing with
            // the envelope's Fourier gain; at t = 1.5 s the cross term has cos(2ωt) = 1.
            let t = 3.0 * centre as f64 / 250.0;
            for (fi, &f) in grid().iter().enumerate() {
                let (g1, g2) = (analytic_gain(f, 10.0, 2.0), analytic_gain(f, -10.0, 2.0));
                let cross = (2.0 * 2.0 * PI * 10.0 * t).cos();
                let expected = (amp / 2.0).powi(2) * (g1 * g1 + g2 * g2 - 2.0 * g1 * g2 * cross);
                assert!((col[fi] - expected).abs() < 0.01 * (amp / 2.0).powi(2), "{f} Hz: {} vs {expected}", col[fi]);
            }
        }
        assert!(out.data.index_axis(Axis(0), 0).row(14 + 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_epoch_gives_zero_power() {
        let out = morlet_power(&set_from(Array3::zeros((2, 2, 250))), &grid(), 2.0, 3).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
        assert_eq!(out.n_steps(), 84);
    }

    #[test]
    fn power_scales_quadratically() {
        let x = Array3::from_shape_fn((1, 2, 250), |(_, c, t)| ((t * (c + 3)) as f64 * 0.11).sin());
        let a = morlet_power(&set_from(x.clone()), &grid(), 2.0, 3).unwrap();
        let b = morlet_power(&set_from(x * 2.5), &grid(), 2.0, 3).unwrap();
        for (p, q) in a.data.iter().zip(b.data.iter()) {
            assert!((q - 6.25 * p).abs() <= 1e-9 * q.abs().max(1e-12));
        }
    }

    #[test]
    fn out_of_range_grid_is_rejected() {
        for bad in [vec![130.0], vec![0.0], vec![]] {
            assert!(matches!(MorletBank::new(&bad, 2.0, 3, 250.0), Err(FeatureError::Parameter(_))));
        }
    }

    #[test]
    fn too_short_epoch_is_rejected() {
        let set = set_from(Array3::zeros((1, 1, 40)));
        assert!(matches!(morlet_power(&set, &grid(), 2.0, 3), Err(FeatureError::Parameter(_))));
    }
}
