//! Artifact subspace reconstruction.
//!
//! Calibration estimates a robust covariance from clean data, takes its
//! matrix square root as the mixing matrix `M`, and derives per-direction
//! amplitude thresholds `mu_i + k * sigma_i` from the RMS of the calibration
//! data projected onto the eigenvectors of `M`. At run time each window is
//! eigendecomposed; directions whose variance exceeds the projected threshold
//! are dropped and the data is rebuilt from the retained subspace through
//! `R = M * pinv(keep ∘ (Vᵀ M)) * Vᵀ`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::preprocess::median;
use super::types::{Recording, SampleChunk};
use super::{SignalError, SignalResult};

/// Minimum calibration length accepted.
pub const MIN_CALIBRATION_S: f64 = 30.0;
/// Block length for the robust covariance estimate.
const COVARIANCE_BLOCK_S: f64 = 1.0;
/// At most this fraction of directions may be rejected in one window.
const MAX_REJECT_FRACTION: f64 = 0.66;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrModel {
    /// Matrix square root of the robust calibration covariance, `[C × C]`.
    pub mixing: Array2<f64>,
    /// `diag(mu + k sigma) · Vᵀ`, `[C × C]`.
    pub threshold_operator: Array2<f64>,
    pub component_mean: Vec<f64>,
    pub component_std: Vec<f64>,
    pub cutoff_k: f64,
    pub window_frames: usize,
    pub sample_rate_hz: f64,
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn to_array(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Second-moment matrix `X Xᵀ / n` of a `[C × n]` block.
fn covariance(x: &ndarray::ArrayView2<f64>) -> DMatrix<f64> {
    let n = x.ncols().max(1) as f64;
    let c = x.dot(&x.t()) / n;
    to_dmatrix(&c)
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(m.nrows(), m.ncols());
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        // Fix the sign so decompositions are reproducible.
        let (imax, _) = col.iter().enumerate().fold((0, 0.0), |acc, (i, v)| {
            if v.abs() > acc.1 {
                (i, v.abs())
            } else {
                acc
            }
        });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Fit an ASR model on clean, band-pass filtered calibration data.
pub fn asr_calibrate(calibration: &Recording, cutoff_k: f64, window_s: f64) -> SignalResult<AsrModel> {
    let fs = calibration.montage.sample_rate_hz;
    if calibration.duration_s() + 1e-9 < MIN_CALIBRATION_S {
        return Err(SignalError::Calibration(format!(
            "calibration must last at least {MIN_CALIBRATION_S} s, got {:.2} s",
            calibration.duration_s()
        )));
    }
    if !(cutoff_k > 0.0) || !(window_s > 0.0) {
        return Err(SignalError::Parameter("cutoff and window length must be positive".into()));
    }
    let x = &calibration.samples;
    let n_ch = x.nrows();
    let window_frames = (window_s * fs).round() as usize;
    let block = (COVARIANCE_BLOCK_S * fs).round() as usize;
    if window_frames < 2 || block < 2 {
        return Err(SignalError::Parameter("window too short for the sample rate".into()));
    }

    // Element-wise median of per-block covariances (50% overlap).
    let starts: Vec<usize> = (0..=x.ncols() - block).step_by(block / 2).collect();
    let covs: Vec<DMatrix<f64>> = starts
        .iter()
        .map(|&s| covariance(&x.slice(ndarray::s![.., s..s + block])))
        .collect();
    let robust = DMatrix::from_fn(n_ch, n_ch, |i, j| {
        median(&covs.iter().map(|c| c[(i, j)]).collect::<Vec<_>>())
    });
    let (evals, evecs) = sorted_eigen(robust);
    let top = evals.last().copied().unwrap_or(0.0);
    if !(top > 0.0) || evals[0] <= 1e-10 * top {
        return Err(SignalError::Calibration(
            "calibration covariance is rank deficient; reject bad channels before ASR".into(),
        ));
    }
    let sqrt_d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        n_ch,
        evals.iter().map(|v| v.sqrt()),
    ));
    let mixing = &evecs * sqrt_d * evecs.transpose();

    // Component RMS over sliding processing windows.
    let projected = to_array(&evecs.transpose()) .dot(x);
    let hop = (window_frames / 2).max(1);
    let win_starts: Vec<usize> = (0..=x.ncols() - window_frames).step_by(hop).collect();
    let mut mu = Vec::with_capacity(n_ch);
    let mut sigma = Vec::with_capacity(n_ch);
    for comp in projected.rows() {
        let rms: Vec<f64> = win_starts
            .iter()
            .map(|&s| {
                let seg = comp.slice(ndarray::s![s..s + window_frames]);
                (seg.iter().map(|v| v * v).sum::<f64>() / window_frames as f64).sqrt()
            })
            .collect();
        let m = median(&rms);
        let mut s = 1.4826 * median(&rms.iter().map(|r| (r - m).abs()).collect::<Vec<_>>());
        if !(s > 0.0) {
            let mean = rms.iter().sum::<f64>() / rms.len() as f64;
            s = (rms.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rms.len() as f64).sqrt();
        }
        if !(s > 0.0) {
            s = 1e-6 * m.max(f64::MIN_POSITIVE);
        }
        mu.push(m);
        sigma.push(s);
    }
    let limits = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        n_ch,
        mu.iter().zip(&sigma).map(|(m, s)| m + cutoff_k * s),
    ));
    let threshold_operator = limits * evecs.transpose();
    if threshold_operator.iter().any(|v| !v.is_finite()) {
        return Err(SignalError::Calibration("non-finite rejection thresholds".into()));
    }
    Ok(AsrModel {
        mixing: to_array(&mixing),
        threshold_operator: to_array(&threshold_operator),
        component_mean: mu,
        component_std: sigma,
        cutoff_k,
        window_frames,
        sample_rate_hz: fs,
    })
}

impl AsrModel {
    pub fn n_channels(&self) -> usize {
        self.mixing.nrows()
    }

    /// Reconstruction matrix for a window, or `None` when nothing exceeds threshold.
    pub fn reconstruction(&self, window: &ndarray::ArrayView2<f64>) -> SignalResult<Option<Array2<f64>>> {
        let n_ch = self.n_channels();
        if window.nrows() != n_ch {
            return Err(SignalError::Shape(format!(
                "ASR model has {n_ch} channels, window has {}",
                window.nrows()
            )));
        }
        let (evals, evecs) = sorted_eigen(covariance(window));
        let t = to_dmatrix(&self.threshold_operator);
        let tv = &t * &evecs;
        let max_reject = ((n_ch as f64) * MAX_REJECT_FRACTION).round() as usize;
        let keep: Vec<bool> = (0..n_ch)
            .map(|j| {
                let limit: f64 = tv.column(j).iter().map(|v| v * v).sum();
                // Only the largest `max_reject` directions are candidates.
                evals[j] < limit || j + max_reject < n_ch
            })
            .collect();
        if keep.iter().all(|&k| k) {
            return Ok(None);
        }
        let m = to_dmatrix(&self.mixing);
        let mut vtm = evecs.transpose() * &m;
        for (j, &k) in keep.iter().enumerate() {
            if !k {
                vtm.row_mut(j).fill(0.0);
            }
        }
        let pinv = vtm
            .pseudo_inverse(1e-12)
            .map_err(|e| SignalError::Calibration(format!("pseudo-inverse failed: {e}")))?;
        let r = m * pinv * evecs.transpose();
        Ok(Some(to_array(&r)))
    }
}

/// Clean one processing window. Returns the input untouched when no
/// direction exceeds its threshold.
pub fn asr_process(model: &AsrModel, window: &SampleChunk) -> SignalResult<SampleChunk> {
    if window.n_frames() != model.window_frames {
        return Err(SignalError::Shape(format!(
            "ASR window must be {} frames, got {}",
            model.window_frames,
            window.n_frames()
        )));
    }
    match model.reconstruction(&window.samples.view())? {
        None => Ok(window.clone()),
        Some(r) => Ok(window.with_samples(r.dot(&window.samples))),
    }
}

/// Streaming ASR: each fixed-size block is cleaned with the reconstruction
/// derived from the trailing processing window that ends at the block.
#[derive(Debug, Clone)]
pub struct AsrStream {
    model: AsrModel,
    block_frames: usize,
    history: VecDeque<Vec<f64>>,
    pending: Vec<Vec<f64>>,
}

impl AsrStream {
    pub fn new(model: AsrModel, block_frames: usize) -> SignalResult<Self> {
        if block_frames == 0 || block_frames > model.window_frames {
            return Err(SignalError::Parameter(format!(
                "ASR block must be 1..={} frames",
                model.window_frames
            )));
        }
        Ok(Self { model, block_frames, history: VecDeque::new(), pending: Vec::new() })
    }

    pub fn model(&self) -> &AsrModel {
        &self.model
    }

    /// Frames buffered but not yet emitted.
    pub fn pending_frames(&self) -> usize {
        self.pending.len()
    }

    /// Push `[C × n]` frames; returns the cleaned frames of every completed block.
    pub fn push(&mut self, data: &Array2<f64>) -> SignalResult<Array2<f64>> {
        let n_ch = self.model.n_channels();
        if data.nrows() != n_ch {
            return Err(SignalError::Shape(format!(
                "ASR stream has {n_ch} channels, input has {}",
                data.nrows()
            )));
        }
        let mut out: Vec<f64> = Vec::new();
        let mut out_frames = 0;
        for col in data.columns() {
            self.pending.push(col.to_vec());
            if self.pending.len() == self.block_frames {
                let cleaned = self.flush_block()?;
                out_frames += cleaned.ncols();
                out.extend(cleaned.t().iter());
            }
        }
        let frames_major = Array2::from_shape_vec((out_frames, n_ch), out).expect("block shape");
        Ok(frames_major.t().to_owned())
    }

    /// Clean whatever is buffered, even a partial block.
    pub fn flush(&mut self) -> SignalResult<Array2<f64>> {
        if self.pending.is_empty() {
            return Ok(Array2::zeros((self.model.n_channels(), 0)));
        }
        self.flush_block()
    }

    fn flush_block(&mut self) -> SignalResult<Array2<f64>> {
        let n_ch = self.model.n_channels();
        let block: Vec<Vec<f64>> = std::mem::take(&mut self.pending);
        for frame in &block {
            self.history.push_back(frame.clone());
            if self.history.len() > self.model.window_frames {
                self.history.pop_front();
            }
        }
        let w = self.history.len();
        let window = Array2::from_shape_fn((n_ch, w), |(c, t)| self.history[t][c]);
        let raw = Array2::from_shape_fn((n_ch, block.len()), |(c, t)| block[t][c]);
        match self.model.reconstruction(&window.view())? {
            None => Ok(raw),
            Some(r) => Ok(r.dot(&raw)),
        }
    }
}

/// Run the streaming cleaner over a whole `[C × T]` array.
pub fn asr_clean(model: &AsrModel, data: &Array2<f64>, block_frames: usize) -> SignalResult<Array2<f64>> {
    let mut stream = AsrStream::new(model.clone(), block_frames)?;
    let body = stream.push(data)?;
    let tail = stream.flush()?;
    Ok(ndarray::concatenate![ndarray::Axis(1), body, tail])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::types::Montage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::sync::Arc;

    fn white(n_ch: usize, frames: usize, sigma: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sigma).unwrap();
        Array2::from_shape_fn((n_ch, frames), |_| n.sample(&mut rng))
    }

    fn recording(data: Array2<f64>) -> Recording {
        let montage = Montage::new((0..data.nrows()).map(|i| format!("E{i}")).collect(), 250.0).unwrap();
        Recording::new(montage, data, vec![], "cal").unwrap()
    }

    fn chunk(data: Array2<f64>) -> SampleChunk {
        let montage = Montage::new((0..data.nrows()).map(|i| format!("E{i}")).collect(), 250.0).unwrap();
        SampleChunk::new(data, 0.0, Arc::new(montage)).unwrap()
    }

    #[test]
    fn white_noise_mixing_is_scaled_identity() {
        let sigma = 7.0;
        let model = asr_calibrate(&recording(white(6, 60 * 250, sigma, 1)), 20.0, 0.5).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expected = if i == j { sigma } else { 0.0 };
                assert!((model.mixing[[i, j]] - expected).abs() < 0.1 * sigma, "M[{i},{j}]");
            }
        }
    }

    #[test]
    fn thresholds_exceed_calibration_rms() {
        let data = white(5, 60 * 250, 10.0, 2);
        let model = asr_calibrate(&recording(data.clone()), 20.0, 0.5).unwrap();
        assert!(model.component_std.iter().all(|s| s.is_finite() && *s > 0.0));
        let limits: Vec<f64> =
            model.component_mean.iter().zip(&model.component_std).map(|(m, s)| m + 20.0 * s).collect();
        // Every calibration sub-window's component RMS stays below its limit.
        let (_, v) = sorted_eigen(to_dmatrix(&model.mixing));
        let proj = to_array(&v.transpose()).dot(&data);
        for (comp, limit) in proj.rows().into_iter().zip(&limits) {
            for s in (0..comp.len() - 125).step_by(62) {
                let seg = comp.slice(ndarray::s![s..s + 125]);
                let rms = (seg.iter().map(|v| v * v).sum::<f64>() / 125.0).sqrt();
                assert!(rms < *limit);
            }
        }
    }

    #[test]
    fn calibration_is_deterministic() {
        let rec = recording(white(4, 40 * 250, 3.0, 3));
        assert_eq!(asr_calibrate(&rec, 20.0, 0.5).unwrap(), asr_calibrate(&rec, 20.0, 0.5).unwrap());
    }

    #[test]
    fn rank_deficient_calibration_fails() {
        let mut data = white(4, 40 * 250, 3.0, 4);
        let copy = data.row(0).to_owned();
        data.row_mut(3).assign(&copy);
        assert!(matches!(
            asr_calibrate(&recording(data), 20.0, 0.5),
            Err(SignalError::Calibration(_))
        ));
    }

    #[test]
    fn short_calibration_fails() {
        assert!(asr_calibrate(&recording(white(4, 20 * 250, 3.0, 5)), 20.0, 0.5).is_err());
    }

    #[test]
    fn clean_window_passes_through_exactly() {
        let model = asr_calibrate(&recording(white(6, 60 * 250, 5.0, 6)), 20.0, 0.5).unwrap();
        let window = chunk(white(6, 125, 5.0, 7));
        let out = asr_process(&model, &window).unwrap();
        assert_eq!(out.samples, window.samples);
    }

    #[test]
    fn calibration_segment_is_unchanged() {
        let data = white(6, 60 * 250, 5.0, 8);
        let model = asr_calibrate(&recording(data.clone()), 20.0, 0.5).unwrap();
        let seg = chunk(data.slice(ndarray::s![.., 1000..1125]).to_owned());
        assert_eq!(asr_process(&model, &seg).unwrap().samples, seg.samples);
    }

    #[test]
    fn wrong_window_length_is_shape_error() {
        let model = asr_calibrate(&recording(white(3, 60 * 250, 5.0, 9)), 20.0, 0.5).unwrap();
        assert!(matches!(asr_process(&model, &chunk(white(3, 100, 5.0, 1))), Err(SignalError::Shape(_))));
    }

    #[test]
    fn burst_is_suppressed_and_clean_channels_kept() {
        let sigma = 5.0;
        let model = asr_calibrate(&recording(white(8, 60 * 250, sigma, 10)), 20.0, 0.5).unwrap();
        let clean = white(8, 125, sigma, 11);
        let mut dirty = clean.clone();
        dirty.slice_mut(ndarray::s![3, 40..90]).mapv_inplace(|v| v * 50.0);
        let out = asr_process(&model, &chunk(dirty.clone())).unwrap().samples;
        let rms = |a: ndarray::ArrayView1<f64>| (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        let before = rms(dirty.slice(ndarray::s![3, 40..90]));
        let after = rms(out.slice(ndarray::s![3, 40..90]));
        assert!(after <= 0.2 * before, "burst {before} -> {after}");
        for ch in (0..8).filter(|&c| c != 3) {
            let (a, b) = (rms(out.row(ch)), rms(clean.row(ch)));
            assert!((a - b).abs() < 0.05 * b, "channel {ch}: {a} vs {b}");
            // sample-wise leakage comes from the burst eigenvector's chance
            // correlation with the other channels
            let diff = &out.row(ch) - &clean.row(ch);
            assert!(rms(diff.view()) < 0.15 * b, "channel {ch}");
        }
    }

    #[test]
    fn stream_matches_blockwise_reconstruction() {
        let model = asr_calibrate(&recording(white(4, 40 * 250, 5.0, 12)), 20.0, 0.5).unwrap();
        let mut data = white(4, 1000, 5.0, 13);
        data.slice_mut(ndarray::s![1, 400..450]).mapv_inplace(|v| v * 40.0);
        let whole = asr_clean(&model, &data, 25).unwrap();
        assert_eq!(whole.dim(), data.dim());
        // Feeding irregular chunks gives the same output.
        let mut stream = AsrStream::new(model.clone(), 25).unwrap();
        let mut parts = Vec::new();
        let mut start = 0;
        for len in [7, 33, 1, 90, 250, 619] {
            parts.push(stream.push(&data.slice(ndarray::s![.., start..start + len]).to_owned()).unwrap());
            start += len;
        }
        parts.push(stream.flush().unwrap());
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let joined = ndarray::concatenate(ndarray::Axis(1), &views).unwrap();
        assert_eq!(joined, whole);
        // The burst region was modified, the early clean region was not.
        assert_eq!(whole.slice(ndarray::s![.., ..300]), data.slice(ndarray::s![.., ..300]));
        assert_ne!(whole.slice(ndarray::s![1, 400..450]), data.slice(ndarray::s![1, 400..450]));
    }
}
