use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};

use super::messages::{ClassProbs, FeatureWindow};
use super::{RuntimeError, RuntimeResult};
use crate::classify::{mc_dropout_predict_with, softmax, ClassifierModel, Kernels, ModelBundle};
use crate::features::FeaturePipeline;
use crate::signal::preprocess::car_in_place;
use crate::signal::{design_bandpass, AsrStream, FilterState, Montage, NormStats, SampleChunk};

/// Streaming counterpart of the offline chain: band-pass, channel
/// rejection, ASR, common average, then every `hop` frames a baseline
/// corrected, normalized window turned into features.
#[derive(Debug)]
pub struct OnlinePreprocessor {
    filter: FilterState,
    keep: Vec<usize>,
    asr: Option<AsrStream>,
    common_average: bool,
    norm: NormStats,
    features: FeaturePipeline,
    /// Baseline span in frames relative to the window start.
    baseline: Option<(i64, i64)>,
    window: usize,
    lookback: usize,
    hop: usize,
    skip_frames: usize,
    fs: f64,
    history: VecDeque<Vec<f64>>,
    produced: usize,
    n_raw: usize,
}

impl OnlinePreprocessor {
    pub fn from_bundle(bundle: &ModelBundle, hop_frames: usize) -> RuntimeResult<Self> {
        if hop_frames == 0 {
            return Err(RuntimeError::Config("hop must be at least one frame".into()));
        }
        let pre = &bundle.preprocessing;
        let montage = &pre.montage;
        let fs = montage.sample_rate_hz;
        let keep: Vec<usize> = montage
            .channel_names
            .iter()
            .enumerate()
            .filter(|(_, c)| !pre.rejected.iter().any(|r| &r.label == *c))
            .map(|(i, _)| i)
            .collect();
        if pre.norm.mean.len() != keep.len() {
            return Err(RuntimeError::Startup(format!(
                "normalization covers {} channels, {} are kept",
                pre.norm.mean.len(),
                keep.len()
            )));
        }
        let asr = match &pre.asr {
            Some(model) => {
                if model.n_channels() != keep.len() {
                    return Err(RuntimeError::Startup("ASR model channel count differs from kept channels".into()));
                }
                Some(AsrStream::new(model.clone(), pre.asr_block_frames)?)
            }
            None => None,
        };
        let features = bundle.feature_pipeline()?;
        let window = features.window_frames();
        let tmin = pre.epoch.tmin;
        let baseline = pre
            .epoch
            .baseline
            .map(|(b0, b1)| (((b0 - tmin) * fs).round() as i64, ((b1 - tmin) * fs).round() as i64));
        let lookback = baseline.map_or(0, |(b0, _)| (-b0).max(0) as usize);
        let window_ahead = baseline.map_or(0, |(_, b1)| (b1 - window as i64).max(0) as usize);
        if window_ahead > 0 {
            return Err(RuntimeError::Config("baseline must end within the window for online use".into()));
        }
        Ok(Self {
            filter: design_bandpass(&pre.bandpass, montage.n_channels())?,
            keep,
            asr,
            common_average: pre.common_average,
            norm: pre.norm.clone(),
            features,
            baseline,
            window,
            lookback,
            hop: hop_frames,
            skip_frames: (pre.crop_s * fs).round() as usize,
            fs,
            history: VecDeque::new(),
            produced: 0,
            n_raw: montage.n_channels(),
        })
    }

    /// Check a stream montage against the one the model was trained on.
    pub fn check_montage(bundle: &ModelBundle, montage: &Montage) -> RuntimeResult<()> {
        let expected = &bundle.preprocessing.montage;
        if expected.channel_names != montage.channel_names {
            return Err(RuntimeError::Startup(format!(
                "stream channels {:?} do not match the model's {:?}",
                montage.channel_names, expected.channel_names
            )));
        }
        if (expected.sample_rate_hz - montage.sample_rate_hz).abs() > 1e-9 {
            return Err(RuntimeError::Startup(format!(
                "stream runs at {} Hz, model expects {} Hz",
                montage.sample_rate_hz, expected.sample_rate_hz
            )));
        }
        Ok(())
    }

    pub fn window_frames(&self) -> usize {
        self.window
    }

    /// Frames the classifier sees per window, after feature decimation.
    pub fn feature_steps(&self) -> usize {
        self.features.bank.n_steps(self.window)
    }

    /// Feed one chunk; returns the windows completed by it.
    pub fn push(&mut self, chunk: &SampleChunk) -> RuntimeResult<Vec<FeatureWindow>> {
        if chunk.n_channels() != self.n_raw {
            return Err(RuntimeError::Parameter(format!(
                "chunk has {} channels, stream has {}",
                chunk.n_channels(),
                self.n_raw
            )));
        }
        let mut data = chunk.samples.clone();
        self.filter.process_in_place(&mut data)?;
        let kept = data.select(ndarray::Axis(0), &self.keep);
        let mut clean = match &mut self.asr {
            Some(asr) => asr.push(&kept)?,
            None => kept,
        };
        if self.common_average && clean.ncols() > 0 {
            let all: Vec<usize> = (0..clean.nrows()).collect();
            car_in_place(&mut clean, &all)?;
        }
        let mut out = Vec::new();
        let cap = self.window + self.lookback;
        for col in clean.columns() {
            self.history.push_back(col.to_vec());
            if self.history.len() > cap {
                self.history.pop_front();
            }
            self.produced += 1;
            if self.produced % self.hop == 0 && self.history.len() == cap && self.produced >= self.skip_frames + self.window {
                out.push(self.emit()?);
            }
        }
        Ok(out)
    }

    fn emit(&self) -> RuntimeResult<FeatureWindow> {
        let n_ch = self.keep.len();
        let start = self.lookback;
        let mut x = Array2::from_shape_fn((n_ch, self.window), |(c, t)| self.history[start + t][c]);
        if let Some((b0, b1)) = self.baseline {
            let (lo, hi) = ((start as i64 + b0) as usize, (start as i64 + b1) as usize);
            if hi > lo {
                for c in 0..n_ch {
                    let mean = (lo..hi).map(|t| self.history[t][c]).sum::<f64>() / (hi - lo) as f64;
                    x.row_mut(c).mapv_inplace(|v| v - mean);
                }
            }
        }
        for (c, mut row) in x.rows_mut().into_iter().enumerate() {
            let (m, s) = (self.norm.mean[c], self.norm.std[c]);
            row.mapv_inplace(|v| (v - m) / s);
        }
        let features = self.features.transform_window(x.view())?;
        Ok(FeatureWindow { end_ts: self.produced as f64 / self.fs, features })
    }
}

/// Class probabilities for feature windows, with MC-dropout spread when the
/// model has dropout and more than one pass is requested.
#[derive(Debug)]
pub struct OnlineClassifier {
    model: ClassifierModel,
    kernels: Option<Kernels>,
    mc_passes: usize,
    seed: u64,
    tick: u64,
}

impl OnlineClassifier {
    pub fn new(model: ClassifierModel, steps: usize, mc_passes: usize, seed: u64) -> Self {
        let kernels = match &model {
            ClassifierModel::S4d(m) => Some(m.kernels(steps)),
            _ => None,
        };
        Self { model, kernels, mc_passes, seed, tick: 0 }
    }

    pub fn classify(&mut self, end_ts: f64, x: ArrayView2<f64>) -> RuntimeResult<ClassProbs> {
        let tick = self.tick;
        self.tick += 1;
        let (probs, std) = match (&self.model, &self.kernels) {
            (ClassifierModel::S4d(m), Some(k)) if k.len >= x.ncols() => {
                if self.mc_passes >= 2 && m.config.dropout > 0.0 {
                    let p = mc_dropout_predict_with(m, k, x, self.mc_passes, self.seed.wrapping_add(tick))?;
                    (p.mean, p.std)
                } else {
                    let p = softmax(m.forward_with(k, x)?.view()).to_vec();
                    let n = p.len();
                    (p, vec![0.0; n])
                }
            }
            (model, _) => {
                let p = model.as_classifier().predict_proba(x)?;
                let n = p.len();
                (p, vec![0.0; n])
            }
        };
        Ok(ClassProbs { end_ts, probs, std })
    }
}
