use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::types::{Marker, Recording, ReferenceScheme, SampleChunk};
use super::{SignalError, SignalResult};

/// Drop the first `seconds` of a recording and re-base marker times.
pub fn crop_head(rec: &Recording, seconds: f64) -> SignalResult<Recording> {
    if seconds < 0.0 || !seconds.is_finite() {
        return Err(SignalError::Parameter(format!("crop length must be >= 0, got {seconds}")));
    }
    let fs = rec.montage.sample_rate_hz;
    let cut = (seconds * fs).round() as usize;
    if cut == 0 {
        return Ok(rec.clone());
    }
    if cut >= rec.n_frames() {
        return Err(SignalError::Length(format!(
            "cannot crop {seconds} s from a {:.3} s recording",
            rec.duration_s()
        )));
    }
    let cut_s = cut as f64 / fs;
    let samples = rec.samples.slice(ndarray::s![.., cut..]).to_owned();
    let markers = rec
        .markers
        .iter()
        .filter(|m| m.timestamp >= cut_s)
        .map(|m| Marker::new(m.timestamp - cut_s, m.label.clone()))
        .collect();
    Recording::new(rec.montage.clone(), samples, markers, rec.session_id.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionCriteria {
    /// Longest tolerated constant run, seconds.
    pub flatline_s: f64,
    /// Robust z-score of a channel's log standard deviation against the others.
    pub noise_z: f64,
    /// Absolute amplitude considered non-physiological, microvolts.
    pub spike_uv: f64,
}

impl Default for RejectionCriteria {
    fn default() -> Self {
        Self { flatline_s: 5.0, noise_z: 5.0, spike_uv: 500.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    Flatline,
    Spike,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedChannel {
    pub label: String,
    pub reason: RejectionReason,
}

/// Smallest spread of log channel deviations used for the noise z-score.
const LOG_STD_SPREAD_FLOOR: f64 = 0.25;

/// Flag flatlined, spiking and excessively noisy channels and remove them.
pub fn reject_channels(
    rec: &Recording,
    criteria: &RejectionCriteria,
) -> SignalResult<(Recording, Vec<RejectedChannel>)> {
    let n_ch = rec.montage.n_channels();
    if n_ch < 2 {
        return Err(SignalError::Parameter("channel rejection needs at least two channels".into()));
    }
    let fs = rec.montage.sample_rate_hz;
    let flat_frames = (criteria.flatline_s * fs).round().max(1.0) as usize;
    let mut reasons: Vec<Option<RejectionReason>> = vec![None; n_ch];

    for (ch, row) in rec.samples.rows().into_iter().enumerate() {
        let mut run = 1usize;
        let mut longest = 1usize;
        for w in row.as_slice().expect("row-major samples").windows(2) {
            if (w[1] - w[0]).abs() <= 1e-9 {
                run += 1;
                longest = longest.max(run);
            } else {
                run = 1;
            }
        }
        if longest >= flat_frames {
            reasons[ch] = Some(RejectionReason::Flatline);
        } else if row.iter().any(|v| v.abs() > criteria.spike_uv) {
            reasons[ch] = Some(RejectionReason::Spike);
        }
    }

    // Robust z of log standard deviation, so the criterion is scale free.
    let log_stds: Vec<f64> = rec.samples.rows().into_iter().map(|r| r.std(0.0).max(f64::MIN_POSITIVE).ln()).collect();
    let live: Vec<f64> = (0..n_ch).filter(|&c| reasons[c].is_none()).map(|c| log_stds[c]).collect();
    if live.len() >= 3 {
        let med = median(&live);
        let mad = 1.4826 * median(&live.iter().map(|s| (s - med).abs()).collect::<Vec<_>>());
        // Near-identical channels make the MAD collapse; floor the spread.
        let scale = mad.max(LOG_STD_SPREAD_FLOOR);
        for c in 0..n_ch {
            if reasons[c].is_none() && (log_stds[c] - med) / scale > criteria.noise_z {
                reasons[c] = Some(RejectionReason::Noise);
            }
        }
    }

    let keep: Vec<usize> = (0..n_ch).filter(|&c| reasons[c].is_none()).collect();
    if keep.is_empty() {
        return Err(SignalError::DataQuality("every channel failed the rejection criteria".into()));
    }
    let rejected = (0..n_ch)
        .filter_map(|c| {
            reasons[c].map(|reason| RejectedChannel { label: rec.montage.channel_names[c].clone(), reason })
        })
        .collect();
    Ok((remove_channels(rec, &keep)?, rejected))
}

/// Keep only the given channel indices.
pub fn remove_channels(rec: &Recording, keep: &[usize]) -> SignalResult<Recording> {
    Recording::new(
        rec.montage.select(keep),
        rec.samples.select(Axis(0), keep),
        rec.markers.clone(),
        rec.session_id.clone(),
    )
}

/// Keep the channels whose labels are not in `drop`, preserving order.
pub fn drop_channels_by_label(rec: &Recording, drop: &[String]) -> SignalResult<Recording> {
    let keep: Vec<usize> = (0..rec.montage.n_channels())
        .filter(|&c| !drop.contains(&rec.montage.channel_names[c]))
        .collect();
    if keep.is_empty() {
        return Err(SignalError::DataQuality("no channels left after dropping rejected labels".into()));
    }
    remove_channels(rec, &keep)
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Subtract, per frame, the mean over `included` channels from every channel.
pub fn common_average_reference(chunk: &SampleChunk, included: &[usize]) -> SignalResult<SampleChunk> {
    let mut out = chunk.samples.clone();
    car_in_place(&mut out, included)?;
    let mut montage = (*chunk.montage).clone();
    montage.reference_scheme = ReferenceScheme::CommonAverage;
    Ok(SampleChunk {
        samples: out,
        start_timestamp: chunk.start_timestamp,
        montage: std::sync::Arc::new(montage),
    })
}

pub fn car_in_place(data: &mut Array2<f64>, included: &[usize]) -> SignalResult<()> {
    if included.is_empty() {
        return Err(SignalError::Parameter("common average needs at least one channel".into()));
    }
    if let Some(&bad) = included.iter().find(|&&c| c >= data.nrows()) {
        return Err(SignalError::Parameter(format!("channel index {bad} out of range")));
    }
    let mut mean = Array1::<f64>::zeros(data.ncols());
    for &c in included {
        mean += &data.row(c);
    }
    mean /= included.len() as f64;
    for mut row in data.rows_mut() {
        row -= &mean;
    }
    Ok(())
}

/// A stage of the preprocessing chain, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessStep {
    Bandpass,
    Crop,
    RejectChannels,
    Asr,
    CommonAverage,
    Epoch,
    Normalize,
}

/// Ordered list of preprocessing stages with its ordering constraints checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessPlan {
    pub steps: Vec<PreprocessStep>,
}

impl Default for PreprocessPlan {
    fn default() -> Self {
        use PreprocessStep::*;
        Self { steps: vec![Bandpass, Crop, RejectChannels, Asr, CommonAverage, Epoch, Normalize] }
    }
}

impl PreprocessPlan {
    pub fn new(steps: Vec<PreprocessStep>) -> SignalResult<Self> {
        let plan = Self { steps };
        plan.validate()?;
        Ok(plan)
    }

    /// ASR needs full-rank input, so re-referencing must come after it.
    pub fn validate(&self) -> SignalResult<()> {
        let pos = |s| self.steps.iter().position(|&x| x == s);
        if let (Some(asr), Some(car)) = (pos(PreprocessStep::Asr), pos(PreprocessStep::CommonAverage)) {
            if car < asr {
                return Err(SignalError::Parameter(
                    "common average reference must run after ASR (rank preservation)".into(),
                ));
            }
        }
        if let (Some(bp), Some(asr)) = (pos(PreprocessStep::Bandpass), pos(PreprocessStep::Asr)) {
            if asr < bp {
                return Err(SignalError::Parameter("ASR expects band-pass filtered input".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::types::Montage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn montage(n: usize) -> Montage {
        Montage::new((0..n).map(|i| format!("E{i}")).collect(), 250.0).unwrap()
    }

    fn noise_recording(n_ch: usize, seconds: f64, amp: f64, seed: u64) -> Recording {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (seconds * 250.0) as usize;
        let samples = Array2::from_shape_fn((n_ch, frames), |_| rng.gen_range(-amp..amp));
        Recording::new(montage(n_ch), samples, vec![], "t").unwrap()
    }

    #[test]
    fn crop_removes_head_and_rebases_markers() {
        let mut rec = noise_recording(2, 60.0, 10.0, 1);
        rec.markers = vec![Marker::new(5.0, "early"), Marker::new(12.0, "late")];
        let cropped = crop_head(&rec, 10.0).unwrap();
        assert!((cropped.duration_s() - 50.0).abs() < 1e-12);
        assert_eq!(cropped.markers, vec![Marker::new(2.0, "late")]);
        assert_eq!(crop_head(&rec, 0.0).unwrap(), rec);
        assert!(matches!(crop_head(&rec, 60.0), Err(SignalError::Length(_))));
    }

    #[test]
    fn flatline_channel_is_rejected() {
        let mut rec = noise_recording(4, 20.0, 30.0, 2);
        rec.samples.row_mut(1).slice_mut(ndarray::s![250..250 + 6 * 250]).fill(3.0);
        let (clean, rejected) = reject_channels(&rec, &RejectionCriteria::default()).unwrap();
        assert_eq!(rejected, vec![RejectedChannel { label: "E1".into(), reason: RejectionReason::Flatline }]);
        assert_eq!(clean.montage.channel_names, vec!["E0", "E2", "E3"]);
    }

    #[test]
    fn clean_recording_keeps_everything() {
        let rec = noise_recording(8, 20.0, 30.0, 3);
        let (clean, rejected) = reject_channels(&rec, &RejectionCriteria::default()).unwrap();
        assert!(rejected.is_empty());
        assert_eq!(clean, rec);
    }

    #[test]
    fn spiking_channel_is_rejected() {
        let mut rec = noise_recording(6, 20.0, 100.0, 4);
        for t in (100..5000).step_by(700) {
            rec.samples[[4, t]] = 5000.0;
        }
        let (_, rejected) = reject_channels(&rec, &RejectionCriteria::default()).unwrap();
        assert_eq!(rejected, vec![RejectedChannel { label: "E4".into(), reason: RejectionReason::Spike }]);
    }

    #[test]
    fn noisy_channel_is_rejected() {
        let mut rec = noise_recording(8, 20.0, 20.0, 5);
        rec.samples.row_mut(2).mapv_inplace(|v| v * 10.0);
        let (_, rejected) = reject_channels(&rec, &RejectionCriteria::default()).unwrap();
        assert_eq!(rejected, vec![RejectedChannel { label: "E2".into(), reason: RejectionReason::Noise }]);
    }

    #[test]
    fn all_channels_flat_is_data_quality_error() {
        let rec = Recording::new(montage(3), Array2::zeros((3, 2000)), vec![], "t").unwrap();
        assert!(matches!(
            reject_channels(&rec, &RejectionCriteria::default()),
            Err(SignalError::DataQuality(_))
        ));
    }

    fn chunk(data: Array2<f64>) -> SampleChunk {
        let n = data.nrows();
        SampleChunk::new(data, 0.0, Arc::new(montage(n))).unwrap()
    }

    #[test]
    fn car_examples() {
        let single = chunk(Array2::from_shape_vec((1, 3), vec![1.0, -2.0, 5.0]).unwrap());
        assert!(common_average_reference(&single, &[0]).unwrap().samples.iter().all(|&v| v == 0.0));

        let zero_mean = chunk(Array2::from_shape_vec((2, 1), vec![1.0, -1.0]).unwrap());
        assert_eq!(common_average_reference(&zero_mean, &[0, 1]).unwrap().samples, zero_mean.samples);

        let three = chunk(Array2::from_shape_vec((3, 1), vec![3.0, 1.0, 2.0]).unwrap());
        let out = common_average_reference(&three, &[0, 1, 2]).unwrap();
        assert_eq!(out.samples.column(0).to_vec(), vec![1.0, -1.0, 0.0]);
        assert_eq!(out.montage.reference_scheme, ReferenceScheme::CommonAverage);

        assert!(matches!(common_average_reference(&three, &[]), Err(SignalError::Parameter(_))));
    }

    #[test]
    fn plan_rejects_car_before_asr() {
        use PreprocessStep::*;
        assert!(PreprocessPlan::default().validate().is_ok());
        assert!(PreprocessPlan::new(vec![Bandpass, CommonAverage, Asr]).is_err());
        assert!(PreprocessPlan::new(vec![Asr, Bandpass]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn car_is_idempotent(values in proptest::collection::vec(-100.0f64..100.0, 12)) {
            let data = Array2::from_shape_vec((4, 3), values).unwrap();
            let once = common_average_reference(&chunk(data), &[0, 1, 2, 3]).unwrap();
            let twice = common_average_reference(&once, &[0, 1, 2, 3]).unwrap();
            for (a, b) in once.samples.iter().zip(twice.samples.iter()) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
