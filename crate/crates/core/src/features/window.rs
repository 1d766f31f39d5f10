use ndarray::{s, Array3, Axis};

use super::{FeatureError, FeatureResult};
use crate::signal::{EpochOrigin, EpochSet};

/// Start frames of the sliding windows over an epoch of `epoch_frames`.
pub fn window_offsets(epoch_frames: usize, window_frames: usize, stride_frames: f64) -> FeatureResult<Vec<usize>> {
    if window_frames == 0 || !(stride_frames > 0.0) {
        return Err(FeatureError::Parameter("window and stride must be positive".into()));
    }
    if window_frames > epoch_frames {
        return Err(FeatureError::Parameter(format!(
            "window of {window_frames} frames is longer than the {epoch_frames}-frame epoch"
        )));
    }
    let room = (epoch_frames - window_frames) as f64;
    let count = (room / stride_frames + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|k| ((k as f64 * stride_frames).round() as usize).min(epoch_frames - window_frames))
        .collect())
}

/// Cut every epoch into sliding windows that inherit its label.
pub fn window_epochs(set: &EpochSet, window_s: f64, stride_s: f64) -> FeatureResult<EpochSet> {
    let fs = set.sample_rate_hz;
    let w = (window_s * fs).round() as usize;
    let offsets = window_offsets(set.n_frames(), w, stride_s * fs)?;
    let per = offsets.len();
    let n = set.n_epochs() * per;
    let mut epochs = Array3::zeros((n, set.n_channels(), w));
    let mut labels = Vec::with_capacity(n);
    let mut origins = Vec::with_capacity(n);
    for (e, epoch) in set.epochs.axis_iter(Axis(0)).enumerate() {
        for (k, &off) in offsets.iter().enumerate() {
            epochs
                .index_axis_mut(Axis(0), e * per + k)
                .assign(&epoch.slice(s![.., off..off + w]));
            labels.push(set.labels[e]);
            let parent = set.origins[e];
            origins.push(EpochOrigin { epoch: parent.epoch, offset: parent.offset + off });
        }
    }
    Ok(EpochSet {
        epochs,
        labels,
        class_names: set.class_names.clone(),
        channel_names: set.channel_names.clone(),
        sample_rate_hz: fs,
        tmin: set.tmin,
        tmax: set.tmin + w as f64 / fs,
        baseline: set.baseline,
        norm: set.norm.clone(),
        origins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn epochs(n: usize, frames: usize) -> EpochSet {
        EpochSet {
            epochs: Array3::from_shape_fn((n, 2, frames), |(e, c, t)| (e * 10_000 + c * 1000 + t) as f64),
            labels: (0..n).map(|i| i % 3).collect(),
            class_names: vec!["left".into(), "rest".into(), "right".into()],
            channel_names: vec!["C3".into(), "C4".into()],
            sample_rate_hz: 250.0,
            tmin: 0.0,
            tmax: frames as f64 / 250.0,
            baseline: None,
            norm: None,
            origins: (0..n).map(|epoch| EpochOrigin { epoch, offset: 0 }).collect(),
        }
    }

    #[test]
    fn default_geometry_gives_four_windows() {
        assert_eq!(window_offsets(750, 250, 250.0 * 2.0 / 3.0).unwrap(), vec![0, 167, 333, 500]);
        assert_eq!(window_epochs(&epochs(190, 750), 1.0, 2.0 / 3.0).unwrap().n_epochs(), 760);
        assert_eq!(window_epochs(&epochs(720, 750), 1.0, 2.0 / 3.0).unwrap().n_epochs(), 2880);
    }

    #[test]
    fn full_length_window_is_identity() {
        let set = epochs(3, 250);
        let w = window_epochs(&set, 1.0, 2.0 / 3.0).unwrap();
        assert_eq!(w.epochs, set.epochs);
        assert_eq!(w.labels, set.labels);
    }

    #[test]
    fn window_longer_than_epoch_is_rejected() {
        assert!(matches!(window_epochs(&epochs(1, 200), 1.0, 0.5), Err(FeatureError::Parameter(_))));
    }

    #[test]
    fn windows_copy_the_right_frames() {
        let set = epochs(2, 750);
        let w = window_epochs(&set, 1.0, 2.0 / 3.0).unwrap();
        let o = w.origins[6];
        assert_eq!(o, EpochOrigin { epoch: 1, offset: 333 });
        assert_eq!(w.epochs[(6, 1, 0)], set.epochs[(1, 1, 333)]);
        assert_eq!(w.labels[6], set.labels[1]);
    }

    proptest! {
        #[test]
        fn provenance_is_a_bijection(n in 1usize..40, frames in 250usize..900) {
            let set = epochs(n, frames);
            let w = window_epochs(&set, 1.0, 2.0 / 3.0).unwrap();
            let per = window_offsets(frames, 250, 250.0 * 2.0 / 3.0).unwrap().len();
            prop_assert_eq!(w.n_epochs(), n * per);
            let unique: HashSet<_> = w.origins.iter().copied().collect();
            prop_assert_eq!(unique.len(), w.n_epochs());
            prop_assert!(w.origins.iter().all(|o| o.offset + 250 <= frames));
        }
    }
}
