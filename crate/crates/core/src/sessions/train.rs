use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Axis;
use serde::{Deserialize, Serialize};

use super::{SessionError, SessionResult};
use crate::classify::{
    evaluate, predict_labels, save_model, train, trial_majority_accuracy, BundlePreprocessing, ClassifierModel, Evaluation,
    KnnModel, LinearModel, ModelBundle, S4dConfig, S4dModel, TrainConfig, TrainingReport,
};
use crate::features::{stratified_split_indices, FeatureConfig, FeaturePipeline};
use crate::signal::asr::asr_clean;
use crate::signal::preprocess::{car_in_place, drop_channels_by_label};
use crate::signal::{
    asr_calibrate, crop_head, design_bandpass, epoch_and_baseline, fit_norm_stats, load_recording, normalize_epochs,
    reject_channels, BandpassSpec, ClassMapping, EpochOrigin, EpochParams, EpochSet, RejectedChannel, RejectionCriteria,
    Recording,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfflineConfig {
    /// Band edges and order; the sample rate is taken from the recording.
    pub bandpass: BandpassSpec,
    pub crop_s: f64,
    pub rejection: RejectionCriteria,
    pub asr_cutoff_k: f64,
    pub asr_window_s: f64,
    /// Streaming ASR block, seconds.
    pub asr_block_s: f64,
    pub common_average: bool,
    pub epoch: EpochParams,
    pub features: FeatureConfig,
    /// Share of epochs used for fitting (train + validation); the rest is test.
    pub split_ratio: f64,
    /// Share of the fitting epochs held out for early stopping.
    pub val_fraction: f64,
    /// `d_input` and `n_classes` are filled in from the data.
    pub model: S4dConfig,
    pub train: TrainConfig,
    pub knn_k: usize,
    pub seed: u64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            bandpass: BandpassSpec::default(),
            crop_s: 10.0,
            rejection: RejectionCriteria::default(),
            asr_cutoff_k: 20.0,
            asr_window_s: 0.5,
            asr_block_s: 0.1,
            common_average: true,
            epoch: EpochParams::default(),
            features: FeatureConfig::default(),
            split_ratio: 0.8,
            val_fraction: 0.125,
            model: S4dConfig::default(),
            train: TrainConfig::default(),
            knn_k: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    pub knn_accuracy: f64,
    pub linear_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub class_names: Vec<String>,
    pub channels: Vec<String>,
    pub rejected: Vec<RejectedChannel>,
    pub epochs_per_class: Vec<usize>,
    pub skipped_epochs: usize,
    pub n_train_windows: usize,
    pub n_val_windows: usize,
    pub n_test_windows: usize,
    pub training: TrainingReport,
    /// Window-level test evaluation of the S4D model.
    pub test: Evaluation,
    /// Test accuracy of a per-trial majority vote over windows.
    pub trial_accuracy: f64,
    pub baselines: BaselineScores,
    pub seed: u64,
}

impl TrainReport {
    /// Confusion matrix with row-normalized percentages and overall accuracy.
    pub fn confusion_table(&self) -> String {
        let names = &self.class_names;
        let width = names.iter().map(String::len).max().unwrap_or(4).max(6) + 2;
        let mut s = format!("{:>width$}", "true\\pred");
        for n in names {
            let _ = write!(s, "{n:>width$}");
        }
        s.push('\n');
        for (i, row) in self.test.confusion.iter().enumerate() {
            let total: usize = row.iter().sum();
            let _ = write!(s, "{:>width$}", names[i]);
            for &c in row {
                let pct = if total > 0 { 100.0 * c as f64 / total as f64 } else { 0.0 };
                let _ = write!(s, "{:>width$}", format!("{pct:.1}%"));
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "window accuracy {:.3} (n = {}), trial accuracy {:.3}",
            self.test.accuracy, self.test.n, self.trial_accuracy
        );
        let _ = write!(
            s,
            "baselines: kNN {:.3}, linear {:.3}",
            self.baselines.knn_accuracy, self.baselines.linear_accuracy
        );
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub report: TrainReport,
}

/// Band-pass from the first frame, then drop the filter transient.
fn filter_and_crop(rec: &Recording, spec: &BandpassSpec, crop_s: f64) -> SessionResult<Recording> {
    let mut filter = design_bandpass(spec, rec.montage.n_channels())?;
    let mut filtered = rec.clone();
    filter.process_in_place(&mut filtered.samples)?;
    Ok(crop_head(&filtered, crop_s)?)
}

fn concat_epochs(sets: Vec<EpochSet>) -> EpochSet {
    let mut origins = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0;
    for set in &sets {
        origins.extend(set.origins.iter().map(|o| EpochOrigin { epoch: o.epoch + offset, offset: o.offset }));
        labels.extend_from_slice(&set.labels);
        offset += set.n_epochs();
    }
    let views: Vec<_> = sets.iter().map(|s| s.epochs.view()).collect();
    let epochs = ndarray::concatenate(Axis(0), &views).expect("epoch sets share a shape");
    EpochSet { epochs, labels, origins, ..sets[0].clone() }
}

/// Full offline chain: band-pass, crop, channel rejection, ASR, common
/// average, epoching with baseline, normalization fitted on the training
/// epochs, features, S4D training and held-out evaluation.
pub fn offline_train(
    recordings: &[Recording],
    calibration: Option<&Recording>,
    mapping: &ClassMapping,
    cfg: &OfflineConfig,
) -> SessionResult<TrainOutcome> {
    let calibration = calibration.ok_or_else(|| {
        SessionError::MissingCalibration("no calibration recording was given; record one minute of rest first".into())
    })?;
    let first = recordings.first().ok_or_else(|| SessionError::Config("no training recordings".into()))?;
    let montage = first.montage.clone();
    for rec in recordings.iter().chain(std::iter::once(calibration)) {
        if rec.montage != montage {
            return Err(SessionError::Config(format!(
                "session {} has a different montage from {}",
                rec.session_id, first.session_id
            )));
        }
    }
    if !(cfg.split_ratio > 0.0 && cfg.split_ratio < 1.0) || !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) {
        return Err(SessionError::Config("split ratio and validation fraction must lie in (0, 1)".into()));
    }
    let fs = montage.sample_rate_hz;
    let spec = BandpassSpec { sample_rate_hz: fs, ..cfg.bandpass.clone() };

    let mut cropped = Vec::with_capacity(recordings.len());
    for rec in recordings {
        cropped.push(filter_and_crop(rec, &spec, cfg.crop_s)?);
    }
    let mut rejected: Vec<RejectedChannel> = Vec::new();
    for rec in &cropped {
        for r in reject_channels(rec, &cfg.rejection)?.1 {
            if !rejected.iter().any(|x| x.label == r.label) {
                rejected.push(r);
            }
        }
    }
    rejected.sort_by_key(|r| montage.index_of(&r.label));
    let dropped: Vec<String> = rejected.iter().map(|r| r.label.clone()).collect();

    let calib_crop = cfg.crop_s.min(calibration.duration_s() - crate::signal::asr::MIN_CALIBRATION_S).max(0.0);
    let calib = drop_channels_by_label(&filter_and_crop(calibration, &spec, calib_crop)?, &dropped)?;
    let asr = asr_calibrate(&calib, cfg.asr_cutoff_k, cfg.asr_window_s)?;
    let asr_block = ((cfg.asr_block_s * fs).round() as usize).clamp(1, asr.window_frames);

    let mut sets = Vec::new();
    let mut skipped = 0;
    for rec in &cropped {
        let mut clean = drop_channels_by_label(rec, &dropped)?;
        clean.samples = asr_clean(&asr, &clean.samples, asr_block)?;
        if cfg.common_average {
            let all: Vec<usize> = (0..clean.montage.n_channels()).collect();
            car_in_place(&mut clean.samples, &all)?;
        }
        let (set, s) = epoch_and_baseline(&clean, mapping, &cfg.epoch)?;
        skipped += s;
        sets.push(set);
    }
    let epochs = concat_epochs(sets);
    let n_classes = epochs.n_classes();
    let epochs_per_class: Vec<usize> =
        (0..n_classes).map(|c| epochs.labels.iter().filter(|&&l| l == c).count()).collect();
    if epochs_per_class.iter().any(|&n| n == 0) {
        return Err(SessionError::Config(format!(
            "every class needs epochs; counts per class are {epochs_per_class:?}"
        )));
    }

    let groups: Vec<usize> = (0..epochs.n_epochs()).collect();
    let (fit_rows, test_rows) = stratified_split_indices(&epochs.labels, &groups, cfg.split_ratio, cfg.seed)?;
    let fit_labels: Vec<usize> = fit_rows.iter().map(|&r| epochs.labels[r]).collect();
    let (train_local, val_local) =
        stratified_split_indices(&fit_labels, &fit_rows, 1.0 - cfg.val_fraction, cfg.seed.wrapping_add(1))?;
    let train_rows: Vec<usize> = train_local.iter().map(|&i| fit_rows[i]).collect();
    let val_rows: Vec<usize> = val_local.iter().map(|&i| fit_rows[i]).collect();

    let norm = fit_norm_stats(&epochs.select(&train_rows));
    let (normalized, norm) = normalize_epochs(&epochs, Some(&norm))?;
    let (pipeline, train_set) = FeaturePipeline::fit(&cfg.features, &normalized.select(&train_rows))?;
    let val_set = pipeline.transform_epochs(&normalized.select(&val_rows))?;
    let test_set = pipeline.transform_epochs(&normalized.select(&test_rows))?;
    info!(
        "{} train / {} val / {} test windows, {} features × {} steps",
        train_set.n_windows(),
        val_set.n_windows(),
        test_set.n_windows(),
        train_set.n_features(),
        train_set.n_steps()
    );

    let model_cfg = S4dConfig { d_input: train_set.n_features(), n_classes, ..cfg.model.clone() };
    let init = S4dModel::init(&model_cfg, cfg.seed)?;
    let train_cfg = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let (model, training) = train(&init, &train_set, &val_set, &train_cfg)?;

    let test = evaluate(&model, &test_set)?;
    let predicted = predict_labels(&model, &test_set)?;
    let trial_accuracy = trial_majority_accuracy(&test_set, &predicted, n_classes);
    let knn = KnnModel::fit_tensor(&train_set, cfg.knn_k.min(train_set.n_windows()))?;
    let linear = LinearModel::fit_tensor(&train_set, 1e-3, 300)?;
    let baselines = BaselineScores {
        knn_accuracy: evaluate(&knn, &test_set)?.accuracy,
        linear_accuracy: evaluate(&linear, &test_set)?.accuracy,
    };

    let report = TrainReport {
        class_names: epochs.class_names.clone(),
        channels: epochs.channel_names.clone(),
        rejected: rejected.clone(),
        epochs_per_class,
        skipped_epochs: skipped,
        n_train_windows: train_set.n_windows(),
        n_val_windows: val_set.n_windows(),
        n_test_windows: test_set.n_windows(),
        training: training.clone(),
        test,
        trial_accuracy,
        baselines,
        seed: cfg.seed,
    };
    let bundle = ModelBundle {
        classifier: ClassifierModel::S4d(model),
        class_names: epochs.class_names.clone(),
        features: cfg.features.clone(),
        csp: pipeline.csp.clone(),
        scaler: pipeline.scaler.clone(),
        preprocessing: BundlePreprocessing {
            montage,
            bandpass: spec,
            crop_s: cfg.crop_s,
            rejected,
            asr: Some(asr),
            asr_block_frames: asr_block,
            common_average: cfg.common_average,
            epoch: cfg.epoch,
            norm,
        },
        training: Some(training),
    };
    Ok(TrainOutcome { bundle, report })
}

/// Paths for a training run driven from the command line.
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub recordings: Vec<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub mapping: PathBuf,
    pub bundle_out: PathBuf,
    pub report_out: Option<PathBuf>,
}

fn stage_err<'a>(stage: &'static str, file: &'a Path) -> impl Fn(String) -> SessionError + 'a {
    move |detail| SessionError::Stage { stage, file: file.display().to_string(), detail }
}

/// Load the inputs, train, write the bundle and the JSON report.
pub fn cli_train(paths: &TrainPaths, cfg: &OfflineConfig) -> SessionResult<TrainOutcome> {
    let calibration = match &paths.calibration {
        None => return Err(SessionError::MissingCalibration("pass a calibration recording".into())),
        Some(p) if !p.exists() => {
            return Err(SessionError::MissingCalibration(format!("{} does not exist", p.display())))
        }
        Some(p) => load_recording(p).map_err(|e| stage_err("load calibration", p)(e.to_string()))?,
    };
    let mapping = ClassMapping::load(&paths.mapping).map_err(|e| stage_err("load mapping", &paths.mapping)(e.to_string()))?;
    let mut recordings = Vec::new();
    for p in &paths.recordings {
        recordings.push(load_recording(p).map_err(|e| stage_err("load recording", p)(e.to_string()))?);
    }
    let files = paths.recordings.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ");
    let outcome = offline_train(&recordings, Some(&calibration), &mapping, cfg).map_err(|e| match e {
        SessionError::MissingCalibration(_) | SessionError::Stage { .. } => e,
        other => SessionError::Stage { stage: "offline training", file: files.clone(), detail: other.to_string() },
    })?;
    save_model(&outcome.bundle, &paths.bundle_out)
        .map_err(|e| stage_err("write bundle", &paths.bundle_out)(e.to_string()))?;
    if let Some(p) = &paths.report_out {
        std::fs::write(p, serde_json::to_vec_pretty(&outcome.report)?)
            .map_err(|e| stage_err("write report", p)(e.to_string()))?;
    }
    Ok(outcome)
}
