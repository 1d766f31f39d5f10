use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::baseline::{KnnModel, LinearModel};
use super::eval::Classifier;
use super::s4d::{S4dConfig, S4dModel};
use super::train::TrainingReport;
use super::{ClassifyError, ClassifyResult};
use crate::features::{CspModel, FeatureConfig, FeaturePipeline, FeatureScaler, MorletBank};
use crate::signal::{AsrModel, BandpassSpec, EpochParams, Montage, NormStats, RejectedChannel};

pub const BUNDLE_MAGIC: &[u8; 8] = b"MIBCIBDL";
pub const BUNDLE_VERSION: u32 = 1;

/// Everything the online path needs to reproduce offline preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundlePreprocessing {
    /// Montage of the raw stream, before channel rejection.
    pub montage: Montage,
    pub bandpass: BandpassSpec,
    pub crop_s: f64,
    pub rejected: Vec<RejectedChannel>,
    pub asr: Option<AsrModel>,
    pub asr_block_frames: usize,
    pub common_average: bool,
    pub epoch: EpochParams,
    pub norm: NormStats,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierModel {
    S4d(S4dModel),
    Knn(KnnModel),
    Linear(LinearModel),
}

impl ClassifierModel {
    pub fn as_classifier(&self) -> &dyn Classifier {
        match self {
            Self::S4d(m) => m,
            Self::Knn(m) => m,
            Self::Linear(m) => m,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::S4d(_) => "s4d",
            Self::Knn(_) => "knn",
            Self::Linear(_) => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub classifier: ClassifierModel,
    pub class_names: Vec<String>,
    pub features: FeatureConfig,
    pub csp: Option<CspModel>,
    pub scaler: FeatureScaler,
    pub preprocessing: BundlePreprocessing,
    pub training: Option<TrainingReport>,
}

impl ModelBundle {
    pub fn feature_pipeline(&self) -> ClassifyResult<FeaturePipeline> {
        let bank = MorletBank::new(
            &self.features.freqs_hz,
            self.features.n_cycles,
            self.features.time_decim,
            self.preprocessing.montage.sample_rate_hz,
        )?;
        Ok(FeaturePipeline { config: self.features.clone(), bank, csp: self.csp.clone(), scaler: self.scaler.clone() })
    }

    /// Channel labels kept after rejection, in montage order.
    pub fn kept_channels(&self) -> Vec<String> {
        self.preprocessing
            .montage
            .channel_names
            .iter()
            .filter(|c| !self.preprocessing.rejected.iter().any(|r| &r.label == *c))
            .cloned()
            .collect()
    }

    fn validate(&self) -> ClassifyResult<()> {
        if self.features.csp_components > 0 && self.csp.is_none() {
            return Err(ClassifyError::Bundle("feature config requires a CSP block but the bundle has none".into()));
        }
        if let ClassifierModel::S4d(m) = &self.classifier {
            if m.config.d_input != self.scaler.mean.len() {
                return Err(ClassifyError::Bundle(format!(
                    "model expects {} features, scaler provides {}",
                    m.config.d_input,
                    self.scaler.mean.len()
                )));
            }
        }
        if self.class_names.len() != self.classifier.as_classifier().n_classes() {
            return Err(ClassifyError::Bundle("class names do not match the classifier".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ClassifierMeta {
    S4d { config: S4dConfig },
    Knn { k: usize, n_classes: usize, labels: Vec<usize> },
    Linear { l2: f64 },
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    classifier: ClassifierMeta,
    class_names: Vec<String>,
    features: FeatureConfig,
    csp: Option<CspModel>,
    scaler: FeatureScaler,
    preprocessing: BundlePreprocessing,
    training: Option<TrainingReport>,
    tensors: Vec<TensorEntry>,
}

fn classifier_tensors(model: &ClassifierModel) -> Vec<(String, Vec<f64>, Vec<usize>)> {
    match model {
        ClassifierModel::S4d(m) => m.tensors().into_iter().map(|(n, d, s)| (n, d.to_vec(), s)).collect(),
        ClassifierModel::Knn(m) => {
            vec![("knn.points".into(), m.points.iter().copied().collect(), m.points.shape().to_vec())]
        }
        ClassifierModel::Linear(m) => vec![
            ("linear.weights".into(), m.weights.iter().copied().collect(), m.weights.shape().to_vec()),
            ("linear.bias".into(), m.bias.to_vec(), m.bias.shape().to_vec()),
        ],
    }
}

pub fn write_bundle(bundle: &ModelBundle, mut w: impl Write) -> ClassifyResult<()> {
    bundle.validate()?;
    let tensors = classifier_tensors(&bundle.classifier);
    let mut offset = 0;
    let manifest = tensors
        .iter()
        .map(|(name, data, shape)| {
            let e = TensorEntry { name: name.clone(), shape: shape.clone(), offset, len: data.len() };
            offset += data.len();
            e
        })
        .collect();
    let classifier = match &bundle.classifier {
        ClassifierModel::S4d(m) => ClassifierMeta::S4d { config: m.config.clone() },
        ClassifierModel::Knn(m) => ClassifierMeta::Knn { k: m.k, n_classes: m.n_classes, labels: m.labels.clone() },
        ClassifierModel::Linear(m) => ClassifierMeta::Linear { l2: m.l2 },
    };
    let meta = Metadata {
        classifier,
        class_names: bundle.class_names.clone(),
        features: bundle.features.clone(),
        csp: bundle.csp.clone(),
        scaler: bundle.scaler.clone(),
        preprocessing: bundle.preprocessing.clone(),
        training: bundle.training.clone(),
        tensors: manifest,
    };
    let json = serde_json::to_vec(&meta)?;
    w.write_all(BUNDLE_MAGIC)?;
    w.write_all(&BUNDLE_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, data, _) in &tensors {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> ClassifyResult<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ClassifyError::Bundle(format!("truncated while reading {what}")),
        _ => ClassifyError::Io(e),
    })
}

pub fn read_bundle(mut r: impl Read) -> ClassifyResult<ModelBundle> {
    let mut magic = [0u8; 8];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != BUNDLE_MAGIC {
        return Err(ClassifyError::Bundle("not a model bundle (bad magic)".into()));
    }
    let mut v = [0u8; 4];
    read_exact_or(&mut r, &mut v, "version")?;
    let version = u32::from_le_bytes(v);
    if version != BUNDLE_VERSION {
        return Err(ClassifyError::Version { found: version, expected: BUNDLE_VERSION });
    }
    let mut len = [0u8; 8];
    read_exact_or(&mut r, &mut len, "metadata length")?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(ClassifyError::Bundle(format!("implausible metadata length {len}")));
    }
    let mut json = vec![0u8; len];
    read_exact_or(&mut r, &mut json, "metadata")?;
    let meta: Metadata = serde_json::from_slice(&json).map_err(|e| ClassifyError::Bundle(format!("metadata: {e}")))?;
    let total: usize = meta.tensors.iter().map(|t| t.len).sum();
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    if blob.len() != total * 8 {
        return Err(ClassifyError::Bundle(format!(
            "tensor block holds {} bytes, manifest needs {}",
            blob.len(),
            total * 8
        )));
    }
    let values: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let tensor = |name: &str| -> ClassifyResult<(&[f64], &[usize])> {
        let e = meta
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ClassifyError::Bundle(format!("missing tensor {name}")))?;
        if e.shape.iter().product::<usize>() != e.len || e.offset + e.len > values.len() {
            return Err(ClassifyError::Bundle(format!("inconsistent manifest entry {name}")));
        }
        Ok((&values[e.offset..e.offset + e.len], &e.shape))
    };
    let classifier = match &meta.classifier {
        ClassifierMeta::S4d { config } => {
            let mut model = S4dModel::init(config, 0)?.zeros_like();
            let names: Vec<(String, Vec<usize>)> = model.tensors().into_iter().map(|(n, _, s)| (n, s)).collect();
            for ((name, shape), dst) in names.iter().zip(model.tensors_mut()) {
                let (data, stored) = tensor(name)?;
                if stored != shape.as_slice() {
                    return Err(ClassifyError::Bundle(format!("tensor {name} has shape {stored:?}, expected {shape:?}")));
                }
                dst.copy_from_slice(data);
            }
            ClassifierModel::S4d(model)
        }
        ClassifierMeta::Knn { k, n_classes, labels } => {
            let (data, shape) = tensor("knn.points")?;
            let points = Array2::from_shape_vec((shape[0], shape[1]), data.to_vec())
                .map_err(|e| ClassifyError::Bundle(e.to_string()))?;
            ClassifierModel::Knn(KnnModel::fit(points, labels.clone(), *k, *n_classes)?)
        }
        ClassifierMeta::Linear { l2 } => {
            let (w, ws) = tensor("linear.weights")?;
            let (b, _) = tensor("linear.bias")?;
            let weights =
                Array2::from_shape_vec((ws[0], ws[1]), w.to_vec()).map_err(|e| ClassifyError::Bundle(e.to_string()))?;
            ClassifierModel::Linear(LinearModel { weights, bias: Array1::from(b.to_vec()), l2: *l2 })
        }
    };
    let bundle = ModelBundle {
        classifier,
        class_names: meta.class_names,
        features: meta.features,
        csp: meta.csp,
        scaler: meta.scaler,
        preprocessing: meta.preprocessing,
        training: meta.training,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_model(bundle: &ModelBundle, path: impl AsRef<Path>) -> ClassifyResult<()> {
    let mut buf = Vec::new();
    write_bundle(bundle, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> ClassifyResult<ModelBundle> {
    let bytes = std::fs::read(path)?;
    read_bundle(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{EpochParams, Montage};
    use ndarray::Array2;

    fn bundle(csp: bool) -> ModelBundle {
        let config = S4dConfig { d_input: 6, d_model: 4, d_state: 2, n_layers: 2, ..S4dConfig::default() };
        let model = S4dModel::init(&config, 9).unwrap();
        let montage = Montage::new(vec!["C3".into(), "Cz".into(), "C4".into()], 250.0).unwrap();
        ModelBundle {
            classifier: ClassifierModel::S4d(model),
            class_names: vec!["left".into(), "rest".into(), "right".into()],
            features: FeatureConfig { csp_components: if csp { 2 } else { 0 }, ..FeatureConfig::default() },
            csp: None,
            scaler: FeatureScaler { log_channels: 4, mean: vec![0.1; 6], std: vec![2.0; 6] },
            preprocessing: BundlePreprocessing {
                montage,
                bandpass: BandpassSpec::default(),
                crop_s: 10.0,
                rejected: vec![],
                asr: None,
                asr_block_frames: 25,
                common_average: true,
                epoch: EpochParams::default(),
                norm: NormStats { mean: vec![0.0; 3], std: vec![1.0; 3], flagged: vec![] },
            },
            training: None,
        }
    }

    #[test]
    fn round_trip_gives_identical_logits() {
        let b = bundle(false);
        let mut bytes = Vec::new();
        write_bundle(&b, &mut bytes).unwrap();
        let loaded = read_bundle(bytes.as_slice()).unwrap();
        assert_eq!(loaded, b);
        let (ClassifierModel::S4d(m1), ClassifierModel::S4d(m2)) = (&b.classifier, &loaded.classifier) else {
            panic!("wrong kind")
        };
        for i in 0..100 {
            let x = Array2::from_shape_fn((6, 12), |(r, c)| ((i * 31 + r * 7 + c) as f64 * 0.37).sin());
            assert_eq!(m1.forward_conv(x.view()).unwrap(), m2.forward_conv(x.view()).unwrap());
        }
        let mut again = Vec::new();
        write_bundle(&loaded, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_bundle_is_a_clean_error() {
        let mut bytes = Vec::new();
        write_bundle(&bundle(false), &mut bytes).unwrap();
        for cut in [4, 15, 40, bytes.len() - 3] {
            assert!(matches!(read_bundle(&bytes[..cut]), Err(ClassifyError::Bundle(_))), "cut {cut}");
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = Vec::new();
        write_bundle(&bundle(false), &mut bytes).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(read_bundle(bytes.as_slice()), Err(ClassifyError::Version { found: 7, expected: 1 })));
    }

    #[test]
    fn missing_csp_block_is_rejected() {
        assert!(matches!(write_bundle(&bundle(true), Vec::new()), Err(ClassifyError::Bundle(_))));
        // hand-patch a valid bundle to claim CSP features
        let mut bytes = Vec::new();
        write_bundle(&bundle(false), &mut bytes).unwrap();
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[20..20 + len].to_vec()).unwrap();
        let patched = json.replace("\"csp_components\":0", "\"csp_components\":4");
        assert_eq!(patched.len(), json.len());
        bytes.splice(20..20 + len, patched.into_bytes());
        assert!(matches!(read_bundle(bytes.as_slice()), Err(ClassifyError::Bundle(_))));
    }
}
