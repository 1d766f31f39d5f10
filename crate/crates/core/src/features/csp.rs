use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureResult};
use crate::signal::EpochSet;

/// Floor for filtered-signal variance before taking the log.
pub const LOG_VARIANCE_FLOOR: f64 = 1e-12;

/// One-vs-rest common spatial patterns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CspModel {
    pub n_components: usize,
    /// Per class, `[channels × n_components]` with filters as columns.
    pub filters: Vec<Array2<f64>>,
    /// Per class, the generalized eigenvalues of the kept filters.
    pub eigenvalues: Vec<Vec<f64>>,
    pub class_covs: Vec<Array2<f64>>,
    pub rest_covs: Vec<Array2<f64>>,
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn epoch_covariance(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(1)).expect("non-empty epoch");
    let centred = &x - &mean.insert_axis(Axis(1));
    centred.dot(&centred.t()) / x.ncols() as f64
}

/// Relative eigenvalue cut below which a composite direction counts as empty
/// (e.g. the common mode removed by average referencing).
const RANK_TOLERANCE: f64 = 1e-10;

/// `U_r Λ_r^{-1/2}` over the non-null eigenvectors of a covariance.
fn whitening(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return None;
    }
    let mut keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > RANK_TOLERANCE * max).collect();
    keep.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut p = DMatrix::zeros(cov.nrows(), keep.len());
    for (k, &i) in keep.iter().enumerate() {
        p.set_column(k, &(eig.eigenvectors.column(i) / eig.eigenvalues[i].sqrt()));
    }
    Some(p)
}

impl CspModel {
    /// Solve `Σ_c w = λ (Σ_c + Σ_rest) w` per class within the range of the
    /// composite and keep the `n_components / 2` largest and smallest λ.
    pub fn from_covariances(
        class_covs: Vec<Array2<f64>>,
        rest_covs: Vec<Array2<f64>>,
        n_components: usize,
    ) -> FeatureResult<Self> {
        if class_covs.len() != rest_covs.len() || class_covs.len() < 2 {
            return Err(FeatureError::Parameter("CSP needs at least two classes".into()));
        }
        let n_ch = class_covs[0].nrows();
        if n_components == 0 || n_components % 2 != 0 || n_components > n_ch {
            return Err(FeatureError::Parameter(format!(
                "n_components must be even and in 2..={n_ch}, got {n_components}"
            )));
        }
        let mut filters = Vec::new();
        let mut eigenvalues = Vec::new();
        for (c, (sc, sr)) in class_covs.iter().zip(&rest_covs).enumerate() {
            let s_c = to_dmatrix(sc);
            let composite = &s_c + to_dmatrix(sr);
            let whiten = whitening(&composite).ok_or_else(|| {
                FeatureError::Fit(format!(
                    "composite covariance for class {c} has rank below {n_components}; reject more channels"
                ))
            })?;
            let rank = whiten.ncols();
            if rank < n_components {
                return Err(FeatureError::Fit(format!(
                    "composite covariance for class {c} has rank {rank} < {n_components}; reject more channels"
                )));
            }
            let m = whiten.transpose() * &s_c * &whiten;
            // m is symmetric PSD, so its SVD is its eigendecomposition.
            let svd = ((&m + m.transpose()) * 0.5).svd(true, false);
            let vectors = svd.u.expect("left singular vectors requested");
            let values = svd.singular_values;
            let mut order: Vec<usize> = (0..rank).collect();
            order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
            let half = n_components / 2;
            let picked: Vec<usize> = order[..half].iter().chain(&order[rank - half..]).copied().collect();
            let w_all = &whiten * &vectors;
            let mut w = Array2::zeros((n_ch, n_components));
            for (k, &idx) in picked.iter().enumerate() {
                let col = w_all.column(idx);
                let pivot = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
                let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
                for ch in 0..n_ch {
                    w[(ch, k)] = sign * col[ch];
                }
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(FeatureError::Fit(format!("non-finite filters for class {c}")));
            }
            filters.push(w);
            eigenvalues.push(picked.iter().map(|&i| values[i]).collect());
        }
        Ok(Self { n_components, filters, eigenvalues, class_covs, rest_covs })
    }

    pub fn n_channels(&self) -> usize {
        self.filters[0].nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.filters.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_classes() * self.n_components
    }

    /// Log-variance features of one `[channels × frames]` segment and the
    /// number of entries that hit the variance floor.
    pub fn transform_window(&self, x: ArrayView2<f64>) -> FeatureResult<(Vec<f64>, usize)> {
        if x.nrows() != self.n_channels() {
            return Err(FeatureError::Shape(format!(
                "CSP fitted on {} channels, got {}",
                self.n_channels(),
                x.nrows()
            )));
        }
        let cov = epoch_covariance(x);
        let mut out = Vec::with_capacity(self.n_features());
        let mut flagged = 0;
        for w in &self.filters {
            let proj = w.t().dot(&cov).dot(w);
            for k in 0..self.n_components {
                let var = proj[(k, k)];
                if var < LOG_VARIANCE_FLOOR {
                    flagged += 1;
                }
                out.push(var.max(LOG_VARIANCE_FLOOR).ln());
            }
        }
        Ok((out, flagged))
    }
}

/// Fit one-vs-rest CSP on labelled epochs. Class covariances are means of
/// per-epoch covariances.
pub fn csp_fit(set: &EpochSet, n_components: usize) -> FeatureResult<CspModel> {
    let n_classes = set.n_classes();
    let counts: Vec<usize> = (0..n_classes).map(|c| set.labels.iter().filter(|&&l| l == c).count()).collect();
    if counts.iter().filter(|&&n| n > 0).count() < 2 {
        return Err(FeatureError::Parameter("CSP needs at least two classes present".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(FeatureError::Parameter(format!(
            "class {} has {} epochs; CSP needs at least 2",
            set.class_names[c], counts[c]
        )));
    }
    let n_ch = set.n_channels();
    let covs: Vec<Array2<f64>> = set.epochs.axis_iter(Axis(0)).map(epoch_covariance).collect();
    let mean_of = |pred: &dyn Fn(usize) -> bool| {
        let mut acc = Array2::zeros((n_ch, n_ch));
        let mut n = 0usize;
        for (cov, &l) in covs.iter().zip(&set.labels) {
            if pred(l) {
                acc += cov;
                n += 1;
            }
        }
        acc / n as f64
    };
    let class_covs = (0..n_classes).map(|c| mean_of(&|l| l == c)).collect();
    let rest_covs = (0..n_classes).map(|c| mean_of(&|l| l != c)).collect();
    CspModel::from_covariances(class_covs, rest_covs, n_components)
}

/// Log-variance CSP features for every epoch, `[n_epochs × classes·components]`,
/// and the count of floored entries.
pub fn csp_transform(model: &CspModel, set: &EpochSet) -> FeatureResult<(Array2<f64>, usize)> {
    let mut out = Array2::zeros((set.n_epochs(), model.n_features()));
    let mut flagged = 0;
    for (i, epoch) in set.epochs.axis_iter(Axis(0)).enumerate() {
        let (row, f) = model.transform_window(epoch)?;
        flagged += f;
        out.row_mut(i).assign(&ndarray::Array1::from(row));
    }
    if flagged > 0 {
        log::warn!("{flagged} CSP feature(s) hit the log-variance floor");
    }
    Ok((out, flagged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::EpochOrigin;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn two_class_set(seed: u64, n_per: usize) -> EpochSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, t) = (4, 250);
        let n = 2 * n_per;
        let mut epochs = Array3::zeros((n, c, t));
        let mut labels = Vec::new();
        for e in 0..n {
            let label = e % 2;
            for ch in 0..c {
                let scale = if label == 0 && ch == 1 { 10f64.sqrt() } else { 1.0 };
                for k in 0..t {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    epochs[(e, ch, k)] = scale * z;
                }
            }
            labels.push(label);
        }
        EpochSet {
            epochs,
            labels,
            class_names: vec!["a".into(), "b".into()],
            channel_names: (0..c).map(|i| format!("c{i}")).collect(),
            sample_rate_hz: 250.0,
            tmin: 0.0,
            tmax: 1.0,
            baseline: None,
            norm: None,
            origins: (0..n).map(|epoch| EpochOrigin { epoch, offset: 0 }).collect(),
        }
    }

    #[test]
    fn top_filter_finds_planted_channel() {
        let model = csp_fit(&two_class_set(1, 30), 2).unwrap();
        let w = model.filters[0].column(0).to_owned();
        let norm = w.dot(&w).sqrt();
        assert!(w[1].abs() / norm > 0.9, "{w}");
    }

    #[test]
    fn filters_whiten_the_composite_covariance() {
        let model = csp_fit(&two_class_set(8, 25), 4).unwrap();
        for c in 0..2 {
            let w = &model.filters[c];
            let composite = &model.class_covs[c] + &model.rest_covs[c];
            let white = w.t().dot(&composite).dot(w);
            let diag = w.t().dot(&model.class_covs[c]).dot(w);
            for i in 0..4 {
                for j in 0..4 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((white[(i, j)] - expect).abs() < 1e-9);
                    if i != j {
                        assert!(diag[(i, j)].abs() < 1e-9);
                    }
                }
                assert!((diag[(i, i)] - model.eigenvalues[c][i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permuted_epochs_give_same_filters() {
        let set = two_class_set(2, 20);
        let a = csp_fit(&set, 4).unwrap();
        let rows: Vec<usize> = (0..set.n_epochs()).rev().collect();
        let b = csp_fit(&set.select(&rows), 4).unwrap();
        for (fa, fb) in a.filters.iter().zip(&b.filters) {
            for (x, y) in fa.iter().zip(fb.iter()) {
                assert!((x.abs() - y.abs()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn scaling_shifts_features_by_two_log_alpha() {
        let set = two_class_set(3, 10);
        let model = csp_fit(&set, 2).unwrap();
        let (f1, _) = csp_transform(&model, &set).unwrap();
        let mut scaled = set.clone();
        scaled.epochs *= 3.0;
        let (f2, _) = csp_transform(&model, &scaled).unwrap();
        for (a, b) in f1.iter().zip(f2.iter()) {
            assert!((b - a - 2.0 * 3f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_variance_is_floored_and_flagged() {
        let set = two_class_set(4, 10);
        let model = csp_fit(&set, 2).unwrap();
        let mut zero = set.select(&[0]);
        zero.epochs.fill(0.0);
        let (f, flagged) = csp_transform(&model, &zero).unwrap();
        assert_eq!(flagged, model.n_features());
        assert!(f.iter().all(|&v| v == LOG_VARIANCE_FLOOR.ln()));
    }

    #[test]
    fn classes_separate_on_top_feature() {
        let set = two_class_set(5, 30);
        let model = csp_fit(&set, 2).unwrap();
        let (f, _) = csp_transform(&model, &set).unwrap();
        let mean = |label: usize| {
            let rows: Vec<f64> = (0..set.n_epochs()).filter(|&i| set.labels[i] == label).map(|i| f[(i, 0)]).collect();
            rows.iter().sum::<f64>() / rows.len() as f64
        };
        // Planted 10x variance ratio gives about ln 10 of separation.
        assert!(mean(0) - mean(1) > 1.0);
    }

    #[test]
    fn fit_preconditions() {
        let set = two_class_set(6, 10);
        let one_class = set.select(&[0, 2, 4]);
        assert!(matches!(csp_fit(&one_class, 2), Err(FeatureError::Parameter(_))));
        let thin = set.select(&[0, 2, 1]);
        assert!(matches!(csp_fit(&thin, 2), Err(FeatureError::Parameter(_))));
        assert!(matches!(csp_fit(&set, 3), Err(FeatureError::Parameter(_))));
        let mut flat = set.clone();
        flat.epochs.index_axis_mut(Axis(1), 2).fill(0.0);
        assert!(matches!(csp_fit(&flat, 4), Err(FeatureError::Fit(_))));
        assert!(csp_fit(&flat, 2).is_ok());
    }

    #[test]
    fn average_referenced_data_stays_in_range() {
        let mut set = two_class_set(9, 20);
        for mut frame in set.epochs.lanes_mut(Axis(1)) {
            let m = frame.mean().unwrap();
            frame.mapv_inplace(|v| v - m);
        }
        let model = csp_fit(&set, 2).unwrap();
        for w in &model.filters {
            for col in w.columns() {
                // orthogonal to the removed common mode
                assert!(col.sum().abs() < 1e-6 * col.dot(&col).sqrt());
            }
            let composite = &model.class_covs[0] + &model.rest_covs[0];
            let white = w.t().dot(&composite).dot(w);
            assert!((white[(0, 0)] - 1.0).abs() < 1e-9 && white[(0, 1)].abs() < 1e-9);
        }
        let (f, flagged) = csp_transform(&model, &set).unwrap();
        assert_eq!(flagged, 0);
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let set = two_class_set(7, 5);
        let model = csp_fit(&set, 2).unwrap();
        let x = Array2::zeros((3, 100));
        assert!(matches!(model.transform_window(x.view()), Err(FeatureError::Shape(_))));
    }
}
