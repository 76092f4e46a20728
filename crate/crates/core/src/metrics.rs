//! Evaluation quantities for a defended model and the attacks against it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{extract_features, FeatureSet, TrainedModel};

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackAccuracy {
    pub att_acc: f64,
    pub ci_half_width: f64,
    pub n: usize,
}

/// Normal-approximation 95% half-width for a proportion over `n` trials.
pub fn binomial_ci(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    Z95 * (p * (1.0 - p) / n as f64).sqrt()
}

/// Top-1 agreement between evaluation-model predictions and target labels.
pub fn attack_accuracy_from_features(feats: &FeatureSet) -> AttackAccuracy {
    let p = feats.accuracy();
    AttackAccuracy {
        att_acc: p,
        ci_half_width: binomial_ci(p, feats.len()),
        n: feats.len(),
    }
}

pub fn attack_accuracy(eval_model: &TrainedModel, reconstructions: &ImageBatch) -> Result<AttackAccuracy> {
    Ok(attack_accuracy_from_features(&extract_features(eval_model, reconstructions)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnDistance {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

/// For each query row, the L2 distance to the nearest reference row sharing
/// its label.
pub fn knn_distance_features(queries: &FeatureSet, reference: &FeatureSet) -> Result<KnnDistance> {
    if queries.feature_dim != reference.feature_dim {
        return Err(Error::Shape(format!(
            "feature widths differ: {} vs {}",
            queries.feature_dim, reference.feature_dim
        )));
    }
    let per_sample = (0..queries.len())
        .map(|i| {
            let label = queries.labels[i];
            let q = queries.feature(i);
            reference
                .rows_with_label(label)
                .into_iter()
                .map(|j| {
                    q.iter()
                        .zip(reference.feature(j))
                        .map(|(a, b)| ((a - b) as f64).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .min_by(f64::total_cmp)
                .ok_or(Error::MissingIdentity(label))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().sum::<f64>() / per_sample.len() as f64
    };
    Ok(KnnDistance { mean, per_sample })
}

/// Mean nearest same-identity private distance in the evaluation model's
/// penultimate space.
pub fn knn_distance(eval_model: &TrainedModel, reconstructions: &ImageBatch, private: &ImageBatch) -> Result<KnnDistance> {
    knn_distance_features(
        &extract_features(eval_model, reconstructions)?,
        &extract_features(eval_model, private)?,
    )
}

/// Attack-accuracy drop per point of natural-accuracy drop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Delta {
    Ratio(f64),
    /// The defended model is more accurate than the undefended one.
    Outperforms,
    /// Equal natural accuracies: the ratio is undefined.
    Degenerate,
}

impl Delta {
    pub fn value(self) -> Option<f64> {
        match self {
            Delta::Ratio(v) => Some(v),
            _ => None,
        }
    }

    pub fn flag(self) -> Option<&'static str> {
        match self {
            Delta::Ratio(_) => None,
            Delta::Outperforms => Some("OP"),
            Delta::Degenerate => Some("degenerate"),
        }
    }

    pub fn render(self) -> String {
        match self {
            Delta::Ratio(v) => format!("{v:.2}"),
            other => other.flag().unwrap_or_default().to_string(),
        }
    }
}

/// `(attacc_nodef - attacc_def) / (acc_nodef - acc_def)`; inputs in percent.
pub fn tradeoff_delta(acc_nodef: f64, attacc_nodef: f64, acc_def: f64, attacc_def: f64) -> Result<Delta> {
    for v in [acc_nodef, attacc_nodef, acc_def, attacc_def] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Config(format!("percentage {v} outside [0, 100]")));
        }
    }
    Ok(if acc_def > acc_nodef {
        Delta::Outperforms
    } else if acc_def == acc_nodef {
        Delta::Degenerate
    } else {
        Delta::Ratio((attacc_nodef - attacc_def) / (acc_nodef - acc_def))
    })
}

/// Handling of near-singular covariances in the Fréchet distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shrinkage {
    /// Rank-deficient covariance is an error.
    Off,
    /// Ridge of `1e-6 * trace / dim` when a set has no more rows than features.
    Auto,
    Always,
}

pub const RIDGE_SCALE: f64 = 1e-6;

/// Sample mean and unbiased covariance of `n x dim` row-major data.
pub fn mean_and_covariance(rows: &[f64], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len() / dim.max(1);
    let x = DMatrix::from_row_slice(n, dim, rows);
    let mean = DVector::from_iterator(dim, x.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = n.saturating_sub(1).max(1) as f64;
    let cov = centered.transpose() * &centered / denom;
    (mean, cov)
}

fn add_ridge(cov: &mut DMatrix<f64>) {
    let dim = cov.nrows();
    let eps = RIDGE_SCALE * cov.trace() / dim as f64;
    for i in 0..dim {
        cov[(i, i)] += eps;
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(A + B - 2 (A^{1/2} B A^{1/2})^{1/2})`.
pub fn frechet_from_stats(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let ra = psd_sqrt(cov_a);
    let mid = &ra * cov_b * &ra;
    let mid = (&mid + mid.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(mid).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    d.max(0.0)
}

fn rank_deficient(cov: &DMatrix<f64>) -> bool {
    let scale = cov.trace().abs().max(f64::MIN_POSITIVE);
    let min = SymmetricEigen::new(cov.clone()).eigenvalues.min();
    min <= 1e-12 * scale
}

/// Fréchet distance between Gaussians fitted to two row sets of width `dim`.
pub fn frechet_distance_rows(a: &[f64], b: &[f64], dim: usize, shrinkage: Shrinkage) -> Result<f64> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::Shape("feature rows do not divide into the given width".into()));
    }
    let (na, nb) = (a.len() / dim, b.len() / dim);
    if na < 2 || nb < 2 {
        return Err(Error::Degenerate("Fréchet distance needs at least two rows per set".into()));
    }
    let (mu_a, mut cov_a) = mean_and_covariance(a, dim);
    let (mu_b, mut cov_b) = mean_and_covariance(b, dim);
    for (cov, n) in [(&mut cov_a, na), (&mut cov_b, nb)] {
        let shrink = match shrinkage {
            Shrinkage::Off => false,
            Shrinkage::Auto => n <= dim,
            Shrinkage::Always => true,
        };
        if shrink {
            add_ridge(cov);
        } else if shrinkage == Shrinkage::Off && rank_deficient(cov) {
            return Err(Error::Degenerate(format!(
                "covariance of {n} rows in {dim} dimensions is rank-deficient"
            )));
        }
    }
    Ok(frechet_from_stats(&mu_a, &cov_a, &mu_b, &cov_b))
}

pub fn frechet_feature_distance(a: &FeatureSet, b: &FeatureSet, shrinkage: Shrinkage) -> Result<f64> {
    if a.feature_dim != b.feature_dim {
        return Err(Error::Shape(format!(
            "feature widths differ: {} vs {}",
            a.feature_dim, b.feature_dim
        )));
    }
    let to64 = |f: &FeatureSet| f.features.iter().map(|&v| v as f64).collect::<Vec<_>>();
    frechet_distance_rows(&to64(a), &to64(b), a.feature_dim, shrinkage)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub target_id: String,
    pub eval_id: String,
    pub decoder_id: Option<String>,
    pub attack_config_hash: String,
    pub seed: u64,
}

/// Contents of `metrics.json` for one experiment. Fractions, not percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub att_acc: f64,
    pub att_acc_ci: f64,
    pub knn_dist: f64,
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_flag: Option<String>,
    pub ffd: f64,
    pub hull_iou_recon_priv: Option<f64>,
    pub hull_iou_recon_re: Option<f64>,
    pub hull_iou_re_priv: Option<f64>,
    pub provenance: ReportProvenance,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.acc) || !unit(self.att_acc) || !(self.knn_dist >= 0.0) || !(self.ffd >= 0.0) {
            return Err(Error::Invariant(format!("metrics out of range: {self:?}")));
        }
        Ok(())
    }

    /// Sets `delta` relative to an undefended baseline's (acc, att_acc).
    pub fn with_delta(mut self, baseline_acc: f64, baseline_att: f64) -> Result<Self> {
        let d = tradeoff_delta(
            percent(baseline_acc),
            percent(baseline_att),
            percent(self.acc),
            percent(self.att_acc),
        )?;
        self.delta = d.value();
        self.delta_flag = d.flag().map(str::to_string);
        Ok(self)
    }
}

/// Fraction to percent, rounded to two decimals.
pub fn percent(fraction: f64) -> f64 {
    (fraction * 10_000.0).round() / 100.0
}
