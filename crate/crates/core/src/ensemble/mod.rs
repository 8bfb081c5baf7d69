//! Linear ensembles of logit-based features fitted to human consistency
//! targets, with greedy forward feature selection under k-fold
//! cross-validation.

mod cv;
mod sfs;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, FEATURE_COUNT, FEATURE_NAMES};

pub use cv::{fold_assignment, CvContext};
pub use sfs::{selection_campaign, sfs, SelectionReport, SfsResult, SizeSummary};

pub const ENSEMBLE_TAG: &str = "ensemble";
pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_REPETITIONS: usize = 100;

/// Singular values below this fraction of the largest mark a rank-deficient
/// design.
const RANK_TOLERANCE: f64 = 1e-10;

/// Dense row-major `n x k` design matrix with column names.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    names: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, names: Vec<String>) -> Result<Self> {
        if data.len() != rows * cols || names.len() != cols {
            return Err(Error::InvalidInput(format!(
                "design of {rows}x{cols} needs {} values and {cols} names, got {} and {}",
                rows * cols,
                data.len(),
                names.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("design contains non-finite values".into()));
        }
        Ok(FeatureMatrix {
            rows,
            cols,
            data,
            names,
        })
    }

    /// Build from row slices; columns are named `f0, f1, ...`.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::InvalidInput("ragged design rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        let names = (0..cols).map(|j| format!("f{j}")).collect();
        Self::new(rows.len(), cols, data, names)
    }

    pub fn from_features(features: &[FeatureVector]) -> Result<Self> {
        let data = features.iter().flat_map(|f| f.0).collect();
        let names = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
        Self::new(features.len(), FEATURE_COUNT, data, names)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let data = indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        FeatureMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
            names: self.names.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

/// A fitted linear model over z-scored features. Weights, names and
/// standardization are aligned with `selected_feature_indices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub selected_feature_indices: Vec<usize>,
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub standardization: Vec<Standardization>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Unclamped model output; use this for correlations.
    pub raw: f64,
    /// `raw` clamped to `[0, 1]` for reporting.
    pub reported: f64,
}

impl EnsembleModel {
    pub fn predict_row(&self, row: &[f64]) -> Prediction {
        let raw = self.intercept
            + self
                .selected_feature_indices
                .iter()
                .zip(&self.weights)
                .zip(&self.standardization)
                .map(|((&j, w), s)| w * (row[j] - s.mean) / s.std)
                .sum::<f64>();
        Prediction {
            raw,
            reported: raw.clamp(0.0, 1.0),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: EnsembleModel = crate::trace::read_json_file(path.as_ref())?;
        let k = model.selected_feature_indices.len();
        if model.weights.len() != k || model.standardization.len() != k || model.feature_names.len() != k {
            return Err(Error::InvalidInput(format!(
                "{}: model arrays disagree in length",
                path.as_ref().display()
            )));
        }
        if model.standardization.iter().any(|s| s.std.is_nan() || s.std <= 0.0) {
            return Err(Error::InvalidInput(format!(
                "{}: standardization std must be positive",
                path.as_ref().display()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::trace::write_json_file(path.as_ref(), self)
    }
}

pub fn predict(model: &EnsembleModel, features: &FeatureVector) -> Prediction {
    model.predict_row(features.as_slice())
}

/// Population mean and standard deviation of column `j`.
fn column_moments(x: &FeatureMatrix, j: usize) -> (f64, f64) {
    let n = x.rows() as f64;
    let mean = (0..x.rows()).map(|i| x.get(i, j)).sum::<f64>() / n;
    let var = (0..x.rows()).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Least-squares fit of `y` on every column of `x`.
pub fn fit_ols(x: &FeatureMatrix, y: &[f64]) -> Result<EnsembleModel> {
    let all: Vec<usize> = (0..x.cols()).collect();
    fit_ols_subset(x, y, &all)
}

/// Least-squares fit of `y` on the columns `selected` of `x`, after z-scoring
/// each column. The intercept is the target mean; weights come from an SVD
/// solve on the standardized columns.
pub fn fit_ols_subset(x: &FeatureMatrix, y: &[f64], selected: &[usize]) -> Result<EnsembleModel> {
    let (n, k) = (x.rows(), selected.len());
    if y.len() != n {
        return Err(Error::InvalidInput(format!("{n} design rows but {} targets", y.len())));
    }
    if n <= k {
        return Err(Error::InvalidInput(format!("need more samples than features, got n = {n}, k = {k}")));
    }
    if let Some(&j) = selected.iter().find(|&&j| j >= x.cols()) {
        return Err(Error::InvalidInput(format!("feature index {j} out of range")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("targets contain non-finite values".into()));
    }

    let mut standardization = Vec::with_capacity(k);
    for &j in selected {
        let (mean, std) = column_moments(x, j);
        if std.is_nan() || std <= f64::EPSILON * (1.0 + mean.abs()) {
            return Err(Error::RankDeficient {
                columns: vec![x.names()[j].clone()],
            });
        }
        standardization.push(Standardization { mean, std });
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;

    let z = DMatrix::from_fn(n, k, |i, c| {
        let s = standardization[c];
        (x.get(i, selected[c]) - s.mean) / s.std
    });
    let centered = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));

    let svd = z.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let v_t = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::Internal("SVD did not produce right singular vectors".into()))?;
    let mut collinear = std::collections::BTreeSet::new();
    for (r, &sigma) in svd.singular_values.iter().enumerate() {
        if sigma <= RANK_TOLERANCE * sigma_max {
            for c in 0..k {
                if v_t[(r, c)].abs() > 1e-6 {
                    collinear.insert(c);
                }
            }
        }
    }
    if !collinear.is_empty() {
        return Err(Error::RankDeficient {
            columns: collinear.into_iter().map(|c| x.names()[selected[c]].clone()).collect(),
        });
    }
    let weights = svd
        .solve(&centered, 0.0)
        .map_err(|e| Error::Internal(format!("least-squares solve failed: {e}")))?;

    Ok(EnsembleModel {
        selected_feature_indices: selected.to_vec(),
        feature_names: selected.iter().map(|&j| x.names()[j].clone()).collect(),
        weights: weights.iter().copied().collect(),
        intercept: y_mean,
        standardization,
    })
}

/// Out-of-fold predictions for `selected` columns under seeded k-fold
/// splitting. Collinear columns are dropped within each fold rather than
/// failing the whole run.
pub fn cross_val_predict(
    x: &FeatureMatrix,
    y: &[f64],
    selected: &[usize],
    folds: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let assignment = fold_assignment(x.rows(), folds, seed)?;
    let ctx = CvContext::new(x, y, assignment)?;
    Ok(ctx.out_of_fold_predictions(selected))
}
