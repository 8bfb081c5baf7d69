//! Sequential forward selection and repeated selection campaigns.

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{fold_assignment, CvContext, FeatureMatrix};
use crate::error::{Error, Result};
use crate::evaluation::spearman;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SfsResult {
    /// Feature indices in the order they were added.
    pub selected: Vec<usize>,
    /// Mean held-out MSE after each addition.
    pub step_mse: Vec<f64>,
    pub cv_mse: f64,
    /// Spearman rho of pooled out-of-fold predictions against the targets;
    /// `None` when the predictions are constant.
    pub cv_spearman: Option<f64>,
}

/// Greedy forward selection: each step adds the feature with the lowest mean
/// held-out MSE (ties go to the lower index). Folds are shuffled with `seed`.
pub fn sfs(
    x: &FeatureMatrix,
    y: &[f64],
    target_size: usize,
    folds: usize,
    seed: u64,
) -> Result<SfsResult> {
    if target_size == 0 || target_size > x.cols() {
        return Err(Error::InvalidInput(format!(
            "target size {target_size} outside 1..={}",
            x.cols()
        )));
    }
    let assignment = fold_assignment(x.rows(), folds, seed)?;
    let ctx = CvContext::new(x, y, assignment)?;

    let mut selected: Vec<usize> = Vec::with_capacity(target_size);
    let mut step_mse = Vec::with_capacity(target_size);
    let mut candidate = Vec::with_capacity(target_size);
    while selected.len() < target_size {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..x.cols()).filter(|j| !selected.contains(j)) {
            candidate.clear();
            candidate.extend_from_slice(&selected);
            candidate.push(j);
            let mut mse = ctx.mean_fold_mse(&candidate);
            if mse.is_nan() {
                mse = f64::INFINITY;
            }
            if best.is_none_or(|(_, b)| mse < b) {
                best = Some((j, mse));
            }
        }
        let (j, mse) = best.expect("at least one unselected feature remains");
        selected.push(j);
        step_mse.push(mse);
    }

    let oof = ctx.out_of_fold_predictions(&selected);
    Ok(SfsResult {
        cv_mse: *step_mse.last().unwrap(),
        cv_spearman: spearman(&oof, y).ok(),
        selected,
        step_mse,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeSummary {
    pub size: usize,
    pub runs: usize,
    pub mean_cv_mse: f64,
    pub mean_cv_spearman: Option<f64>,
    /// Runs whose out-of-fold Spearman was defined.
    pub spearman_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionReport {
    pub feature_names: Vec<String>,
    pub repetitions: usize,
    pub total_runs: usize,
    pub selection_counts: Vec<usize>,
    pub curve: Vec<SizeSummary>,
}

impl SelectionReport {
    /// Feature indices by descending selection count, ties by index.
    pub fn ranked_features(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.selection_counts.len()).collect();
        order.sort_by(|&a, &b| self.selection_counts[b].cmp(&self.selection_counts[a]).then(a.cmp(&b)));
        order
    }

    pub fn best_size_by_spearman(&self) -> Option<&SizeSummary> {
        self.curve
            .iter()
            .filter(|s| s.mean_cv_spearman.is_some())
            .max_by(|a, b| a.mean_cv_spearman.partial_cmp(&b.mean_cv_spearman).unwrap())
    }

    pub fn write_counts_csv<W: Write>(&self, out: W) -> Result<()> {
        let internal = |e: csv::Error| Error::Internal(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "feature_index", "feature", "count", "total_runs"])
            .map_err(internal)?;
        for (rank, j) in self.ranked_features().into_iter().enumerate() {
            w.write_record([
                (rank + 1).to_string(),
                j.to_string(),
                self.feature_names[j].clone(),
                self.selection_counts[j].to_string(),
                self.total_runs.to_string(),
            ])
            .map_err(internal)?;
        }
        w.flush().map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn write_curve_csv<W: Write>(&self, out: W) -> Result<()> {
        let internal = |e: csv::Error| Error::Internal(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["size", "runs", "mean_cv_mse", "mean_cv_spearman", "spearman_runs"])
            .map_err(internal)?;
        for s in &self.curve {
            w.write_record([
                s.size.to_string(),
                s.runs.to_string(),
                s.mean_cv_mse.to_string(),
                s.mean_cv_spearman.map_or(String::new(), |v| v.to_string()),
                s.spearman_runs.to_string(),
            ])
            .map_err(internal)?;
        }
        w.flush().map_err(|e| Error::Internal(e.to_string()))
    }
}

/// Run [`sfs`] `repetitions` times at every selection size `1..=k`, each run
/// with its own fold shuffle. Run seeds are drawn in size-major order from a
/// single generator seeded with `seed`, so the campaign replays exactly
/// regardless of how runs are scheduled.
pub fn selection_campaign(
    x: &FeatureMatrix,
    y: &[f64],
    repetitions: usize,
    folds: usize,
    seed: u64,
) -> Result<SelectionReport> {
    let k = x.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let runs: Vec<(usize, u64)> = (1..=k)
        .flat_map(|size| (0..repetitions).map(move |_| size))
        .map(|size| (size, rng.next_u64()))
        .collect();
    let results: Vec<(usize, SfsResult)> = runs
        .par_iter()
        .map(|&(size, run_seed)| sfs(x, y, size, folds, run_seed).map(|r| (size, r)))
        .collect::<Result<_>>()?;

    let mut selection_counts = vec![0; k];
    let mut curve = Vec::with_capacity(k);
    for size in 1..=k {
        let at_size: Vec<&SfsResult> = results.iter().filter(|(s, _)| *s == size).map(|(_, r)| r).collect();
        for r in &at_size {
            for &j in &r.selected {
                selection_counts[j] += 1;
            }
        }
        let rhos: Vec<f64> = at_size.iter().filter_map(|r| r.cv_spearman).collect();
        curve.push(SizeSummary {
            size,
            runs: at_size.len(),
            mean_cv_mse: at_size.iter().map(|r| r.cv_mse).sum::<f64>() / at_size.len().max(1) as f64,
            mean_cv_spearman: (!rhos.is_empty()).then(|| rhos.iter().sum::<f64>() / rhos.len() as f64),
            spearman_runs: rhos.len(),
        });
    }
    Ok(SelectionReport {
        feature_names: x.names().to_vec(),
        repetitions,
        total_runs: results.len(),
        selection_counts,
        curve,
    })
}
