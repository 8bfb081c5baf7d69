//! Seeded k-fold splitting and fast per-fold least squares.
//!
//! Each fold's Gram matrix over `[1, z]` (globally z-scored columns plus an
//! intercept) is accumulated once; a training fit for any column subset is
//! then the total Gram minus the held-out fold's, solved by Cholesky.
//! Z-scoring is affine and the intercept is always present, so predictions
//! match a fit on the raw columns.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// Pivots at or below this fraction of their original diagonal are treated
/// as collinear and dropped from the fit.
const PIVOT_TOLERANCE: f64 = 1e-10;

/// Shuffle `0..n` with `seed` and cut it into `folds` contiguous parts; the
/// first `n % folds` parts get one extra sample.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 folds, got {folds}")));
    }
    if n < folds {
        return Err(Error::InvalidInput(format!("{n} samples cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

pub struct CvContext {
    /// Augmented row-major design `[1, z_0 .. z_{k-1}]`, width `k + 1`.
    design: Vec<f64>,
    width: usize,
    y: Vec<f64>,
    folds: Vec<Vec<usize>>,
    total_gram: Vec<f64>,
    total_xty: Vec<f64>,
    fold_gram: Vec<Vec<f64>>,
    fold_xty: Vec<Vec<f64>>,
}

impl CvContext {
    pub fn new(x: &FeatureMatrix, y: &[f64], folds: Vec<Vec<usize>>) -> Result<Self> {
        let (n, k) = (x.rows(), x.cols());
        if y.len() != n {
            return Err(Error::InvalidInput(format!("{n} design rows but {} targets", y.len())));
        }
        let width = k + 1;
        let mut design = vec![0.0; n * width];
        for j in 0..k {
            let mean = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..n {
                design[i * width + j + 1] = (x.get(i, j) - mean) / scale;
            }
        }
        for i in 0..n {
            design[i * width] = 1.0;
        }

        let mut fold_gram = Vec::with_capacity(folds.len());
        let mut fold_xty = Vec::with_capacity(folds.len());
        let mut total_gram = vec![0.0; width * width];
        let mut total_xty = vec![0.0; width];
        for fold in &folds {
            let mut gram = vec![0.0; width * width];
            let mut xty = vec![0.0; width];
            for &i in fold {
                let row = &design[i * width..(i + 1) * width];
                for a in 0..width {
                    xty[a] += row[a] * y[i];
                    for b in a..width {
                        gram[a * width + b] += row[a] * row[b];
                    }
                }
            }
            for a in 0..width {
                for b in 0..a {
                    gram[a * width + b] = gram[b * width + a];
                }
            }
            for (t, g) in total_gram.iter_mut().zip(&gram) {
                *t += g;
            }
            for (t, v) in total_xty.iter_mut().zip(&xty) {
                *t += v;
            }
            fold_gram.push(gram);
            fold_xty.push(xty);
        }

        Ok(CvContext {
            design,
            width,
            y: y.to_vec(),
            folds,
            total_gram,
            total_xty,
            fold_gram,
            fold_xty,
        })
    }

    pub fn fold_count(&self) -> usize {
        self.folds.len()
    }

    /// Intercept-first coefficients fitted on every fold except `held_out`.
    fn fit_excluding(&self, held_out: usize, selected: &[usize]) -> Vec<f64> {
        let cols: Vec<usize> = std::iter::once(0).chain(selected.iter().map(|&j| j + 1)).collect();
        let d = cols.len();
        let (g, b) = (&self.fold_gram[held_out], &self.fold_xty[held_out]);
        let mut gram = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        for (r, &a) in cols.iter().enumerate() {
            rhs[r] = self.total_xty[a] - b[a];
            for (c, &bb) in cols.iter().enumerate() {
                gram[r * d + c] = self.total_gram[a * self.width + bb] - g[a * self.width + bb];
            }
        }
        solve_spd_dropping(&gram, &rhs, d)
    }

    fn predict(&self, i: usize, selected: &[usize], coef: &[f64]) -> f64 {
        let row = &self.design[i * self.width..(i + 1) * self.width];
        coef[0] + selected.iter().zip(&coef[1..]).map(|(&j, c)| c * row[j + 1]).sum::<f64>()
    }

    /// Mean over folds of the held-out mean squared error.
    pub fn mean_fold_mse(&self, selected: &[usize]) -> f64 {
        let mut total = 0.0;
        for (f, fold) in self.folds.iter().enumerate() {
            let coef = self.fit_excluding(f, selected);
            let sse: f64 = fold
                .iter()
                .map(|&i| (self.y[i] - self.predict(i, selected, &coef)).powi(2))
                .sum();
            total += sse / fold.len() as f64;
        }
        total / self.folds.len() as f64
    }

    /// Prediction for every sample from the model that did not see it.
    pub fn out_of_fold_predictions(&self, selected: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.y.len()];
        for (f, fold) in self.folds.iter().enumerate() {
            let coef = self.fit_excluding(f, selected);
            for &i in fold {
                out[i] = self.predict(i, selected, &coef);
            }
        }
        out
    }
}

/// Solve `G c = b` for symmetric positive semi-definite `G` (row-major,
/// `d x d`). Columns whose Cholesky pivot collapses get coefficient 0, which
/// is the least-squares solution with those columns removed.
fn solve_spd_dropping(gram: &[f64], rhs: &[f64], d: usize) -> Vec<f64> {
    let mut l = vec![0.0; d * d];
    let mut kept = vec![true; d];
    for j in 0..d {
        let mut pivot = gram[j * d + j];
        for k in 0..j {
            pivot -= l[j * d + k] * l[j * d + k];
        }
        if pivot.is_nan() || pivot <= PIVOT_TOLERANCE * gram[j * d + j] || pivot <= 0.0 {
            kept[j] = false;
            continue;
        }
        let ljj = pivot.sqrt();
        l[j * d + j] = ljj;
        for i in j + 1..d {
            let mut s = gram[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / ljj;
        }
    }
    let mut z = vec![0.0; d];
    for i in 0..d {
        if !kept[i] {
            continue;
        }
        let mut s = rhs[i];
        for k in 0..i {
            s -= l[i * d + k] * z[k];
        }
        z[i] = s / l[i * d + i];
    }
    let mut c = vec![0.0; d];
    for i in (0..d).rev() {
        if !kept[i] {
            continue;
        }
        let mut s = z[i];
        for k in i + 1..d {
            s -= l[k * d + i] * c[k];
        }
        c[i] = s / l[i * d + i];
    }
    c
}
