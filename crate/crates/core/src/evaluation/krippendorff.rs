//! Krippendorff's alpha via the coincidence matrix.
//!
//! Units with fewer than two values are not pairable and are ignored.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::trim_extremes;
use crate::trace::RatingSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaLevel {
    #[default]
    Interval,
    Ordinal,
}

impl fmt::Display for AlphaLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlphaLevel::Interval => "interval",
            AlphaLevel::Ordinal => "ordinal",
        })
    }
}

impl FromStr for AlphaLevel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "interval" => Ok(AlphaLevel::Interval),
            "ordinal" => Ok(AlphaLevel::Ordinal),
            other => Err(format!("unknown alpha level {other:?}")),
        }
    }
}

/// Alpha over raw units, each a list of values given to one unit.
pub fn alpha_from_units(units: &[Vec<f64>], level: AlphaLevel) -> Result<f64> {
    let pairable: Vec<&Vec<f64>> = units.iter().filter(|u| u.len() >= 2).collect();
    if pairable.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "krippendorff alpha needs at least 2 units with 2+ values, got {}",
            pairable.len()
        )));
    }
    if pairable.iter().flat_map(|u| u.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite rating value".into()));
    }

    let mut categories: Vec<f64> = pairable.iter().flat_map(|u| u.iter().copied()).collect();
    categories.sort_by(|a, b| a.partial_cmp(b).unwrap());
    categories.dedup();
    let c = categories.len();
    let index = |v: f64| categories.binary_search_by(|p| p.partial_cmp(&v).unwrap()).unwrap();

    let mut coincidence = vec![0.0; c * c];
    for unit in &pairable {
        let mut counts = vec![0.0; c];
        for &v in unit.iter() {
            counts[index(v)] += 1.0;
        }
        let weight = 1.0 / (unit.len() as f64 - 1.0);
        for a in 0..c {
            if counts[a] == 0.0 {
                continue;
            }
            for b in 0..c {
                let pairs = if a == b {
                    counts[a] * (counts[a] - 1.0)
                } else {
                    counts[a] * counts[b]
                };
                coincidence[a * c + b] += pairs * weight;
            }
        }
    }
    let marginals: Vec<f64> = (0..c).map(|a| coincidence[a * c..(a + 1) * c].iter().sum()).collect();
    let n: f64 = marginals.iter().sum();

    let delta = |a: usize, b: usize| -> f64 {
        match level {
            AlphaLevel::Interval => (categories[a] - categories[b]).powi(2),
            AlphaLevel::Ordinal => {
                let (lo, hi) = (a.min(b), a.max(b));
                let span: f64 = marginals[lo..=hi].iter().sum();
                (span - (marginals[lo] + marginals[hi]) / 2.0).powi(2)
            }
        }
    };

    let (mut observed, mut expected) = (0.0, 0.0);
    for a in 0..c {
        for b in 0..c {
            let d = delta(a, b);
            observed += coincidence[a * c + b] * d;
            expected += marginals[a] * marginals[b] * d;
        }
    }
    if expected == 0.0 {
        return Err(Error::InvalidInput("krippendorff alpha undefined: ratings show no variation".into()));
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

/// Alpha over rating sets after dropping one highest and one lowest rating
/// from each set, mirroring the trimmed-mean aggregation.
pub fn krippendorff_alpha(rating_sets: &[RatingSet], level: AlphaLevel) -> Result<f64> {
    let units: Vec<Vec<f64>> = rating_sets
        .iter()
        .map(|s| trim_extremes(&s.ratings).into_iter().map(f64::from).collect())
        .collect();
    alpha_from_units(&units, level)
}

/// Alpha over the untrimmed ratings.
pub fn krippendorff_alpha_untrimmed(rating_sets: &[RatingSet], level: AlphaLevel) -> Result<f64> {
    let units: Vec<Vec<f64>> = rating_sets
        .iter()
        .map(|s| s.ratings.iter().map(|&r| f64::from(r)).collect())
        .collect();
    alpha_from_units(&units, level)
}
