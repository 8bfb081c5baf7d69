//! Token-level uncertainty metrics and the 16 per-response features built
//! from them.
//!
//! Feature order is metric-major: `prob`, `neg_log_prob`, `entropy`, `dlr`,
//! each aggregated as `mean`, `min`, `max`, `sum`. Index `4 * metric + stat`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{GenerationTrace, PromptRecord, TokenStep};

pub const FEATURE_COUNT: usize = 16;

pub const METRIC_NAMES: [&str; 4] = ["prob", "neg_log_prob", "entropy", "dlr"];
pub const STAT_NAMES: [&str; 4] = ["mean", "min", "max", "sum"];

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "prob_mean",
    "prob_min",
    "prob_max",
    "prob_sum",
    "neg_log_prob_mean",
    "neg_log_prob_min",
    "neg_log_prob_max",
    "neg_log_prob_sum",
    "entropy_mean",
    "entropy_min",
    "entropy_max",
    "entropy_sum",
    "dlr_mean",
    "dlr_min",
    "dlr_max",
    "dlr_sum",
];

/// Smallest DLR denominator magnitude before the guard kicks in.
pub const DLR_DENOMINATOR_FLOOR: f64 = 1e-9;

pub fn feature_index(metric: usize, stat: usize) -> usize {
    4 * metric + stat
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenUncertainty {
    pub prob: f64,
    pub neg_log_prob: f64,
    pub entropy: f64,
    pub dlr: f64,
}

impl TokenUncertainty {
    fn metrics(&self) -> [f64; 4] {
        [self.prob, self.neg_log_prob, self.entropy, self.dlr]
    }
}

/// Difference of logits ratio `(l1 - l2) / ((l1 - (l3 + l4)) / 2)` over the
/// four largest logits.
///
/// A denominator smaller than [`DLR_DENOMINATOR_FLOOR`] in magnitude is
/// replaced by the floor with the same sign (zero counts as positive).
pub fn dlr(logits: [f64; 4]) -> Result<f64> {
    let [l1, l2, l3, l4] = logits;
    if !(l1 >= l2 && l2 >= l3 && l3 >= l4) {
        return Err(Error::InvalidInput(format!(
            "logits {logits:?} must be sorted non-increasing"
        )));
    }
    let mut denominator = (l1 - (l3 + l4)) / 2.0;
    if denominator.abs() < DLR_DENOMINATOR_FLOOR {
        denominator = if denominator < 0.0 {
            -DLR_DENOMINATOR_FLOOR
        } else {
            DLR_DENOMINATOR_FLOOR
        };
    }
    Ok((l1 - l2) / denominator)
}

pub fn token_uncertainty(step: &TokenStep) -> Result<TokenUncertainty> {
    Ok(TokenUncertainty {
        prob: step.p_chosen,
        neg_log_prob: -step.p_chosen.ln(),
        entropy: step.entropy,
        dlr: dlr(step.top_logits)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_COUNT]);

impl FeatureVector {
    pub fn get(&self, metric: usize, stat: usize) -> f64 {
        self.0[feature_index(metric, stat)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn response_features(trace: &GenerationTrace) -> Result<FeatureVector> {
    if trace.steps.is_empty() {
        return Err(Error::InvalidInput(format!(
            "response {} has no token steps",
            trace.response_id
        )));
    }
    let mut min = [f64::INFINITY; 4];
    let mut max = [f64::NEG_INFINITY; 4];
    let mut sum = [0.0; 4];
    for step in &trace.steps {
        for (k, v) in token_uncertainty(step)?.metrics().into_iter().enumerate() {
            min[k] = min[k].min(v);
            max[k] = max[k].max(v);
            sum[k] += v;
        }
    }
    let n = trace.steps.len() as f64;
    let mut out = [0.0; FEATURE_COUNT];
    for k in 0..4 {
        out[feature_index(k, 0)] = sum[k] / n;
        out[feature_index(k, 1)] = min[k];
        out[feature_index(k, 2)] = max[k];
        out[feature_index(k, 3)] = sum[k];
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "response {} produced non-finite features",
            trace.response_id
        )));
    }
    Ok(FeatureVector(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub prompt_id: String,
    pub response_id: String,
    pub features: FeatureVector,
}

pub fn corpus_features(corpus: &[PromptRecord]) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::new();
    for record in corpus {
        for trace in &record.traces {
            rows.push(FeatureRow {
                prompt_id: record.prompt_id.clone(),
                response_id: trace.response_id.clone(),
                features: response_features(trace)?,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(out: W, rows: &[FeatureRow]) -> Result<()> {
    let internal = |e: csv::Error| Error::Internal(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["prompt_id", "response_id"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header).map_err(internal)?;
    for row in rows {
        let mut record = vec![row.prompt_id.clone(), row.response_id.clone()];
        record.extend(row.features.0.iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(internal)?;
    }
    w.flush().map_err(|e| Error::Internal(e.to_string()))
}

/// Read a features CSV. Columns are matched by name, so their order in the
/// file does not matter.
pub fn read_csv<R: Read>(input: R, source: &str) -> Result<Vec<FeatureRow>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.into(),
        line,
        message,
    };
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column {name:?}")))
    };
    let pid = column("prompt_id")?;
    let rid = column("response_id")?;
    let cols: Vec<usize> = FEATURE_NAMES.iter().map(|n| column(n)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        let mut features = [0.0; FEATURE_COUNT];
        for (slot, &c) in features.iter_mut().zip(&cols) {
            let raw = record.get(c).unwrap_or("");
            *slot = raw
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad number {raw:?} in column {}", &headers[c])))?;
        }
        rows.push(FeatureRow {
            prompt_id: record.get(pid).unwrap_or("").to_string(),
            response_id: record.get(rid).unwrap_or("").to_string(),
            features: FeatureVector(features),
        });
    }
    Ok(rows)
}
