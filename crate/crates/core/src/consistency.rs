//! Response-level and prompt-level consistency from a similarity matrix.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::trace::SimilarityMatrix;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResponseConsistency {
    pub prompt_id: String,
    pub response_id: String,
    pub metric_tag: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptConsistency {
    pub prompt_id: String,
    pub metric_tag: String,
    pub value: f64,
}

fn require_pairs(matrix: &SimilarityMatrix) -> Result<usize> {
    let m = matrix.size();
    if m < 2 {
        return Err(Error::invariant(
            matrix.prompt_id(),
            "matrix",
            format!("consistency needs at least 2 responses, got {m}"),
        ));
    }
    Ok(m)
}

/// Mean similarity of response `i` to each of the other responses.
pub fn response_consistency_value(matrix: &SimilarityMatrix, i: usize) -> Result<f64> {
    let m = require_pairs(matrix)?;
    if i >= m {
        return Err(Error::InvalidInput(format!("response index {i} out of range for {m} responses")));
    }
    let total: f64 = (0..m).filter(|&j| j != i).map(|j| matrix.get(j, i)).sum();
    Ok(total / (m - 1) as f64)
}

pub fn response_consistency(
    matrix: &SimilarityMatrix,
    i: usize,
    response_id: impl Into<String>,
) -> Result<ResponseConsistency> {
    Ok(ResponseConsistency {
        prompt_id: matrix.prompt_id().to_string(),
        response_id: response_id.into(),
        metric_tag: matrix.metric_tag().to_string(),
        value: response_consistency_value(matrix, i)?,
    })
}

/// Response consistency for every response, ids taken from `response_ids`.
pub fn all_response_consistency(
    matrix: &SimilarityMatrix,
    response_ids: &[&str],
) -> Result<Vec<ResponseConsistency>> {
    if response_ids.len() != matrix.size() {
        return Err(Error::invariant(
            matrix.prompt_id(),
            "matrix",
            format!("{} response ids for a {}x{} matrix", response_ids.len(), matrix.size(), matrix.size()),
        ));
    }
    response_ids
        .iter()
        .enumerate()
        .map(|(i, id)| response_consistency(matrix, i, *id))
        .collect()
}

/// Prompt consistency as the mean of all off-diagonal entries, which equals
/// the mean of the per-response consistencies.
pub fn prompt_consistency(matrix: &SimilarityMatrix) -> Result<PromptConsistency> {
    let m = require_pairs(matrix)?;
    let upper: f64 = matrix.pairs().map(|(_, _, v)| v).sum();
    let pairs = (m * (m - 1) / 2) as f64;
    Ok(PromptConsistency {
        prompt_id: matrix.prompt_id().to_string(),
        metric_tag: matrix.metric_tag().to_string(),
        value: upper / pairs,
    })
}

/// Write `prompt_id,response_id,metric_tag,value` rows; prompt-level rows
/// leave `response_id` blank.
pub fn write_csv<W: Write>(
    out: W,
    responses: &[ResponseConsistency],
    prompts: &[PromptConsistency],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let internal = |e: csv::Error| Error::Internal(e.to_string());
    w.write_record(["prompt_id", "response_id", "metric_tag", "value"])
        .map_err(internal)?;
    for r in responses {
        w.write_record([&r.prompt_id, &r.response_id, &r.metric_tag, &r.value.to_string()])
            .map_err(internal)?;
    }
    for p in prompts {
        w.write_record([&p.prompt_id, "", &p.metric_tag, &p.value.to_string()])
            .map_err(internal)?;
    }
    w.flush().map_err(|e| Error::Internal(e.to_string()))
}
