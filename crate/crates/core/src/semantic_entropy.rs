//! Semantic entropy: responses are grouped by bidirectional entailment and
//! the entropy of the resulting cluster distribution is reported.
//!
//! Semantic entropy is an uncertainty (higher means less consistent). When
//! it is compared against consistency scores, use
//! [`SemanticEntropyScore::consistency`], which maps it onto `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{EntailmentMatrix, GenerationTrace};

pub const SEMANTIC_ENTROPY_TAG: &str = "semantic_entropy";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SemanticClustering {
    pub prompt_id: String,
    pub cluster_assignment: Vec<usize>,
    pub cluster_count: usize,
}

impl SemanticClustering {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.cluster_count];
        for &c in &self.cluster_assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Each response counts equally.
    #[default]
    Uniform,
    /// Each response is weighted by its length-normalized sequence
    /// probability, `exp(mean log p)`.
    SeqProb,
}

impl Weighting {
    pub fn as_str(&self) -> &'static str {
        match self {
            Weighting::Uniform => "uniform",
            Weighting::SeqProb => "seq_prob",
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Weighting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "seq_prob" => Ok(Weighting::SeqProb),
            other => Err(format!("unknown weighting {other:?} (expected uniform or seq_prob)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemanticEntropyScore {
    pub prompt_id: String,
    /// Entropy over semantic clusters, in nats.
    pub entropy: f64,
    pub weighting_tag: Weighting,
    pub response_count: usize,
    pub cluster_count: usize,
}

impl SemanticEntropyScore {
    /// `1 - entropy / ln(m)`: 1 when all responses agree, 0 when every
    /// response stands alone under uniform weighting.
    pub fn consistency(&self) -> f64 {
        if self.response_count < 2 {
            return 1.0;
        }
        (1.0 - self.entropy / (self.response_count as f64).ln()).clamp(0.0, 1.0)
    }
}

/// Greedy first-fit clustering in response order. A response joins the first
/// cluster whose representative (its first member) it mutually entails.
pub fn cluster(entail: &EntailmentMatrix) -> SemanticClustering {
    let mut representatives: Vec<usize> = Vec::new();
    let mut assignment = Vec::with_capacity(entail.size());
    for j in 0..entail.size() {
        let found = representatives
            .iter()
            .position(|&r| entail.entails(j, r) && entail.entails(r, j));
        let c = found.unwrap_or_else(|| {
            representatives.push(j);
            representatives.len() - 1
        });
        assignment.push(c);
    }
    SemanticClustering {
        prompt_id: entail.prompt_id().to_string(),
        cluster_assignment: assignment,
        cluster_count: representatives.len(),
    }
}

fn sequence_weight(trace: &GenerationTrace) -> f64 {
    let mean_nlp =
        trace.steps.iter().map(|s| s.neg_log_p).sum::<f64>() / trace.steps.len() as f64;
    (-mean_nlp).exp()
}

/// Entropy of the cluster distribution. `traces` must be given, aligned with
/// the clustered responses, for [`Weighting::SeqProb`].
pub fn semantic_entropy(
    clustering: &SemanticClustering,
    traces: Option<&[GenerationTrace]>,
    weighting: Weighting,
) -> Result<SemanticEntropyScore> {
    let m = clustering.cluster_assignment.len();
    if m == 0 || clustering.cluster_count == 0 {
        return Err(Error::invariant(&clustering.prompt_id, "clustering", "no responses to cluster"));
    }
    let mut mass = vec![0.0; clustering.cluster_count];
    match weighting {
        Weighting::Uniform => {
            for &c in &clustering.cluster_assignment {
                mass[c] += 1.0;
            }
        }
        Weighting::SeqProb => {
            let traces = traces.ok_or_else(|| {
                Error::InvalidInput("seq_prob weighting needs the response traces".into())
            })?;
            if traces.len() != m {
                return Err(Error::invariant(
                    &clustering.prompt_id,
                    "traces",
                    format!("{} traces for {m} clustered responses", traces.len()),
                ));
            }
            for (trace, &c) in traces.iter().zip(&clustering.cluster_assignment) {
                if trace.steps.is_empty() {
                    return Err(Error::invariant(&clustering.prompt_id, "traces", "empty trace"));
                }
                mass[c] += sequence_weight(trace);
            }
        }
    }
    let total: f64 = mass.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::invariant(&clustering.prompt_id, "traces", "cluster weights do not normalize"));
    }
    let entropy: f64 = mass
        .iter()
        .map(|&w| w / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(SemanticEntropyScore {
        prompt_id: clustering.prompt_id.clone(),
        entropy: if entropy <= 0.0 { 0.0 } else { entropy },
        weighting_tag: weighting,
        response_count: m,
        cluster_count: clustering.cluster_count,
    })
}
