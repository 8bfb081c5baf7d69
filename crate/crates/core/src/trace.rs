//! Data model for prompts, sampled responses and their per-token traces,
//! human rating sets, and per-prompt pairwise matrices, plus the on-disk
//! formats they are read from.
//!
//! Corpus files are line-delimited JSON with one prompt per line:
//!
//! ```text
//! {"prompt_id": "p1", "prompt_text": "...", "dataset_tag": "coqa", "model_tag": "llama",
//!  "traces": [{"response_id": "r0", "text": "...",
//!              "steps": [{"token": "Paris", "p": 0.91, "neg_log_p": 0.094, "entropy": 0.41,
//!                         "logits4": [21.3, 18.9, 17.2, 16.0]}]}]}
//! ```
//!
//! Ratings files are line-delimited JSON with `prompt_id`, `response_id_a`,
//! `response_id_b` and `ratings` (integers 0..=5). Matrix files are single
//! JSON objects with `prompt_id`, `metric_tag`, `size` and row-major `values`.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the stored `-ln p` agreeing with the stored `p`.
pub const NEG_LOG_P_TOLERANCE: f64 = 1e-9;

/// Highest value on the six-point similarity scale.
pub const MAX_RATING: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStep {
    #[serde(rename = "token")]
    pub token_text: String,
    #[serde(rename = "p")]
    pub p_chosen: f64,
    pub neg_log_p: f64,
    /// Full-vocabulary entropy at this step, in nats.
    pub entropy: f64,
    /// The four largest logits, non-increasing.
    #[serde(rename = "logits4")]
    pub top_logits: [f64; 4],
}

impl TokenStep {
    fn check(&self) -> std::result::Result<(), String> {
        if !(self.p_chosen.is_finite() && self.p_chosen > 0.0 && self.p_chosen <= 1.0) {
            return Err(format!("p = {} outside (0, 1]", self.p_chosen));
        }
        let expected = -self.p_chosen.ln();
        if !self.neg_log_p.is_finite() || (self.neg_log_p - expected).abs() > NEG_LOG_P_TOLERANCE
        {
            return Err(format!(
                "neg_log_p = {} does not match -ln(p) = {}",
                self.neg_log_p, expected
            ));
        }
        if !(self.entropy.is_finite() && self.entropy >= 0.0) {
            return Err(format!("entropy = {} must be finite and >= 0", self.entropy));
        }
        if self.top_logits.iter().any(|l| !l.is_finite()) {
            return Err("logits4 must be finite".into());
        }
        if self.top_logits.windows(2).any(|w| w[0] < w[1]) {
            return Err(format!("logits4 {:?} not sorted non-increasing", self.top_logits));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub response_id: String,
    pub text: String,
    pub steps: Vec<TokenStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Coqa,
    Lmsys,
    Other,
}

impl DatasetTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetTag::Coqa => "coqa",
            DatasetTag::Lmsys => "lmsys",
            DatasetTag::Other => "other",
        }
    }
}

impl std::fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub prompt_text: String,
    pub dataset_tag: DatasetTag,
    pub model_tag: String,
    pub traces: Vec<GenerationTrace>,
    /// Free-form extras, e.g. sampling parameters recorded by the generator.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl PromptRecord {
    pub fn response_count(&self) -> usize {
        self.traces.len()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.traces.iter().map(|t| t.text.as_str()).collect()
    }

    pub fn response_index(&self, response_id: &str) -> Option<usize> {
        self.traces.iter().position(|t| t.response_id == response_id)
    }

    pub fn validate(&self) -> Result<()> {
        let pid = &self.prompt_id;
        if pid.is_empty() {
            return Err(Error::invariant("<unnamed>", "prompt_id", "must be non-empty"));
        }
        if self.traces.len() < 2 {
            return Err(Error::invariant(
                pid,
                "traces",
                format!("need at least 2 responses, got {}", self.traces.len()),
            ));
        }
        let mut seen = HashSet::new();
        for (ti, trace) in self.traces.iter().enumerate() {
            if !seen.insert(trace.response_id.as_str()) {
                return Err(Error::invariant(
                    pid,
                    format!("traces[{ti}].response_id"),
                    format!("duplicate response id {:?}", trace.response_id),
                ));
            }
            if trace.text.is_empty() {
                return Err(Error::invariant(pid, format!("traces[{ti}].text"), "must be non-empty"));
            }
            if trace.steps.is_empty() {
                return Err(Error::invariant(pid, format!("traces[{ti}].steps"), "must be non-empty"));
            }
            for (si, step) in trace.steps.iter().enumerate() {
                step.check().map_err(|detail| {
                    Error::invariant(pid, format!("traces[{ti}].steps[{si}]"), detail)
                })?;
            }
        }
        Ok(())
    }
}

/// Raw Likert ratings (0..=5) given by participants to one response pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSet {
    pub prompt_id: String,
    pub response_id_a: String,
    pub response_id_b: String,
    pub ratings: Vec<u8>,
}

impl RatingSet {
    pub fn n(&self) -> usize {
        self.ratings.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.response_id_a == self.response_id_b {
            return Err(Error::invariant(
                &self.prompt_id,
                "response_id_b",
                format!("pair rates {:?} against itself", self.response_id_a),
            ));
        }
        if let Some(bad) = self.ratings.iter().find(|&&r| r > MAX_RATING) {
            return Err(Error::invariant(
                &self.prompt_id,
                "ratings",
                format!("rating {bad} outside 0..={MAX_RATING}"),
            ));
        }
        Ok(())
    }

    /// True when this set describes the unordered pair `{a, b}`.
    pub fn covers(&self, a: &str, b: &str) -> bool {
        (self.response_id_a == a && self.response_id_b == b)
            || (self.response_id_a == b && self.response_id_b == a)
    }
}

/// Symmetric `m x m` matrix of pairwise similarities in `[0, 1]` with unit
/// diagonal. Construction validates; values are immutable afterwards.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    prompt_id: String,
    metric_tag: String,
    size: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(
        prompt_id: impl Into<String>,
        metric_tag: impl Into<String>,
        size: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let prompt_id = prompt_id.into();
        if values.len() != size * size {
            return Err(Error::invariant(
                &prompt_id,
                "values",
                format!("expected {} entries for size {size}, got {}", size * size, values.len()),
            ));
        }
        for i in 0..size {
            if values[i * size + i] != 1.0 {
                return Err(Error::invariant(
                    &prompt_id,
                    format!("values[{i}][{i}]"),
                    format!("diagonal must be 1.0, got {}", values[i * size + i]),
                ));
            }
            for j in 0..size {
                let v = values[i * size + j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invariant(
                        &prompt_id,
                        format!("values[{i}][{j}]"),
                        format!("{v} outside [0, 1]"),
                    ));
                }
                if v != values[j * size + i] {
                    return Err(Error::invariant(
                        &prompt_id,
                        format!("values[{i}][{j}]"),
                        format!("not symmetric: {v} vs {}", values[j * size + i]),
                    ));
                }
            }
        }
        Ok(SimilarityMatrix {
            prompt_id,
            metric_tag: metric_tag.into(),
            size,
            values,
        })
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn metric_tag(&self) -> &str {
        &self.metric_tag
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Upper-triangle entries `(i, j, value)` with `i < j`, row-major.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.size)
            .flat_map(move |i| (i + 1..self.size).map(move |j| (i, j, self.get(i, j))))
    }

    pub fn with_metric_tag(mut self, tag: impl Into<String>) -> Self {
        self.metric_tag = tag.into();
        self
    }
}

/// Wire form of a matrix file; also used for clamping/symmetrizing external
/// matrices before they are validated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixFile {
    pub prompt_id: String,
    pub metric_tag: String,
    pub size: usize,
    pub values: Vec<f64>,
}

impl From<&SimilarityMatrix> for MatrixFile {
    fn from(m: &SimilarityMatrix) -> Self {
        MatrixFile {
            prompt_id: m.prompt_id.clone(),
            metric_tag: m.metric_tag.clone(),
            size: m.size,
            values: m.values.clone(),
        }
    }
}

/// Directional entailment between responses: `entails(i, j)` reads
/// "response i entails response j".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "EntailmentFile", into = "EntailmentFile")]
pub struct EntailmentMatrix {
    prompt_id: String,
    size: usize,
    values: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntailmentFile {
    prompt_id: String,
    size: usize,
    values: Vec<bool>,
}

impl TryFrom<EntailmentFile> for EntailmentMatrix {
    type Error = Error;

    fn try_from(f: EntailmentFile) -> Result<Self> {
        EntailmentMatrix::new(f.prompt_id, f.size, f.values)
    }
}

impl From<EntailmentMatrix> for EntailmentFile {
    fn from(m: EntailmentMatrix) -> Self {
        EntailmentFile {
            prompt_id: m.prompt_id,
            size: m.size,
            values: m.values,
        }
    }
}

impl EntailmentMatrix {
    pub fn new(prompt_id: impl Into<String>, size: usize, values: Vec<bool>) -> Result<Self> {
        let prompt_id = prompt_id.into();
        if values.len() != size * size {
            return Err(Error::invariant(
                &prompt_id,
                "values",
                format!("expected {} entries for size {size}, got {}", size * size, values.len()),
            ));
        }
        if let Some(i) = (0..size).find(|&i| !values[i * size + i]) {
            return Err(Error::invariant(
                &prompt_id,
                format!("values[{i}][{i}]"),
                "a response must entail itself",
            ));
        }
        Ok(EntailmentMatrix {
            prompt_id,
            size,
            values,
        })
    }

    pub fn from_fn(
        prompt_id: impl Into<String>,
        size: usize,
        f: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let values = (0..size * size)
            .map(|k| {
                let (i, j) = (k / size, k % size);
                i == j || f(i, j)
            })
            .collect();
        EntailmentMatrix {
            prompt_id: prompt_id.into(),
            size,
            values,
        }
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn entails(&self, i: usize, j: usize) -> bool {
        self.values[i * self.size + j]
    }
}

/// Unordered index pairs `(i, j)`, `i < j`, whose texts are byte-identical
/// after trimming surrounding whitespace.
pub fn find_identical_pairs(record: &PromptRecord) -> Vec<(usize, usize)> {
    let texts: Vec<&str> = record.traces.iter().map(|t| t.text.trim()).collect();
    let mut pairs = Vec::new();
    for i in 0..texts.len() {
        for j in i + 1..texts.len() {
            if texts[i] == texts[j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

fn read_json_lines<T, F>(path: &Path, mut check: F) -> Result<Vec<T>>
where
    T: serde::de::DeserializeOwned,
    F: FnMut(&T) -> Result<()>,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        check(&item)?;
        out.push(item);
    }
    Ok(out)
}

fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load and validate a trace corpus. Records come back in file order; blank
/// lines are skipped, and an empty file yields an empty corpus.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<PromptRecord>> {
    let mut ids = HashSet::new();
    read_json_lines(path.as_ref(), |rec: &PromptRecord| {
        rec.validate()?;
        if !ids.insert(rec.prompt_id.clone()) {
            return Err(Error::invariant(&rec.prompt_id, "prompt_id", "duplicate prompt id"));
        }
        Ok(())
    })
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[PromptRecord]) -> Result<()> {
    write_json_lines(path.as_ref(), corpus)
}

pub fn load_ratings(path: impl AsRef<Path>) -> Result<Vec<RatingSet>> {
    read_json_lines(path.as_ref(), RatingSet::validate)
}

pub fn write_ratings(path: impl AsRef<Path>, ratings: &[RatingSet]) -> Result<()> {
    write_json_lines(path.as_ref(), ratings)
}

pub fn read_matrix_file(path: impl AsRef<Path>) -> Result<MatrixFile> {
    read_json_file(path.as_ref())
}

/// Read a matrix file that must already satisfy every matrix invariant.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<SimilarityMatrix> {
    let f = read_matrix_file(path)?;
    SimilarityMatrix::new(f.prompt_id, f.metric_tag, f.size, f.values)
}

pub fn write_matrix(path: impl AsRef<Path>, matrix: &SimilarityMatrix) -> Result<()> {
    write_json_file(path.as_ref(), &MatrixFile::from(matrix))
}

pub fn load_entailment(path: impl AsRef<Path>) -> Result<EntailmentMatrix> {
    read_json_file(path.as_ref())
}

pub fn write_entailment(path: impl AsRef<Path>, matrix: &EntailmentMatrix) -> Result<()> {
    write_json_file(path.as_ref(), matrix)
}

pub(crate) fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub(crate) fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
