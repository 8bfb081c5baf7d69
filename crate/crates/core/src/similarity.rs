//! Pairwise response similarity: trimmed-mean aggregation of human ratings,
//! native lexical scorers (sentence BLEU, ROUGE-L), and ingestion of
//! externally computed matrices such as embedding-based scores.
//!
//! Lexical scorers lowercase and split on whitespace.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::trace::{find_identical_pairs, MatrixFile, PromptRecord, RatingSet, SimilarityMatrix};

pub const HUMAN_TAG: &str = "human";
pub const BLEU_TAG: &str = "bleu";
pub const ROUGE_L_TAG: &str = "rouge_l";

/// Minimum raters per pair in the original study protocol.
pub const PROTOCOL_MIN_RATERS: usize = 5;

/// Smoothing numerator substituted for n-gram orders with no matches.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const BLEU_MAX_ORDER: usize = 4;

/// Tolerance for asymmetry and range drift in external matrix files.
pub const EXTERNAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PairSimilarity {
    pub value: f64,
    pub metric_tag: String,
    pub n_raters: Option<usize>,
}

impl PairSimilarity {
    /// Whether the pair had at least [`PROTOCOL_MIN_RATERS`] raters.
    pub fn meets_rater_protocol(&self) -> bool {
        self.n_raters.is_some_and(|n| n >= PROTOCOL_MIN_RATERS)
    }
}

/// Drop exactly one highest and one lowest rating.
pub fn trim_extremes(ratings: &[u8]) -> Vec<u8> {
    if ratings.len() < 2 {
        return Vec::new();
    }
    let mut sorted = ratings.to_vec();
    sorted.sort_unstable();
    sorted[1..sorted.len() - 1].to_vec()
}

/// Trimmed mean of the ratings (one max and one min removed), mapped from the
/// 0..=5 scale onto `[0, 1]`.
pub fn aggregate_human(ratings: &RatingSet) -> Result<PairSimilarity> {
    let n = ratings.n();
    if n < 3 {
        return Err(Error::InsufficientRaters(n));
    }
    let max = *ratings.ratings.iter().max().unwrap() as u32;
    let min = *ratings.ratings.iter().min().unwrap() as u32;
    let total: u32 = ratings.ratings.iter().map(|&r| r as u32).sum();
    let kept = (total - max - min) as f64;
    let value = kept / (n - 2) as f64 / crate::trace::MAX_RATING as f64;
    Ok(PairSimilarity {
        value,
        metric_tag: HUMAN_TAG.into(),
        n_raters: Some(n),
    })
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Directional sentence BLEU of `hypothesis` against a single reference.
///
/// Orders run from 1 to `min(4, hypothesis length)` with uniform weights;
/// an order with no clipped matches contributes `BLEU_EPSILON / total`.
fn directional_bleu(hypothesis: &[String], reference: &[String]) -> f64 {
    let hyp_len = hypothesis.len();
    let ref_len = reference.len();
    let max_order = BLEU_MAX_ORDER.min(hyp_len);
    let mut log_sum = 0.0;
    for n in 1..=max_order {
        let hyp_counts = ngram_counts(hypothesis, n);
        let ref_counts = ngram_counts(reference, n);
        let matched: usize = hyp_counts
            .iter()
            .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let total = (hyp_len + 1 - n) as f64;
        let numerator = if matched == 0 { BLEU_EPSILON } else { matched as f64 };
        log_sum += (numerator / total).ln();
    }
    let geo_mean = (log_sum / max_order as f64).exp();
    let brevity = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    (brevity * geo_mean).clamp(0.0, 1.0)
}

/// Symmetrized sentence BLEU: the mean of both reference directions.
pub fn bleu(a: &str, b: &str) -> Result<f64> {
    let (ta, tb) = (tokenize(a), tokenize(b));
    if ta.is_empty() || tb.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(0.5 * (directional_bleu(&ta, &tb) + directional_bleu(&tb, &ta)))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with `P = LCS / |b|` and `R = LCS / |a|`.
pub fn rouge_l(a: &str, b: &str) -> Result<f64> {
    let (ta, tb) = (tokenize(a), tokenize(b));
    if ta.is_empty() || tb.is_empty() {
        return Err(Error::EmptyText);
    }
    let lcs = lcs_len(&ta, &tb) as f64;
    let precision = lcs / tb.len() as f64;
    let recall = lcs / ta.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// A similarity function over two response texts, total over the texts it
/// is asked about.
pub trait PairScorer: Sync {
    fn tag(&self) -> &str;
    fn score(&self, a: &str, b: &str) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Bleu;

impl PairScorer for Bleu {
    fn tag(&self) -> &str {
        BLEU_TAG
    }
    fn score(&self, a: &str, b: &str) -> Result<f64> {
        bleu(a, b)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RougeL;

impl PairScorer for RougeL {
    fn tag(&self) -> &str {
        ROUGE_L_TAG
    }
    fn score(&self, a: &str, b: &str) -> Result<f64> {
        rouge_l(a, b)
    }
}

/// Adapts a closure into a [`PairScorer`].
pub struct FnScorer<F> {
    tag: String,
    f: F,
}

impl<F> FnScorer<F>
where
    F: Fn(&str, &str) -> Result<f64> + Sync,
{
    pub fn new(tag: impl Into<String>, f: F) -> Self {
        FnScorer { tag: tag.into(), f }
    }
}

impl<F> PairScorer for FnScorer<F>
where
    F: Fn(&str, &str) -> Result<f64> + Sync,
{
    fn tag(&self) -> &str {
        &self.tag
    }
    fn score(&self, a: &str, b: &str) -> Result<f64> {
        (self.f)(a, b)
    }
}

pub fn lexical_scorer(tag: &str) -> Option<Box<dyn PairScorer>> {
    match tag {
        BLEU_TAG => Some(Box::new(Bleu)),
        ROUGE_L_TAG | "rouge" => Some(Box::new(RougeL)),
        _ => None,
    }
}

/// Score every unordered response pair of `record`. Byte-identical responses
/// (after trimming) get 1.0 without consulting the scorer.
pub fn build_matrix(record: &PromptRecord, scorer: &dyn PairScorer) -> Result<SimilarityMatrix> {
    let m = record.response_count();
    let identical = find_identical_pairs(record);
    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .filter(|p| identical.binary_search(p).is_err())
        .collect();
    let scored: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let wrap = |source: Error| Error::Scorer {
                prompt_id: record.prompt_id.clone(),
                i,
                j,
                source: Box::new(source),
            };
            let v = scorer
                .score(&record.traces[i].text, &record.traces[j].text)
                .map_err(wrap)?;
            if !(0.0..=1.0).contains(&v) {
                return Err(wrap(Error::InvalidInput(format!("score {v} outside [0, 1]"))));
            }
            Ok(v)
        })
        .collect();

    let mut values = vec![1.0; m * m];
    for (&(i, j), v) in pairs.iter().zip(scored) {
        let v = v?;
        values[i * m + j] = v;
        values[j * m + i] = v;
    }
    SimilarityMatrix::new(&record.prompt_id, scorer.tag(), m, values)
}

/// Index of rating sets by `(prompt_id, lo_response, hi_response)`.
pub struct RatingIndex<'a> {
    by_pair: HashMap<(&'a str, &'a str, &'a str), &'a RatingSet>,
}

impl<'a> RatingIndex<'a> {
    pub fn new(ratings: &'a [RatingSet]) -> Result<Self> {
        let mut by_pair = HashMap::new();
        for set in ratings {
            let (a, b) = (set.response_id_a.as_str(), set.response_id_b.as_str());
            let key = (set.prompt_id.as_str(), a.min(b), a.max(b));
            if by_pair.insert(key, set).is_some() {
                return Err(Error::invariant(
                    &set.prompt_id,
                    "ratings",
                    format!("pair ({a}, {b}) listed more than once"),
                ));
            }
        }
        Ok(RatingIndex { by_pair })
    }

    pub fn get(&self, prompt_id: &str, a: &str, b: &str) -> Option<&'a RatingSet> {
        self.by_pair.get(&(prompt_id, a.min(b), a.max(b))).copied()
    }
}

/// Human similarity matrix for one prompt: identical pairs are 1.0, every
/// other pair is the trimmed-mean aggregate of its ratings.
pub fn human_matrix(record: &PromptRecord, ratings: &RatingIndex<'_>) -> Result<SimilarityMatrix> {
    let m = record.response_count();
    let identical = find_identical_pairs(record);
    let mut values = vec![1.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            if identical.binary_search(&(i, j)).is_ok() {
                continue;
            }
            let (a, b) = (&record.traces[i].response_id, &record.traces[j].response_id);
            let set = ratings.get(&record.prompt_id, a, b).ok_or_else(|| {
                Error::invariant(&record.prompt_id, "ratings", format!("no ratings for pair ({a}, {b})"))
            })?;
            let v = aggregate_human(set)
                .map_err(|e| {
                    Error::invariant(&record.prompt_id, format!("ratings ({a}, {b})"), e.to_string())
                })?
                .value;
            values[i * m + j] = v;
            values[j * m + i] = v;
        }
    }
    SimilarityMatrix::new(&record.prompt_id, HUMAN_TAG, m, values)
}

/// Validate an externally produced matrix. Entries up to
/// [`EXTERNAL_TOLERANCE`] outside `[0, 1]` (or off a unit diagonal) are
/// clamped, and mirrored entries that differ by at most the same tolerance are
/// averaged. Returns the matrix and the number of clamped entries.
pub fn normalize_external(file: MatrixFile) -> Result<(SimilarityMatrix, usize)> {
    let MatrixFile {
        prompt_id,
        metric_tag,
        size,
        mut values,
    } = file;
    if values.len() != size * size {
        return Err(Error::invariant(
            &prompt_id,
            "values",
            format!("expected {} entries for size {size}, got {}", size * size, values.len()),
        ));
    }
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::invariant(&prompt_id, format!("values[{}][{}]", k / size, k % size), "not finite"));
    }
    let mut clamped = 0;
    for i in 0..size {
        let d = &mut values[i * size + i];
        if (*d - 1.0).abs() > EXTERNAL_TOLERANCE {
            return Err(Error::invariant(&prompt_id, format!("values[{i}][{i}]"), format!("diagonal {d} is not 1")));
        }
        if *d != 1.0 {
            *d = 1.0;
            clamped += 1;
        }
        for j in i + 1..size {
            let (u, l) = (values[i * size + j], values[j * size + i]);
            if (u - l).abs() > EXTERNAL_TOLERANCE {
                return Err(Error::invariant(
                    &prompt_id,
                    format!("values[{i}][{j}]"),
                    format!("asymmetric: {u} vs {l}"),
                ));
            }
            let mut v = 0.5 * (u + l);
            if !(0.0..=1.0).contains(&v) {
                if !(-EXTERNAL_TOLERANCE..=1.0 + EXTERNAL_TOLERANCE).contains(&v) {
                    return Err(Error::invariant(
                        &prompt_id,
                        format!("values[{i}][{j}]"),
                        format!("{v} outside [0, 1]"),
                    ));
                }
                v = v.clamp(0.0, 1.0);
                clamped += 1;
            }
            values[i * size + j] = v;
            values[j * size + i] = v;
        }
    }
    let matrix = SimilarityMatrix::new(prompt_id, metric_tag, size, values)?;
    Ok((matrix, clamped))
}

pub fn ingest_external_matrix(path: impl AsRef<Path>) -> Result<SimilarityMatrix> {
    let path = path.as_ref();
    let (matrix, clamped) = normalize_external(crate::trace::read_matrix_file(path)?)?;
    if clamped > 0 {
        log::warn!(
            "{}: clamped {clamped} entries of {} matrix for prompt {} into [0, 1]",
            path.display(),
            matrix.metric_tag(),
            matrix.prompt_id()
        );
    }
    Ok(matrix)
}

/// Similarity matrices keyed by `(prompt_id, metric_tag)`.
#[derive(Debug, Clone, Default)]
pub struct MatrixStore {
    by_key: BTreeMap<(String, String), SimilarityMatrix>,
}

impl MatrixStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, matrix: SimilarityMatrix) -> Result<()> {
        let key = (matrix.prompt_id().to_string(), matrix.metric_tag().to_string());
        if self.by_key.contains_key(&key) {
            return Err(Error::invariant(
                &key.0,
                "matrix",
                format!("duplicate {} matrix", key.1),
            ));
        }
        self.by_key.insert(key, matrix);
        Ok(())
    }

    pub fn get(&self, prompt_id: &str, metric: &str) -> Option<&SimilarityMatrix> {
        self.by_key.get(&(prompt_id.to_string(), metric.to_string()))
    }

    pub fn require(&self, prompt_id: &str, metric: &str) -> Result<&SimilarityMatrix> {
        self.get(prompt_id, metric).ok_or_else(|| Error::MissingMatrix {
            prompt_id: prompt_id.to_string(),
            metric: metric.to_string(),
        })
    }

    pub fn metrics(&self) -> BTreeSet<String> {
        self.by_key.keys().map(|(_, m)| m.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SimilarityMatrix> {
        self.by_key.values()
    }

    /// Ingest every `*.json` file in `dir` (sorted by name) as an external
    /// matrix.
    pub fn extend_from_dir(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        paths.sort();
        for path in paths {
            self.insert(ingest_external_matrix(&path)?)?;
        }
        Ok(())
    }
}
