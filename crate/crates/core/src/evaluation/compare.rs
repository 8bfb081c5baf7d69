//! Side-by-side comparison of automated metrics with the human baseline at
//! the response-pair, response-to-set and prompt levels, sliced by model and
//! dataset.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{mse, spearman, AlphaLevel};
use crate::consistency::{prompt_consistency, response_consistency_value};
use crate::ensemble::{self, EnsembleModel, FeatureMatrix, ENSEMBLE_TAG};
use crate::error::{Error, Result};
use crate::features::{FeatureRow, FeatureVector, FEATURE_NAMES};
use crate::semantic_entropy::{SemanticEntropyScore, Weighting, SEMANTIC_ENTROPY_TAG};
use crate::similarity::{MatrixStore, HUMAN_TAG};
use crate::trace::{find_identical_pairs, PromptRecord};

pub const ALL: &str = "all";
pub const LOGIT_PREFIX: &str = "logit:";

/// Report metric name for semantic entropy under one weighting, e.g. `semantic_entropy:uniform`.
pub fn entropy_metric(weighting: Weighting) -> String {
    format!("{SEMANTIC_ENTROPY_TAG}:{weighting}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    ResponsePair,
    ResponseToSet,
    Prompt,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::ResponsePair, Level::ResponseToSet, Level::Prompt];

    pub fn as_str(&self) -> &'static str {
        match self {
            Level::ResponsePair => "response_pair",
            Level::ResponseToSet => "response_to_set",
            Level::Prompt => "prompt",
        }
    }
}

pub struct ComparisonInputs<'a> {
    pub corpus: &'a [PromptRecord],
    /// Must hold a human matrix per prompt plus every compared metric.
    pub matrices: &'a MatrixStore,
    /// One score per prompt and weighting; each weighting becomes its own metric.
    pub semantic_entropy: Option<&'a [SemanticEntropyScore]>,
    pub features: Option<&'a [FeatureRow]>,
    /// Scores the ensemble with this model; without one, ensemble scores are
    /// out-of-fold predictions of an all-feature fit.
    pub model: Option<&'a EnsembleModel>,
    pub folds: usize,
    pub seed: u64,
    pub discrepancy_count: usize,
}

impl<'a> ComparisonInputs<'a> {
    pub fn new(corpus: &'a [PromptRecord], matrices: &'a MatrixStore) -> Self {
        ComparisonInputs {
            corpus,
            matrices,
            semantic_entropy: None,
            features: None,
            model: None,
            folds: ensemble::DEFAULT_FOLDS,
            seed: 0,
            discrepancy_count: 5,
        }
    }
}

/// One compared item: a human value and a metric value for the same pair,
/// response or prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub level: Level,
    pub metric: String,
    pub model: String,
    pub dataset: String,
    pub prompt_id: String,
    /// Response id, `a|b` for pairs, empty at prompt level.
    pub item: String,
    pub human: f64,
    /// Value used for rank correlation.
    pub value: f64,
    /// Value used for squared error (clamped where the metric reports so).
    pub reported: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub level: Level,
    pub metric: String,
    pub model: String,
    pub dataset: String,
    pub n: usize,
    pub spearman: Option<f64>,
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub metric: String,
    pub prompt_id: String,
    pub prompt_text: String,
    pub model: String,
    pub dataset: String,
    pub human: f64,
    pub value: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub level: AlphaLevel,
    pub alpha_trimmed: f64,
    pub alpha_untrimmed: f64,
    pub units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub prompts: usize,
    pub responses: usize,
    pub metrics: Vec<String>,
    /// `model` or `cross_validated`, when an ensemble was scored.
    pub ensemble_source: Option<String>,
    #[serde(default)]
    pub agreement: Vec<AgreementSummary>,
    pub rows: Vec<ReportRow>,
    pub discrepancies: Vec<Discrepancy>,
    #[serde(skip)]
    pub points: Vec<Point>,
}

impl ComparisonReport {
    pub fn row(&self, level: Level, metric: &str, model: &str, dataset: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.level == level && r.metric == metric && r.model == model && r.dataset == dataset)
    }

    pub fn overall(&self, level: Level, metric: &str) -> Option<&ReportRow> {
        self.row(level, metric, ALL, ALL)
    }

    pub fn write_rows_csv<W: Write>(&self, out: W) -> Result<()> {
        let internal = |e: csv::Error| Error::Internal(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["level", "metric", "model", "dataset", "n", "spearman", "mse"])
            .map_err(internal)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            w.write_record([
                r.level.as_str().to_string(),
                r.metric.clone(),
                r.model.clone(),
                r.dataset.clone(),
                r.n.to_string(),
                opt(r.spearman),
                opt(r.mse),
            ])
            .map_err(internal)?;
        }
        w.flush().map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn write_discrepancies_csv<W: Write>(&self, out: W) -> Result<()> {
        let internal = |e: csv::Error| Error::Internal(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "prompt_id", "model", "dataset", "human", "value", "gap", "prompt_text"])
            .map_err(internal)?;
        for d in &self.discrepancies {
            w.write_record([
                d.metric.clone(),
                d.prompt_id.clone(),
                d.model.clone(),
                d.dataset.clone(),
                d.human.to_string(),
                d.value.to_string(),
                d.gap.to_string(),
                d.prompt_text.clone(),
            ])
            .map_err(internal)?;
        }
        w.flush().map_err(|e| Error::Internal(e.to_string()))
    }

    /// Long-format per-item table for plotting.
    pub fn write_points_csv<W: Write>(&self, out: W) -> Result<()> {
        let internal = |e: csv::Error| Error::Internal(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["level", "metric", "model", "dataset", "prompt_id", "item", "human", "value", "reported"])
            .map_err(internal)?;
        for p in &self.points {
            w.write_record([
                p.level.as_str().to_string(),
                p.metric.clone(),
                p.model.clone(),
                p.dataset.clone(),
                p.prompt_id.clone(),
                p.item.clone(),
                p.human.to_string(),
                p.value.to_string(),
                p.reported.to_string(),
            ])
            .map_err(internal)?;
        }
        w.flush().map_err(|e| Error::Internal(e.to_string()))
    }
}

struct Collector {
    points: Vec<Point>,
}

impl Collector {
    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, level: Level, metric: &str, record: &PromptRecord, item: String, human: f64, value: f64, reported: f64) {
        self.points.push(Point {
            level,
            metric: metric.to_string(),
            model: record.model_tag.clone(),
            dataset: record.dataset_tag.to_string(),
            prompt_id: record.prompt_id.clone(),
            item,
            human,
            value,
            reported,
        });
    }
}

/// Ensemble scores per response in corpus order, as `(raw, reported)`.
fn ensemble_scores(
    inputs: &ComparisonInputs<'_>,
    features: &[FeatureRow],
    human_targets: &[f64],
) -> Result<(Vec<(f64, f64)>, &'static str)> {
    let by_key: HashMap<(&str, &str), &FeatureVector> = features
        .iter()
        .map(|r| ((r.prompt_id.as_str(), r.response_id.as_str()), &r.features))
        .collect();
    let mut ordered = Vec::with_capacity(human_targets.len());
    for record in inputs.corpus {
        for trace in &record.traces {
            let f = by_key
                .get(&(record.prompt_id.as_str(), trace.response_id.as_str()))
                .ok_or_else(|| {
                    Error::invariant(
                        &record.prompt_id,
                        "features",
                        format!("no feature row for response {}", trace.response_id),
                    )
                })?;
            ordered.push(**f);
        }
    }
    match inputs.model {
        Some(model) => Ok((
            ordered
                .iter()
                .map(|f| {
                    let p = ensemble::predict(model, f);
                    (p.raw, p.reported)
                })
                .collect(),
            "model",
        )),
        None => {
            let x = FeatureMatrix::from_features(&ordered)?;
            let all: Vec<usize> = (0..x.cols()).collect();
            let raw = ensemble::cross_val_predict(&x, human_targets, &all, inputs.folds, inputs.seed)?;
            Ok((raw.into_iter().map(|v| (v, v.clamp(0.0, 1.0))).collect(), "cross_validated"))
        }
    }
}

/// Compare every available metric with the human baseline at all three levels.
pub fn compare_levels(inputs: &ComparisonInputs<'_>) -> Result<ComparisonReport> {
    let store = inputs.matrices;
    let similarity_metrics: Vec<String> = store.metrics().into_iter().filter(|m| m != HUMAN_TAG).collect();

    for record in inputs.corpus {
        for metric in std::iter::once(HUMAN_TAG).chain(similarity_metrics.iter().map(String::as_str)) {
            let m = store.require(&record.prompt_id, metric)?;
            if m.size() != record.response_count() {
                return Err(Error::invariant(
                    &record.prompt_id,
                    format!("{metric} matrix"),
                    format!("size {} but {} responses", m.size(), record.response_count()),
                ));
            }
        }
    }

    let mut se_by_weighting: BTreeMap<String, HashMap<&str, &SemanticEntropyScore>> = BTreeMap::new();
    for s in inputs.semantic_entropy.unwrap_or_default() {
        se_by_weighting
            .entry(entropy_metric(s.weighting_tag))
            .or_default()
            .insert(s.prompt_id.as_str(), s);
    }

    let mut human_targets = Vec::new();
    for record in inputs.corpus {
        let h = store.require(&record.prompt_id, HUMAN_TAG)?;
        for i in 0..record.response_count() {
            human_targets.push(response_consistency_value(h, i)?);
        }
    }

    let ensemble = match inputs.features {
        Some(features) => Some(ensemble_scores(inputs, features, &human_targets)?),
        None => None,
    };

    let mut metrics = similarity_metrics.clone();
    metrics.extend(se_by_weighting.keys().cloned());
    if ensemble.is_some() {
        metrics.push(ENSEMBLE_TAG.to_string());
    }
    let feature_by_key: Option<HashMap<(&str, &str), &FeatureVector>> = inputs.features.map(|rows| {
        rows.iter()
            .map(|r| ((r.prompt_id.as_str(), r.response_id.as_str()), &r.features))
            .collect()
    });
    if feature_by_key.is_some() {
        metrics.extend(FEATURE_NAMES.iter().map(|n| format!("{LOGIT_PREFIX}{n}")));
    }

    let mut out = Collector { points: Vec::new() };
    let mut response_offset = 0;
    for record in inputs.corpus {
        let m = record.response_count();
        let human = store.require(&record.prompt_id, HUMAN_TAG)?;
        let identical = find_identical_pairs(record);
        let ids: Vec<&str> = record.traces.iter().map(|t| t.response_id.as_str()).collect();

        for metric in &similarity_metrics {
            let sim = store.require(&record.prompt_id, metric)?;
            for (i, j, h) in human.pairs() {
                if identical.binary_search(&(i, j)).is_ok() {
                    continue;
                }
                let v = sim.get(i, j);
                out.push(Level::ResponsePair, metric, record, format!("{}|{}", ids[i], ids[j]), h, v, v);
            }
            for i in 0..m {
                let v = response_consistency_value(sim, i)?;
                let h = human_targets[response_offset + i];
                out.push(Level::ResponseToSet, metric, record, ids[i].to_string(), h, v, v);
            }
            let v = prompt_consistency(sim)?.value;
            out.push(Level::Prompt, metric, record, String::new(), prompt_consistency(human)?.value, v, v);
        }

        let human_prompt = prompt_consistency(human)?.value;
        for (metric, se) in &se_by_weighting {
            let score = se.get(record.prompt_id.as_str()).ok_or_else(|| Error::MissingMatrix {
                prompt_id: record.prompt_id.clone(),
                metric: metric.clone(),
            })?;
            let v = score.consistency();
            for i in 0..m {
                let h = human_targets[response_offset + i];
                out.push(Level::ResponseToSet, metric, record, ids[i].to_string(), h, v, v);
            }
            out.push(Level::Prompt, metric, record, String::new(), human_prompt, v, v);
        }

        if let Some((scores, _)) = &ensemble {
            let slice = &scores[response_offset..response_offset + m];
            for (i, &(raw, reported)) in slice.iter().enumerate() {
                let h = human_targets[response_offset + i];
                out.push(Level::ResponseToSet, ENSEMBLE_TAG, record, ids[i].to_string(), h, raw, reported);
            }
            let raw = slice.iter().map(|s| s.0).sum::<f64>() / m as f64;
            let reported = slice.iter().map(|s| s.1).sum::<f64>() / m as f64;
            out.push(Level::Prompt, ENSEMBLE_TAG, record, String::new(), human_prompt, raw, reported);
        }

        if let Some(by_key) = &feature_by_key {
            for (i, id) in ids.iter().enumerate() {
                let f = by_key.get(&(record.prompt_id.as_str(), *id)).ok_or_else(|| {
                    Error::invariant(&record.prompt_id, "features", format!("no feature row for response {id}"))
                })?;
                let h = human_targets[response_offset + i];
                for (k, name) in FEATURE_NAMES.iter().enumerate() {
                    let v = f.0[k];
                    out.push(Level::ResponseToSet, &format!("{LOGIT_PREFIX}{name}"), record, id.to_string(), h, v, v);
                }
            }
        }
        response_offset += m;
    }

    let rows = summarize(&out.points, &metrics);
    let discrepancies = discrepancies(inputs, &out.points, inputs.discrepancy_count);
    Ok(ComparisonReport {
        prompts: inputs.corpus.len(),
        responses: human_targets.len(),
        metrics,
        ensemble_source: ensemble.map(|(_, source)| source.to_string()),
        agreement: Vec::new(),
        rows,
        discrepancies,
        points: out.points,
    })
}

fn group_keys(points: &[&Point]) -> Vec<(String, String)> {
    let datasets: BTreeSet<&str> = points.iter().map(|p| p.dataset.as_str()).collect();
    let models: BTreeSet<&str> = points.iter().map(|p| p.model.as_str()).collect();
    let pairs: BTreeSet<(&str, &str)> = points.iter().map(|p| (p.model.as_str(), p.dataset.as_str())).collect();
    let mut keys = vec![(ALL.to_string(), ALL.to_string())];
    keys.extend(datasets.iter().map(|d| (ALL.to_string(), d.to_string())));
    keys.extend(models.iter().map(|m| (m.to_string(), ALL.to_string())));
    keys.extend(pairs.iter().map(|(m, d)| (m.to_string(), d.to_string())));
    keys
}

fn summarize(points: &[Point], metrics: &[String]) -> Vec<ReportRow> {
    let mut by_level_metric: BTreeMap<(Level, &str), Vec<&Point>> = BTreeMap::new();
    for p in points {
        by_level_metric.entry((p.level, p.metric.as_str())).or_default().push(p);
    }
    let mut rows = Vec::new();
    for level in Level::ALL {
        for metric in metrics {
            let Some(items) = by_level_metric.get(&(level, metric.as_str())) else {
                continue;
            };
            for (model, dataset) in group_keys(items) {
                let members: Vec<&&Point> = items
                    .iter()
                    .filter(|p| (model == ALL || p.model == model) && (dataset == ALL || p.dataset == dataset))
                    .collect();
                let human: Vec<f64> = members.iter().map(|p| p.human).collect();
                let value: Vec<f64> = members.iter().map(|p| p.value).collect();
                let reported: Vec<f64> = members.iter().map(|p| p.reported).collect();
                rows.push(ReportRow {
                    level,
                    metric: metric.clone(),
                    model,
                    dataset,
                    n: members.len(),
                    spearman: spearman(&human, &value).ok(),
                    mse: mse(&human, &reported).ok(),
                });
            }
        }
    }
    rows
}

/// Prompts with the largest `|human - metric|` prompt-level gap, per metric.
fn discrepancies(inputs: &ComparisonInputs<'_>, points: &[Point], count: usize) -> Vec<Discrepancy> {
    let texts: HashMap<&str, &str> = inputs
        .corpus
        .iter()
        .map(|r| (r.prompt_id.as_str(), r.prompt_text.as_str()))
        .collect();
    let mut by_metric: BTreeMap<&str, Vec<&Point>> = BTreeMap::new();
    for p in points.iter().filter(|p| p.level == Level::Prompt) {
        by_metric.entry(p.metric.as_str()).or_default().push(p);
    }
    let mut out = Vec::new();
    for (metric, mut items) in by_metric {
        items.sort_by(|a, b| {
            let (ga, gb) = ((a.human - a.reported).abs(), (b.human - b.reported).abs());
            gb.partial_cmp(&ga).unwrap().then_with(|| a.prompt_id.cmp(&b.prompt_id))
        });
        for p in items.into_iter().take(count) {
            out.push(Discrepancy {
                metric: metric.to_string(),
                prompt_id: p.prompt_id.clone(),
                prompt_text: texts.get(p.prompt_id.as_str()).unwrap_or(&"").to_string(),
                model: p.model.clone(),
                dataset: p.dataset.clone(),
                human: p.human,
                value: p.reported,
                gap: p.human - p.reported,
            });
        }
    }
    out
}
