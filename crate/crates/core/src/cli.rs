//! The `consistency` command-line tool.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::consistency::{self, all_response_consistency, prompt_consistency};
use crate::ensemble::{self, fit_ols_subset, selection_campaign, sfs, EnsembleModel, FeatureMatrix};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_levels, krippendorff_alpha, krippendorff_alpha_untrimmed, AgreementSummary, AlphaLevel,
    ComparisonInputs, ComparisonReport, Level, ALL,
};
use crate::features::{self, FeatureRow, FeatureVector};
use crate::ingest::{load_ratings_csv, ColumnMap};
use crate::semantic_entropy::{cluster, semantic_entropy, SemanticEntropyScore, Weighting};
use crate::similarity::{
    build_matrix, human_matrix, lexical_scorer, MatrixStore, RatingIndex, BLEU_TAG, HUMAN_TAG, ROUGE_L_TAG,
};
use crate::trace::{
    load_corpus, load_entailment, load_ratings, write_matrix, EntailmentMatrix, PromptRecord, RatingSet,
};

pub const OUT_DIR_ENV: &str = "CONSISTENCY_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "consistency", version, about = "Score and evaluate the consistency of sampled LLM responses")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalOpts {
    /// Seed for fold shuffling and the selection campaign.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Number of cross-validation folds.
    #[arg(long, global = true, default_value_t = ensemble::DEFAULT_FOLDS)]
    folds: usize,
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "out")]
    out_dir: PathBuf,
    /// Metric tag(s) to compute or select; repeatable.
    #[arg(long, global = true)]
    metric: Vec<String>,
    /// Semantic-entropy cluster weighting for `entropy`; `evaluate` reports both.
    #[arg(long, global = true, default_value_t = Weighting::Uniform)]
    weighting: Weighting,
}

#[derive(Debug, Args)]
struct RatingArgs {
    /// Rating sets as JSON.
    #[arg(long, conflicts_with = "ratings_csv")]
    ratings: Option<PathBuf>,
    /// Rating rows as CSV, one rating per row.
    #[arg(long)]
    ratings_csv: Option<PathBuf>,
    /// JSON column mapping for --ratings-csv.
    #[arg(long, requires = "ratings_csv")]
    column_map: Option<PathBuf>,
}

impl RatingArgs {
    fn load(&self) -> Result<Option<Vec<RatingSet>>> {
        if let Some(path) = &self.ratings {
            return load_ratings(path).map(Some);
        }
        if let Some(path) = &self.ratings_csv {
            let map = match &self.column_map {
                Some(p) => ColumnMap::load(p)?,
                None => ColumnMap::default(),
            };
            return load_ratings_csv(path, &map).map(Some);
        }
        Ok(None)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a corpus and optional companion files against their schemas.
    Validate {
        corpus: PathBuf,
        #[command(flatten)]
        ratings: RatingArgs,
        /// Directory of similarity matrix files.
        #[arg(long)]
        matrices: Option<PathBuf>,
        /// Directory of entailment matrix files.
        #[arg(long)]
        entailment: Option<PathBuf>,
    },
    /// Build similarity matrices (bleu, rouge_l, human).
    Similarity {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        ratings: RatingArgs,
    },
    /// Response- and prompt-level consistency from similarity matrices.
    Consistency {
        /// Directory of similarity matrix files.
        #[arg(long)]
        matrices: PathBuf,
        /// Corpus supplying response ids; without it responses are numbered.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Semantic entropy from entailment matrices.
    Entropy {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        entailment: PathBuf,
    },
    /// Extract the 16 token-level uncertainty features.
    Features {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Fit the logit ensemble with forward feature selection.
    Train {
        #[arg(long)]
        features: PathBuf,
        /// CSV with prompt_id, response_id and value columns.
        #[arg(long)]
        targets: PathBuf,
        /// Number of features to select; defaults to the campaign's best size
        /// or, without a campaign, all features.
        #[arg(long)]
        size: Option<usize>,
        /// Selection-campaign repetitions per size; 0 skips the campaign.
        #[arg(long, default_value_t = 0)]
        repetitions: usize,
    },
    /// Compare every available metric with the human baseline.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        ratings: RatingArgs,
        /// Directory of externally scored similarity matrices.
        #[arg(long)]
        matrices: Option<PathBuf>,
        #[arg(long)]
        entailment: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Fitted ensemble; without it the ensemble is cross-validated.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Prompts listed per metric in the discrepancy table.
        #[arg(long, default_value_t = 5)]
        discrepancies: usize,
    },
    /// Render a saved evaluation as markdown tables.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

/// Run the tool with `argv` (including the program name) and return the
/// process exit code: 0 success, 1 input or usage error, 2 internal error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match std::panic::catch_unwind(|| execute(&cli)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                1
            } else {
                2
            }
        }
        Err(_) => 2,
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Validate { corpus, ratings, matrices, entailment } => {
            validate(corpus, ratings, matrices.as_deref(), entailment.as_deref())
        }
        Command::Similarity { corpus, ratings } => similarity(g, corpus, ratings),
        Command::Consistency { matrices, corpus } => consistency_cmd(g, matrices, corpus.as_deref()),
        Command::Entropy { corpus, entailment } => entropy(g, corpus, entailment),
        Command::Features { corpus } => features_cmd(g, corpus),
        Command::Train { features, targets, size, repetitions } => {
            train(g, features, targets, *size, *repetitions)
        }
        Command::Evaluate { corpus, ratings, matrices, entailment, features, model, discrepancies } => evaluate(
            g,
            corpus,
            ratings,
            matrices.as_deref(),
            entailment.as_deref(),
            features.as_deref(),
            model.as_deref(),
            *discrepancies,
        ),
        Command::Report { report } => {
            let report: ComparisonReport = crate::trace::read_json_file(report)?;
            write_text(&g.out_dir, "report.md", &render_markdown(&report))
        }
    }
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    create_out_dir(dir)?;
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    create_out_dir(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn file_stem(prompt_id: &str) -> String {
    prompt_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn load_entailment_dir(dir: &Path) -> Result<HashMap<String, EntailmentMatrix>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    let mut out = HashMap::new();
    for path in paths {
        let m = load_entailment(&path)?;
        let id = m.prompt_id().to_string();
        if out.insert(id.clone(), m).is_some() {
            return Err(Error::invariant(id, "entailment", "duplicate entailment matrix"));
        }
    }
    Ok(out)
}

fn validate(
    corpus_path: &Path,
    ratings: &RatingArgs,
    matrices: Option<&Path>,
    entailment: Option<&Path>,
) -> Result<()> {
    let corpus = load_corpus(corpus_path)?;
    let responses: usize = corpus.iter().map(PromptRecord::response_count).sum();
    println!("corpus: {} prompts, {} responses", corpus.len(), responses);
    let by_id: HashMap<&str, &PromptRecord> = corpus.iter().map(|r| (r.prompt_id.as_str(), r)).collect();

    if let Some(sets) = ratings.load()? {
        let index = RatingIndex::new(&sets)?;
        for set in &sets {
            let record = by_id.get(set.prompt_id.as_str()).ok_or_else(|| {
                Error::invariant(&set.prompt_id, "ratings", "prompt not in corpus")
            })?;
            for id in [&set.response_id_a, &set.response_id_b] {
                if record.response_index(id).is_none() {
                    return Err(Error::invariant(&set.prompt_id, "ratings", format!("unknown response {id}")));
                }
            }
        }
        for record in &corpus {
            human_matrix(record, &index)?;
        }
        println!("ratings: {} rating sets", sets.len());
    }
    if let Some(dir) = matrices {
        let mut store = MatrixStore::new();
        store.extend_from_dir(dir)?;
        for m in store.iter() {
            check_size(&by_id, m.prompt_id(), m.size(), m.metric_tag())?;
        }
        println!("matrices: {} files, metrics {:?}", store.len(), store.metrics());
    }
    if let Some(dir) = entailment {
        let all = load_entailment_dir(dir)?;
        for m in all.values() {
            check_size(&by_id, m.prompt_id(), m.size(), "entailment")?;
        }
        println!("entailment: {} files", all.len());
    }
    Ok(())
}

fn check_size(by_id: &HashMap<&str, &PromptRecord>, prompt_id: &str, size: usize, what: &str) -> Result<()> {
    let record = by_id
        .get(prompt_id)
        .ok_or_else(|| Error::invariant(prompt_id, what, "prompt not in corpus"))?;
    if record.response_count() != size {
        return Err(Error::invariant(
            prompt_id,
            what,
            format!("size {size} but {} responses", record.response_count()),
        ));
    }
    Ok(())
}

fn metrics_or(g: &GlobalOpts, default: &[&str]) -> Vec<String> {
    if g.metric.is_empty() {
        default.iter().map(|s| s.to_string()).collect()
    } else {
        g.metric.clone()
    }
}

fn similarity(g: &GlobalOpts, corpus_path: &Path, ratings: &RatingArgs) -> Result<()> {
    let corpus = load_corpus(corpus_path)?;
    let sets = ratings.load()?;
    let mut default = vec![BLEU_TAG, ROUGE_L_TAG];
    if sets.is_some() {
        default.push(HUMAN_TAG);
    }
    let metrics = metrics_or(g, &default);
    let index = sets.as_deref().map(RatingIndex::new).transpose()?;
    let dir = g.out_dir.join("matrices");
    create_out_dir(&dir)?;
    for metric in &metrics {
        for record in &corpus {
            let matrix = if metric == HUMAN_TAG {
                let index = index
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("the human metric needs --ratings or --ratings-csv".into()))?;
                human_matrix(record, index)?
            } else {
                let scorer = lexical_scorer(metric).ok_or_else(|| {
                    Error::InvalidInput(format!("metric {metric:?} is not computed natively; ingest it from files"))
                })?;
                build_matrix(record, scorer.as_ref())?
            };
            write_matrix(dir.join(format!("{}.{metric}.json", file_stem(&record.prompt_id))), &matrix)?;
        }
        info!("wrote {metric} matrices for {} prompts", corpus.len());
    }
    Ok(())
}

fn consistency_cmd(g: &GlobalOpts, matrices: &Path, corpus: Option<&Path>) -> Result<()> {
    let mut store = MatrixStore::new();
    store.extend_from_dir(matrices)?;
    let corpus = corpus.map(load_corpus).transpose()?;
    let ids: Option<HashMap<&str, Vec<&str>>> = corpus.as_ref().map(|c| {
        c.iter()
            .map(|r| (r.prompt_id.as_str(), r.traces.iter().map(|t| t.response_id.as_str()).collect()))
            .collect()
    });
    let (mut responses, mut prompts) = (Vec::new(), Vec::new());
    for m in store.iter() {
        if !g.metric.is_empty() && !g.metric.iter().any(|t| t == m.metric_tag()) {
            continue;
        }
        let numbered: Vec<String> = (0..m.size()).map(|i| i.to_string()).collect();
        let response_ids: Vec<&str> = match &ids {
            Some(ids) => {
                let v = ids
                    .get(m.prompt_id())
                    .ok_or_else(|| Error::invariant(m.prompt_id(), "matrix", "prompt not in corpus"))?;
                if v.len() != m.size() {
                    return Err(Error::invariant(
                        m.prompt_id(),
                        "matrix",
                        format!("size {} but {} responses", m.size(), v.len()),
                    ));
                }
                v.clone()
            }
            None => numbered.iter().map(String::as_str).collect(),
        };
        responses.extend(all_response_consistency(m, &response_ids)?);
        prompts.push(prompt_consistency(m)?);
    }
    consistency::write_csv(create(&g.out_dir, "consistency.csv")?, &responses, &prompts)
}

fn entropy_scores(
    corpus: &[PromptRecord],
    entailment: &HashMap<String, EntailmentMatrix>,
    weighting: Weighting,
) -> Result<Vec<SemanticEntropyScore>> {
    corpus
        .iter()
        .map(|record| {
            let e = entailment.get(&record.prompt_id).ok_or_else(|| Error::MissingMatrix {
                prompt_id: record.prompt_id.clone(),
                metric: "entailment".into(),
            })?;
            if e.size() != record.response_count() {
                return Err(Error::invariant(
                    &record.prompt_id,
                    "entailment",
                    format!("size {} but {} responses", e.size(), record.response_count()),
                ));
            }
            semantic_entropy(&cluster(e), Some(&record.traces), weighting)
        })
        .collect()
}

fn entropy(g: &GlobalOpts, corpus_path: &Path, entailment: &Path) -> Result<()> {
    let corpus = load_corpus(corpus_path)?;
    let scores = entropy_scores(&corpus, &load_entailment_dir(entailment)?, g.weighting)?;
    let internal = |e: csv::Error| Error::Internal(e.to_string());
    let mut w = csv::Writer::from_writer(create(&g.out_dir, "semantic_entropy.csv")?);
    w.write_record(["prompt_id", "weighting", "entropy", "consistency", "cluster_count", "response_count"])
        .map_err(internal)?;
    for s in &scores {
        w.write_record([
            s.prompt_id.clone(),
            s.weighting_tag.to_string(),
            s.entropy.to_string(),
            s.consistency().to_string(),
            s.cluster_count.to_string(),
            s.response_count.to_string(),
        ])
        .map_err(internal)?;
    }
    w.flush().map_err(|e| Error::Internal(e.to_string()))
}

fn features_cmd(g: &GlobalOpts, corpus_path: &Path) -> Result<()> {
    let corpus = load_corpus(corpus_path)?;
    let rows = features::corpus_features(&corpus)?;
    features::write_csv(create(&g.out_dir, "features.csv")?, &rows)
}

fn read_features(path: &Path) -> Result<Vec<FeatureRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    features::read_csv(file, &path.display().to_string())
}

/// Targets keyed by `(prompt_id, response_id)`. Rows with an empty
/// `response_id` are skipped, and when a `metric_tag` column is present only
/// rows of `metric` are kept, so a consistency CSV can be used directly.
pub fn read_targets(path: &Path, metric: &str) -> Result<HashMap<(String, String), f64>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.into(),
        line,
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| column(name).ok_or_else(|| parse_err(1, format!("missing column {name:?}")));
    let (pid, rid, val) = (need("prompt_id")?, need("response_id")?, need("value")?);
    let tag = column("metric_tag");
    let mut out = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record[rid].is_empty() || tag.is_some_and(|t| &record[t] != metric) {
            continue;
        }
        let value: f64 = record[val]
            .trim()
            .parse()
            .map_err(|e| parse_err(line, format!("value: {e}")))?;
        if !value.is_finite() {
            return Err(parse_err(line, "value must be finite".into()));
        }
        if out.insert((record[pid].to_string(), record[rid].to_string()), value).is_some() {
            return Err(parse_err(line, "duplicate target".into()));
        }
    }
    Ok(out)
}

fn train(g: &GlobalOpts, features_path: &Path, targets_path: &Path, size: Option<usize>, repetitions: usize) -> Result<()> {
    let rows = read_features(features_path)?;
    let metric = g.metric.first().map_or(HUMAN_TAG, String::as_str);
    let targets = read_targets(targets_path, metric)?;
    let mut vectors: Vec<FeatureVector> = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    for row in &rows {
        let t = targets
            .get(&(row.prompt_id.clone(), row.response_id.clone()))
            .ok_or_else(|| Error::invariant(&row.prompt_id, "targets", format!("no target for response {}", row.response_id)))?;
        vectors.push(row.features);
        y.push(*t);
    }
    let x = FeatureMatrix::from_features(&vectors)?;

    let campaign = if repetitions > 0 {
        let report = selection_campaign(&x, &y, repetitions, g.folds, g.seed)?;
        report.write_counts_csv(create(&g.out_dir, "selection_counts.csv")?)?;
        report.write_curve_csv(create(&g.out_dir, "selection_curve.csv")?)?;
        Some(report)
    } else {
        None
    };
    let size = match size {
        Some(s) => s,
        None => campaign
            .as_ref()
            .and_then(|r| r.best_size_by_spearman())
            .map_or(x.cols(), |s| s.size),
    };
    let selection = sfs(&x, &y, size, g.folds, g.seed)?;
    info!("selected {:?}, cv mse {}", selection.selected, selection.cv_mse);
    create_out_dir(&g.out_dir)?;
    crate::trace::write_json_file(&g.out_dir.join("sfs.json"), &selection)?;
    let model = fit_ols_subset(&x, &y, &selection.selected)?;
    model.save(g.out_dir.join("model.json"))
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    g: &GlobalOpts,
    corpus_path: &Path,
    ratings: &RatingArgs,
    matrices: Option<&Path>,
    entailment: Option<&Path>,
    features_path: Option<&Path>,
    model_path: Option<&Path>,
    discrepancy_count: usize,
) -> Result<()> {
    let corpus = load_corpus(corpus_path)?;
    let sets = ratings
        .load()?
        .ok_or_else(|| Error::InvalidInput("evaluate needs --ratings or --ratings-csv".into()))?;
    let index = RatingIndex::new(&sets)?;

    let mut store = MatrixStore::new();
    if let Some(dir) = matrices {
        store.extend_from_dir(dir)?;
    }
    let native = metrics_or(g, &[BLEU_TAG, ROUGE_L_TAG]);
    for record in &corpus {
        if store.get(&record.prompt_id, HUMAN_TAG).is_none() {
            store.insert(human_matrix(record, &index)?)?;
        }
        for metric in &native {
            if store.get(&record.prompt_id, metric).is_some() {
                continue;
            }
            if let Some(scorer) = lexical_scorer(metric) {
                store.insert(build_matrix(record, scorer.as_ref())?)?;
            }
        }
    }
    if !g.metric.is_empty() {
        let keep: Vec<&str> = g.metric.iter().map(String::as_str).chain([HUMAN_TAG]).collect();
        let mut filtered = MatrixStore::new();
        for m in store.iter().filter(|m| keep.contains(&m.metric_tag())) {
            filtered.insert(m.clone())?;
        }
        store = filtered;
    }

    let se = match entailment {
        Some(dir) => {
            let matrices = load_entailment_dir(dir)?;
            let mut scores = entropy_scores(&corpus, &matrices, Weighting::Uniform)?;
            scores.extend(entropy_scores(&corpus, &matrices, Weighting::SeqProb)?);
            Some(scores)
        }
        None => None,
    };
    let feature_rows = features_path.map(read_features).transpose()?;
    let model = model_path.map(EnsembleModel::load).transpose()?;

    let mut inputs = ComparisonInputs::new(&corpus, &store);
    inputs.semantic_entropy = se.as_deref();
    inputs.features = feature_rows.as_deref();
    inputs.model = model.as_ref();
    inputs.folds = g.folds;
    inputs.seed = g.seed;
    inputs.discrepancy_count = discrepancy_count;
    let mut report = compare_levels(&inputs)?;

    let rated: Vec<RatingSet> = sets
        .iter()
        .filter(|s| corpus.iter().any(|r| r.prompt_id == s.prompt_id))
        .cloned()
        .collect();
    for level in [AlphaLevel::Interval, AlphaLevel::Ordinal] {
        match (krippendorff_alpha(&rated, level), krippendorff_alpha_untrimmed(&rated, level)) {
            (Ok(trimmed), Ok(untrimmed)) => report.agreement.push(AgreementSummary {
                level,
                alpha_trimmed: trimmed,
                alpha_untrimmed: untrimmed,
                units: rated.len(),
            }),
            (Err(e), _) | (_, Err(e)) => log::warn!("krippendorff alpha ({level}) unavailable: {e}"),
        }
    }

    create_out_dir(&g.out_dir)?;
    crate::trace::write_json_file(&g.out_dir.join("report.json"), &report)?;
    report.write_rows_csv(create(&g.out_dir, "report.csv")?)?;
    report.write_points_csv(create(&g.out_dir, "points.csv")?)?;
    report.write_discrepancies_csv(create(&g.out_dir, "discrepancies.csv")?)?;
    write_text(&g.out_dir, "report.md", &render_markdown(&report))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |v| format!("{v:.3}"))
}

/// Markdown rendering: response-pair Spearman by dataset, response-to-set
/// Spearman and MSE, prompt level, agreement and discrepancies.
pub fn render_markdown(report: &ComparisonReport) -> String {
    let mut s = String::new();
    let datasets: Vec<String> = {
        let mut d: Vec<String> = report
            .rows
            .iter()
            .filter(|r| r.model == ALL && r.dataset != ALL)
            .map(|r| r.dataset.clone())
            .collect();
        d.sort();
        d.dedup();
        d
    };
    let _ = writeln!(s, "# Consistency evaluation\n");
    let _ = writeln!(s, "{} prompts, {} responses.", report.prompts, report.responses);
    if let Some(source) = &report.ensemble_source {
        let _ = writeln!(s, "Ensemble scores: {source}.");
    }
    for a in &report.agreement {
        let _ = writeln!(
            s,
            "Krippendorff alpha ({}): {:.3} trimmed, {:.3} untrimmed over {} rating sets.",
            a.level, a.alpha_trimmed, a.alpha_untrimmed, a.units
        );
    }

    for (level, title) in [
        (Level::ResponsePair, "Response-pair level"),
        (Level::ResponseToSet, "Response-to-set level"),
        (Level::Prompt, "Prompt level"),
    ] {
        let metrics: Vec<&String> = report
            .metrics
            .iter()
            .filter(|m| report.overall(level, m).is_some())
            .collect();
        if metrics.is_empty() {
            continue;
        }
        let _ = writeln!(s, "\n## {title}\n");
        let mut header = "| metric | n | spearman | mse |".to_string();
        let mut rule = "|---|---|---|---|".to_string();
        for d in &datasets {
            let _ = write!(header, " spearman ({d}) |");
            rule.push_str("---|");
        }
        let _ = writeln!(s, "{header}\n{rule}");
        for m in metrics {
            let row = report.overall(level, m).unwrap();
            let mut line = format!("| {m} | {} | {} | {} |", row.n, fmt_opt(row.spearman), fmt_opt(row.mse));
            for d in &datasets {
                let v = report.row(level, m, ALL, d).and_then(|r| r.spearman);
                let _ = write!(line, " {} |", fmt_opt(v));
            }
            let _ = writeln!(s, "{line}");
        }
    }

    if !report.discrepancies.is_empty() {
        let _ = writeln!(s, "\n## Largest prompt-level discrepancies\n");
        let _ = writeln!(s, "| metric | prompt | human | metric value | gap | prompt text |\n|---|---|---|---|---|---|");
        for d in &report.discrepancies {
            let text: String = d.prompt_text.replace(['\n', '|'], " ");
            let _ = writeln!(
                s,
                "| {} | {} | {:.3} | {:.3} | {:+.3} | {} |",
                d.metric, d.prompt_id, d.human, d.value, d.gap, text
            );
        }
    }
    s
}
