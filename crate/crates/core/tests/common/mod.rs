//! Seeded data generators and brute-force reference implementations shared
//! by the integration and acceptance tests.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use consistency_core::trace::{
    DatasetTag, GenerationTrace, PromptRecord, RatingSet, SimilarityMatrix, TokenStep,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

const VOCAB: &[&str] = &[
    "the", "dog", "ran", "to", "park", "a", "cat", "sat", "on", "mat", "they", "went", "home", "beach",
    "is", "was", "found", "by", "neighbour", "quickly",
];

pub fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

pub fn random_step(rng: &mut ChaCha8Rng) -> TokenStep {
    let mut logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..15.0)).collect();
    logits.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if rng.gen_bool(0.1) {
        // l1 = l3 + l4 exercises the guarded denominator
        let l3 = rng.gen_range(0.0..2.0);
        let l4 = rng.gen_range(0.0..=l3);
        let l1 = l3 + l4;
        logits = vec![l1, rng.gen_range(l3..=l1), l3, l4];
    }
    let p: f64 = if rng.gen_bool(0.05) { 1.0 } else { rng.gen_range(1e-4..1.0) };
    TokenStep {
        token_text: VOCAB.choose(rng).unwrap().to_string(),
        p_chosen: p,
        neg_log_p: -p.ln(),
        entropy: rng.gen_range(0.0..6.0),
        top_logits: [logits[0], logits[1], logits[2], logits[3]],
    }
}

pub fn random_trace(rng: &mut ChaCha8Rng, response_id: &str, max_tokens: usize) -> GenerationTrace {
    let len = rng.gen_range(1..=max_tokens);
    let steps: Vec<TokenStep> = (0..len).map(|_| random_step(rng)).collect();
    let text = steps.iter().map(|s| s.token_text.as_str()).collect::<Vec<_>>().join(" ");
    GenerationTrace {
        response_id: response_id.to_string(),
        text,
        steps,
    }
}

pub fn random_record(rng: &mut ChaCha8Rng, prompt_id: &str, m: usize, max_tokens: usize) -> PromptRecord {
    let mut traces: Vec<GenerationTrace> =
        (0..m).map(|k| random_trace(rng, &format!("r{k}"), max_tokens)).collect();
    if m > 2 && rng.gen_bool(0.3) {
        traces[1].text = traces[0].text.clone();
    }
    PromptRecord {
        prompt_id: prompt_id.to_string(),
        prompt_text: format!("question {prompt_id}"),
        dataset_tag: if rng.gen_bool(0.5) { DatasetTag::Coqa } else { DatasetTag::Lmsys },
        model_tag: ["llama", "mistral"].choose(rng).unwrap().to_string(),
        traces,
        metadata: Default::default(),
    }
}

pub fn random_ratings(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..=5)).collect()
}

/// Rating sets for every pair of `record`, correlated with `base(i, j)` on
/// the 0..=5 scale.
pub fn ratings_for(
    rng: &mut ChaCha8Rng,
    record: &PromptRecord,
    raters: usize,
    base: impl Fn(usize, usize) -> f64,
) -> Vec<RatingSet> {
    let m = record.response_count();
    let mut out = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            let ratings = (0..raters)
                .map(|_| (base(i, j) + rng.gen_range(-1.2..1.2)).round().clamp(0.0, 5.0) as u8)
                .collect();
            out.push(RatingSet {
                prompt_id: record.prompt_id.clone(),
                response_id_a: record.traces[i].response_id.clone(),
                response_id_b: record.traces[j].response_id.clone(),
                ratings,
            });
        }
    }
    out
}

pub fn random_matrix_values(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let mut v = vec![1.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let s = rng.gen_range(0.0..=1.0);
            v[i * m + j] = s;
            v[j * m + i] = s;
        }
    }
    v
}

pub fn random_matrix(rng: &mut ChaCha8Rng, prompt_id: &str, tag: &str, m: usize) -> SimilarityMatrix {
    SimilarityMatrix::new(prompt_id, tag, m, random_matrix_values(rng, m)).unwrap()
}

/// A corpus with ratings: `prompts` prompts of `m` responses each.
pub fn synthetic_study(seed: u64, prompts: usize, m: usize, max_tokens: usize) -> (Vec<PromptRecord>, Vec<RatingSet>) {
    let mut rng = rng(seed);
    let mut corpus = Vec::new();
    let mut ratings = Vec::new();
    for p in 0..prompts {
        let record = random_record(&mut rng, &format!("p{p:03}"), m, max_tokens);
        let levels: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..5.0)).collect();
        ratings.extend(ratings_for(&mut rng, &record, 5, |i, j| (levels[i] + levels[j]) / 2.0));
        corpus.push(record);
    }
    (corpus, ratings)
}

// ---------------------------------------------------------------------------
// command-line helpers

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_consistency"));
    c.env_remove("CONSISTENCY_OUT_DIR");
    c
}

pub fn run(args: &[&str]) -> i32 {
    bin().args(args).output().unwrap().status.code().unwrap()
}

pub fn fx(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Every subcommand over the fixtures, writing into `out`.
pub fn pipeline(out: &Path, seed: &str) {
    let o = out.display().to_string();
    let m = out.join("matrices").display().to_string();
    let f = out.join("features.csv").display().to_string();
    let c = out.join("consistency.csv").display().to_string();
    let model = out.join("model.json").display().to_string();
    let report = out.join("report.json").display().to_string();
    let (corpus, ratings) = (fx("corpus.jsonl"), fx("ratings.jsonl"));
    let (matrices, entailment) = (fx("matrices"), fx("entailment"));
    let steps: Vec<Vec<&str>> = vec![
        vec!["validate", &corpus, "--ratings", &ratings],
        vec!["similarity", "--corpus", &corpus, "--ratings", &ratings],
        vec!["consistency", "--matrices", &m, "--corpus", &corpus],
        vec!["entropy", "--corpus", &corpus, "--entailment", &entailment, "--weighting", "seq_prob"],
        vec!["features", "--corpus", &corpus],
        vec!["train", "--features", &f, "--targets", &c, "--folds", "4", "--repetitions", "3"],
        vec![
            "evaluate", "--corpus", &corpus, "--ratings", &ratings, "--matrices",
            &matrices, "--entailment", &entailment, "--features", &f, "--folds", "4",
        ],
        vec!["evaluate", "--corpus", &corpus, "--ratings", &ratings, "--features", &f, "--model", &model, "--out-dir"],
        vec!["report", "--report", &report],
    ];
    for (k, step) in steps.iter().enumerate() {
        let mut args: Vec<String> = step.iter().map(|s| s.to_string()).collect();
        if args.last().map(String::as_str) == Some("--out-dir") {
            args.push(out.join("with_model").display().to_string());
        } else {
            args.extend(["--out-dir".to_string(), o.clone()]);
        }
        args.extend(["--seed".to_string(), seed.to_string()]);
        let output = bin().args(&args).output().unwrap();
        assert_eq!(output.status.code(), Some(0), "step {k} {args:?}: {}", String::from_utf8_lossy(&output.stderr));
    }
}

// ---------------------------------------------------------------------------
// reference implementations

pub fn oracle_trimmed_mean(ratings: &[u8]) -> f64 {
    let mut v: Vec<f64> = ratings.iter().map(|&r| r as f64).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let inner = &v[1..v.len() - 1];
    let mut s = 0.0;
    for x in inner {
        s += x;
    }
    s / inner.len() as f64 / 5.0
}

pub fn oracle_response_consistency(values: &[f64], m: usize, i: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..m {
        if j != i {
            s += values[j * m + i];
        }
    }
    s / (m - 1) as f64
}

pub fn oracle_prompt_consistency(values: &[f64], m: usize) -> f64 {
    let mut s = 0.0;
    let mut count = 0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                s += values[i * m + j];
                count += 1;
            }
        }
    }
    s / count as f64
}

pub fn oracle_dlr(l: [f64; 4]) -> f64 {
    let num = l[0] - l[1];
    let den = 0.5 * l[0] - 0.5 * (l[2] + l[3]);
    let den = if den.abs() >= 1e-9 {
        den
    } else if den < 0.0 {
        -1e-9
    } else {
        1e-9
    };
    num / den
}

/// Features in the fixed metric-major order, one metric column at a time.
pub fn oracle_features(trace: &GenerationTrace) -> [f64; 16] {
    let columns: [Vec<f64>; 4] = [
        trace.steps.iter().map(|s| s.p_chosen).collect(),
        trace.steps.iter().map(|s| -(s.p_chosen.ln())).collect(),
        trace.steps.iter().map(|s| s.entropy).collect(),
        trace.steps.iter().map(|s| oracle_dlr(s.top_logits)).collect(),
    ];
    let mut out = [0.0; 16];
    for (k, col) in columns.iter().enumerate() {
        let mut sum = 0.0;
        for v in col {
            sum += v;
        }
        let mut min = col[0];
        let mut max = col[0];
        for &v in col {
            if v < min {
                min = v;
            }
            if v > max {
                max = v;
            }
        }
        out[4 * k] = sum / col.len() as f64;
        out[4 * k + 1] = min;
        out[4 * k + 2] = max;
        out[4 * k + 3] = sum;
    }
    out
}

/// Average ranks by counting: rank = 1 + #smaller + (#equal - 1) / 2.
pub fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let smaller = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    oracle_pearson(&oracle_ranks(x), &oracle_ranks(y))
}

/// Interval alpha from the pairwise-difference definition.
pub fn oracle_interval_alpha(units: &[Vec<f64>]) -> f64 {
    let units: Vec<&Vec<f64>> = units.iter().filter(|u| u.len() >= 2).collect();
    let all: Vec<f64> = units.iter().flat_map(|u| u.iter().copied()).collect();
    let n = all.len() as f64;
    let mut within = 0.0;
    for u in &units {
        let mut s = 0.0;
        for (a, x) in u.iter().enumerate() {
            for (b, y) in u.iter().enumerate() {
                if a != b {
                    s += (x - y).powi(2);
                }
            }
        }
        within += s / (u.len() as f64 - 1.0);
    }
    let mut between = 0.0;
    for (a, x) in all.iter().enumerate() {
        for (b, y) in all.iter().enumerate() {
            if a != b {
                between += (x - y).powi(2);
            }
        }
    }
    1.0 - (within / n) / (between / (n * (n - 1.0)))
}

fn grams(tokens: &[String], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|s| tokens[s..s + n].join("\u{1}")).collect()
}

fn oracle_directional_bleu(h: &[String], r: &[String]) -> f64 {
    let orders = h.len().min(4);
    let mut log_p = 0.0;
    for n in 1..=orders {
        let hg = grams(h, n);
        let rg = grams(r, n);
        let mut available: HashMap<&String, i64> = HashMap::new();
        for g in &rg {
            *available.entry(g).or_default() += 1;
        }
        let mut hits = 0;
        for g in &hg {
            if let Some(c) = available.get_mut(g) {
                if *c > 0 {
                    *c -= 1;
                    hits += 1;
                }
            }
        }
        let p = if hits == 0 { 1e-9 / hg.len() as f64 } else { hits as f64 / hg.len() as f64 };
        log_p += p.ln() / orders as f64;
    }
    let bp = if h.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / h.len() as f64).exp() };
    (bp * log_p.exp()).min(1.0)
}

pub fn oracle_bleu(a: &str, b: &str) -> f64 {
    let ta: Vec<String> = a.split_whitespace().map(|t| t.to_lowercase()).collect();
    let tb: Vec<String> = b.split_whitespace().map(|t| t.to_lowercase()).collect();
    (oracle_directional_bleu(&ta, &tb) + oracle_directional_bleu(&tb, &ta)) / 2.0
}

fn lcs_recursive(a: &[String], b: &[String], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let key = (a.len(), b.len());
    if let Some(&v) = memo.get(&key) {
        return v;
    }
    let v = if a[0] == b[0] {
        1 + lcs_recursive(&a[1..], &b[1..], memo)
    } else {
        lcs_recursive(&a[1..], b, memo).max(lcs_recursive(a, &b[1..], memo))
    };
    memo.insert(key, v);
    v
}

pub fn oracle_rouge_l(a: &str, b: &str) -> f64 {
    let ta: Vec<String> = a.split_whitespace().map(|t| t.to_lowercase()).collect();
    let tb: Vec<String> = b.split_whitespace().map(|t| t.to_lowercase()).collect();
    let l = lcs_recursive(&ta, &tb, &mut HashMap::new()) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, r) = (l / tb.len() as f64, l / ta.len() as f64);
    2.0 * p * r / (p + r)
}

/// Least squares with an intercept column via the normal equations and
/// Gauss-Jordan elimination with partial pivoting. Returns `[b0, b1, ...]`
/// on the raw (unstandardized) columns.
pub fn oracle_ols(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let k = rows[0].len() + 1;
    let mut a = vec![vec![0.0; k + 1]; k];
    for (row, &t) in rows.iter().zip(y) {
        let x: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
        for r in 0..k {
            for c in 0..k {
                a[r][c] += x[r] * x[c];
            }
            a[r][k] += x[r] * t;
        }
    }
    for col in 0..k {
        let pivot = (col..k).max_by(|&p, &q| a[p][col].abs().partial_cmp(&a[q][col].abs()).unwrap()).unwrap();
        a.swap(col, pivot);
        let d = a[col][col];
        for c in col..=k {
            a[col][c] /= d;
        }
        for r in 0..k {
            if r != col {
                let f = a[r][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    a.iter().map(|r| r[k]).collect()
}
