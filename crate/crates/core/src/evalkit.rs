//! Deficiency-detection baselines and their precision/recall/F1 scoring.
//!
//! All metrics are at query granularity: a query is one unit no matter how
//! many of its knowledge pairs fired. The golden-label run defines the truth
//! set every other method is scored against.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Query;
use crate::diagnose::Deficiency;
use crate::parallel::bounded_map;
use crate::scorer::{OptionScores, ScoreRequest, Scorer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("query {0} has no gold label")]
    MissingLabel(String),
    #[error("scores for {0} do not match its options")]
    ScoreShape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GoldenLabel,
    Perplexity,
    Random,
    RelativeEntropy,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::GoldenLabel,
        Method::Perplexity,
        Method::Random,
        Method::RelativeEntropy,
    ];

    pub fn label_free(self) -> bool {
        matches!(self, Method::Random | Method::RelativeEntropy)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::GoldenLabel => "Golden Label",
            Method::Perplexity => "Perplexity",
            Method::Random => "Random",
            Method::RelativeEntropy => "Relative Entropy",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_normalized: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionNotes {
    /// Queries whose best option was tied (perplexity).
    pub ties: usize,
    /// Generations without a parseable option letter (golden label).
    pub unparseable: usize,
    /// Queries left out of the run, with reasons.
    pub skipped: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRun {
    pub method: Method,
    pub evaluated: BTreeSet<String>,
    pub flagged: BTreeSet<String>,
    pub params: DetectionParams,
    pub notes: DetectionNotes,
}

impl DetectionRun {
    fn new(method: Method, params: DetectionParams) -> Self {
        DetectionRun {
            method,
            evaluated: BTreeSet::new(),
            flagged: BTreeSet::new(),
            params,
            notes: DetectionNotes::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnparseablePolicy {
    #[default]
    FlagAsWrong,
    Skip,
}

/// First `(X)` with an uppercase letter, as an option index.
pub fn parse_answer_letter(text: &str) -> Option<usize> {
    text.as_bytes()
        .windows(3)
        .find(|w| w[0] == b'(' && w[1].is_ascii_uppercase() && w[2] == b')')
        .map(|w| (w[1] - b'A') as usize)
}

fn require_labels(queries: &[Query]) -> Result<(), EvalError> {
    match queries.iter().find(|q| q.gold_label.is_none()) {
        Some(q) => Err(EvalError::MissingLabel(q.query_id.clone())),
        None => Ok(()),
    }
}

/// Asks the model to answer every query and flags wrong answers. Backend
/// failures leave the query out of the run.
pub fn golden_label_detect(
    queries: &[Query],
    scorer: &Scorer,
    template_id: &str,
    policy: UnparseablePolicy,
) -> Result<DetectionRun, EvalError> {
    require_labels(queries)?;
    let answers = bounded_map(queries, scorer.max_in_flight, |q| {
        scorer.generate(&ScoreRequest::prior(q, template_id))
    });
    let mut run = DetectionRun::new(Method::GoldenLabel, DetectionParams::default());
    for (q, answer) in queries.iter().zip(answers) {
        let text = match answer {
            Ok(g) => g.text,
            Err(e) => {
                run.notes.skipped.push((q.query_id.clone(), e.to_string()));
                continue;
            }
        };
        let wrong = match parse_answer_letter(&text) {
            Some(idx) => Some(idx) != q.gold_label,
            None => {
                run.notes.unparseable += 1;
                match policy {
                    UnparseablePolicy::FlagAsWrong => true,
                    UnparseablePolicy::Skip => {
                        run.notes.skipped.push((q.query_id.clone(), "unparseable answer".into()));
                        continue;
                    }
                }
            }
        };
        run.evaluated.insert(q.query_id.clone());
        if wrong {
            run.flagged.insert(q.query_id.clone());
        }
    }
    Ok(run)
}

/// Predicts the option with the lowest (per-token by default) NLL from
/// stored prior scores and flags mismatches with gold. Ties go to the lowest
/// index.
pub fn perplexity_detect(
    queries: &[Query],
    priors: &[OptionScores],
    length_normalize: bool,
) -> Result<DetectionRun, EvalError> {
    require_labels(queries)?;
    let by_id: BTreeMap<&str, &OptionScores> = priors
        .iter()
        .filter(|s| s.knowledge_id.is_none())
        .map(|s| (s.query_id.as_str(), s))
        .collect();
    let mut run = DetectionRun::new(
        Method::Perplexity,
        DetectionParams {
            length_normalized: Some(length_normalize),
            ..Default::default()
        },
    );
    for q in queries {
        let Some(scores) = by_id.get(q.query_id.as_str()) else {
            run.notes.skipped.push((q.query_id.clone(), "no prior scores".into()));
            continue;
        };
        if scores.nll.len() != q.options.len() {
            return Err(EvalError::ScoreShape(q.query_id.clone()));
        }
        let values = if length_normalize {
            scores.per_token()
        } else {
            scores.nll.clone()
        };
        let mut best = 0;
        for (i, v) in values.iter().enumerate().skip(1) {
            if *v < values[best] {
                best = i;
            }
        }
        if values.iter().filter(|v| **v == values[best]).count() > 1 {
            run.notes.ties += 1;
        }
        run.evaluated.insert(q.query_id.clone());
        if Some(best) != q.gold_label {
            run.flagged.insert(q.query_id.clone());
        }
    }
    Ok(run)
}

/// Uniform sample of `size` ids without replacement. Ids are sorted first so
/// the result depends only on the id set and the seed.
pub fn random_detect(query_ids: &[String], size: usize, seed: u64) -> DetectionRun {
    let ids: Vec<&String> = query_ids.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let amount = if size > ids.len() {
        log::warn!("random sample size {size} exceeds {} queries; clamping", ids.len());
        ids.len()
    } else {
        size
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = DetectionRun::new(
        Method::Random,
        DetectionParams {
            seed: Some(seed),
            sample_size: Some(amount),
            ..Default::default()
        },
    );
    run.evaluated = ids.iter().map(|s| s.to_string()).collect();
    run.flagged = sample(&mut rng, ids.len(), amount)
        .into_iter()
        .map(|i| ids[i].clone())
        .collect();
    run
}

/// Flags every evaluated query with at least one deficiency at or above
/// `tau`. Gold labels are never consulted.
pub fn re_detect(query_ids: &[String], deficiencies: &[Deficiency], tau: f64) -> DetectionRun {
    let mut run = DetectionRun::new(
        Method::RelativeEntropy,
        DetectionParams {
            tau: Some(tau),
            ..Default::default()
        },
    );
    run.evaluated = query_ids.iter().cloned().collect();
    run.flagged = deficiencies
        .iter()
        .filter(|d| d.re >= tau && run.evaluated.contains(&d.query_id))
        .map(|d| d.query_id.clone())
        .collect();
    run
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Percent metrics rounded to two decimals. F1 is computed from the
/// unrounded precision and recall.
pub fn score_detection(flagged: &BTreeSet<String>, truth: &BTreeSet<String>) -> DetectionMetrics {
    let tp = flagged.intersection(truth).count();
    let fp = flagged.len() - tp;
    let fn_ = truth.len() - tp;
    let p = percent(tp, tp + fp);
    let r = percent(tp, tp + fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let warning = (flagged.is_empty() && truth.is_empty()).then(|| {
        log::warn!("empty truth and flagged sets; metrics are zero");
        "empty truth and flagged sets".to_string()
    });
    DetectionMetrics {
        precision: round2(p),
        recall: round2(r),
        f1: round2(f1),
        tp,
        fp,
        fn_,
        warning,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub label_free: bool,
    #[serde(flatten)]
    pub metrics: DetectionMetrics,
    pub flagged: usize,
    pub params: DetectionParams,
    pub notes: DetectionNotes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub truth_size: usize,
    pub evaluated: usize,
    pub rows: Vec<ReportRow>,
}

impl DetectionReport {
    /// Rows in the fixed method order, scored against `truth`.
    pub fn build(runs: &[DetectionRun], truth: &BTreeSet<String>) -> Self {
        let mut sorted: Vec<&DetectionRun> = runs.iter().collect();
        sorted.sort_by_key(|r| r.method);
        let evaluated = runs
            .iter()
            .flat_map(|r| r.evaluated.iter())
            .collect::<BTreeSet<_>>()
            .len();
        DetectionReport {
            truth_size: truth.len(),
            evaluated,
            rows: sorted
                .into_iter()
                .map(|r| ReportRow {
                    method: r.method,
                    label_free: r.method.label_free(),
                    metrics: score_detection(&r.flagged, truth),
                    flagged: r.flagged.len(),
                    params: r.params.clone(),
                    notes: r.notes.clone(),
                })
                .collect(),
        }
    }

    /// Aligned text table with Method / Label-free / Precision / Recall / F1.
    pub fn to_table(&self) -> String {
        let header = ["Method", "Label-free", "Precision", "Recall", "F1", "TP", "FP", "FN"];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            cells.push(vec![
                r.method.to_string(),
                if r.label_free { "Yes" } else { "No" }.to_string(),
                format!("{:.2}", r.metrics.precision),
                format!("{:.2}", r.metrics.recall),
                format!("{:.2}", r.metrics.f1),
                r.metrics.tp.to_string(),
                r.metrics.fp.to_string(),
                r.metrics.fn_.to_string(),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    if c < 2 {
                        format!("{cell:<w$}", w = widths[c])
                    } else {
                        format!("{cell:>w$}", w = widths[c])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let rule = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(rule));
            }
        }
        out
    }
}
