//! Relative-entropy diagnosis.
//!
//! For every query the prior option distribution P (no knowledge) and, for
//! every retrieved fact, the posterior Q (fact in the prompt) are computed by
//! a softmax over option log-likelihoods. `KL(P‖Q)` in nats measures how much
//! the fact moved the model; pairs at or above the threshold τ are
//! deficiencies, and the group table maps each one to a severity and a
//! synthesis budget.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Query;
use crate::parallel::bounded_map;
use crate::scorer::{KnowledgeRef, OptionScores, ScoreRequest, Scorer};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_CLAMP_FLOOR: f64 = 1e-12;
pub const DEFAULT_DIRECTION_BAND: f64 = 1e-6;
/// Tolerance on `Σ probs = 1`.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnoseError {
    #[error("degenerate distribution")]
    Degenerate,
    #[error("non-finite score")]
    NonFinite,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("distributions belong to different queries ({0} vs {1})")]
    QueryMismatch(String, String),
    #[error("expected a {expected} distribution")]
    WrongKind { expected: &'static str },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("labeled-mode only")]
    LabeledModeOnly,
    #[error("gold label {0} out of range")]
    InvalidLabel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Prior,
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionDistribution {
    pub query_id: String,
    pub probs: Vec<f64>,
    pub kind: DistributionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_id: Option<String>,
}

impl OptionDistribution {
    /// Validated constructor for externally supplied probabilities.
    pub fn new(
        query_id: impl Into<String>,
        probs: Vec<f64>,
        kind: DistributionKind,
        knowledge_id: Option<String>,
    ) -> Result<Self, DiagnoseError> {
        if probs.len() < 2 {
            return Err(DiagnoseError::Degenerate);
        }
        if probs.iter().any(|p| !(p.is_finite() && *p > 0.0 && *p <= 1.0)) {
            return Err(DiagnoseError::InvalidDistribution(
                "entries must lie in (0, 1]".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(DiagnoseError::InvalidDistribution(format!("sums to {sum}")));
        }
        if kind == DistributionKind::Posterior && knowledge_id.is_none() {
            return Err(DiagnoseError::InvalidDistribution(
                "posterior needs a knowledge id".into(),
            ));
        }
        Ok(OptionDistribution {
            query_id: query_id.into(),
            probs,
            kind,
            knowledge_id,
        })
    }
}

/// Numerically stable softmax. Entries that underflow are floored at the
/// smallest positive normal so every probability stays in (0, 1].
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter()
        .map(|e| (e / total).max(f64::MIN_POSITIVE))
        .collect()
}

/// Option distribution from NLLs: softmax over log-likelihoods (negated
/// NLLs), optionally divided by token counts first.
pub fn normalize(scores: &OptionScores, length_normalize: bool) -> Result<OptionDistribution, DiagnoseError> {
    if scores.nll.len() < 2 {
        return Err(DiagnoseError::Degenerate);
    }
    if scores.token_counts.len() != scores.nll.len() {
        return Err(DiagnoseError::LengthMismatch(
            scores.nll.len(),
            scores.token_counts.len(),
        ));
    }
    if scores.nll.iter().any(|n| !n.is_finite()) {
        return Err(DiagnoseError::NonFinite);
    }
    let logits: Vec<f64> = if length_normalize {
        scores.per_token().into_iter().map(|x| -x).collect()
    } else {
        scores.nll.iter().map(|x| -x).collect()
    };
    let kind = if scores.knowledge_id.is_some() {
        DistributionKind::Posterior
    } else {
        DistributionKind::Prior
    };
    Ok(OptionDistribution {
        query_id: scores.query_id.clone(),
        probs: softmax(&logits),
        kind,
        knowledge_id: scores.knowledge_id.clone(),
    })
}

/// `Σ pᵢ (ln pᵢ − ln qᵢ)` with every probability clamped to at least `floor`.
pub fn kl_divergence(p: &[f64], q: &[f64], floor: f64) -> Result<f64, DiagnoseError> {
    if p.len() != q.len() {
        return Err(DiagnoseError::LengthMismatch(p.len(), q.len()));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let pi = pi.max(floor);
            let qi = qi.max(floor);
            pi * (pi.ln() - qi.ln())
        })
        .sum())
}

/// `KL(P‖Q)` between a prior and a posterior of the same query.
pub fn relative_entropy(
    p: &OptionDistribution,
    q: &OptionDistribution,
    floor: f64,
) -> Result<f64, DiagnoseError> {
    if p.kind != DistributionKind::Prior {
        return Err(DiagnoseError::WrongKind { expected: "prior" });
    }
    if q.kind != DistributionKind::Posterior {
        return Err(DiagnoseError::WrongKind { expected: "posterior" });
    }
    if p.query_id != q.query_id {
        return Err(DiagnoseError::QueryMismatch(p.query_id.clone(), q.query_id.clone()));
    }
    kl_divergence(&p.probs, &q.probs, floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    Easy,
    Normal,
    Hard,
    Unfair,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Severity::Easy => "Easy",
            Severity::Normal => "Normal",
            Severity::Hard => "Hard",
            Severity::Unfair => "Unfair",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    /// Inclusive.
    pub lower: f64,
    /// Exclusive; `None` means unbounded.
    #[serde(default)]
    pub upper: Option<f64>,
    pub group: Severity,
    pub budget: u32,
}

impl Band {
    fn contains(&self, re: f64) -> bool {
        re >= self.lower && self.upper.is_none_or(|u| re < u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTable {
    pub tau: f64,
    pub bands: Vec<Band>,
}

impl Default for GroupTable {
    fn default() -> Self {
        let band = |lower, upper, group, budget| Band {
            lower,
            upper,
            group,
            budget,
        };
        GroupTable {
            tau: DEFAULT_TAU,
            bands: vec![
                band(0.1, Some(0.4), Severity::Easy, 1),
                band(0.4, Some(0.7), Severity::Normal, 2),
                band(0.7, Some(1.0), Severity::Hard, 3),
                band(1.0, None, Severity::Unfair, 4),
            ],
        }
    }
}

impl GroupTable {
    /// Validates and returns the table, or every problem found.
    pub fn new(tau: f64, bands: Vec<Band>) -> Result<Self, Vec<String>> {
        let table = GroupTable { tau, bands };
        let errors = table.problems();
        if errors.is_empty() {
            Ok(table)
        } else {
            Err(errors)
        }
    }

    /// All rule violations; empty when the table is valid.
    pub fn problems(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if !self.tau.is_finite() || self.tau < 0.0 {
            errors.push(format!("tau must be a nonnegative number, got {}", self.tau));
        }
        let Some(first) = self.bands.first() else {
            errors.push("group table has no intervals".to_string());
            return errors;
        };
        if first.lower != self.tau {
            errors.push(format!(
                "first interval starts at {} but tau is {}",
                first.lower, self.tau
            ));
        }
        for (i, b) in self.bands.iter().enumerate() {
            if let Some(u) = b.upper {
                if u <= b.lower {
                    errors.push(format!("interval {i} is empty ([{}, {u}))", b.lower));
                }
            } else if i + 1 != self.bands.len() {
                errors.push(format!("interval {i} is unbounded but is not the last"));
            }
            if b.budget == 0 {
                errors.push(format!("interval {i} has zero budget"));
            }
        }
        for (i, pair) in self.bands.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if let Some(u) = a.upper {
                if b.lower > u {
                    errors.push(format!(
                        "intervals not contiguous: gap [{u}, {}) between {} and {}",
                        b.lower,
                        i,
                        i + 1
                    ));
                } else if b.lower < u {
                    errors.push(format!("intervals overlap: {} and {}", i, i + 1));
                }
            }
            if b.budget < a.budget {
                errors.push(format!("budgets must be nondecreasing (interval {})", i + 1));
            }
            if b.group <= a.group {
                errors.push(format!("groups out of severity order at interval {}", i + 1));
            }
        }
        if self.bands.last().is_some_and(|b| b.upper.is_some()) {
            errors.push("last interval must be unbounded".to_string());
        }
        errors
    }

    /// Group and budget for `re`, or `None` below τ.
    pub fn classify(&self, re: f64) -> Option<(Severity, u32)> {
        if re < self.tau {
            return None;
        }
        self.bands
            .iter()
            .find(|b| b.contains(re))
            .map(|b| (b.group, b.budget))
    }

    pub fn budget_of(&self, group: Severity) -> Option<u32> {
        self.bands.iter().find(|b| b.group == group).map(|b| b.budget)
    }
}

/// Free-function form of [`GroupTable::classify`].
pub fn classify(re: f64, table: &GroupTable) -> Option<(Severity, u32)> {
    table.classify(re)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Helpful,
    Misleading,
    Neutral,
}

/// Whether the knowledge raised or lowered the gold option's probability
/// by more than `band`.
pub fn tag_direction(
    p: &OptionDistribution,
    q: &OptionDistribution,
    gold_label: Option<usize>,
    band: f64,
) -> Result<Direction, DiagnoseError> {
    let gold = gold_label.ok_or(DiagnoseError::LabeledModeOnly)?;
    if p.probs.len() != q.probs.len() {
        return Err(DiagnoseError::LengthMismatch(p.probs.len(), q.probs.len()));
    }
    if gold >= p.probs.len() {
        return Err(DiagnoseError::InvalidLabel(gold));
    }
    let shift = q.probs[gold] - p.probs[gold];
    Ok(if shift > band {
        Direction::Helpful
    } else if shift < -band {
        Direction::Misleading
    } else {
        Direction::Neutral
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deficiency {
    pub query_id: String,
    pub knowledge_id: String,
    pub re: f64,
    pub group: Severity,
    pub budget: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Deficiency {
    /// Stable reference used for provenance.
    pub fn id(&self) -> String {
        deficiency_id(&self.query_id, &self.knowledge_id)
    }
}

pub fn deficiency_id(query_id: &str, knowledge_id: &str) -> String {
    format!("{query_id}/{knowledge_id}")
}

/// RE of one scored (query, knowledge) pair, deficient or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub query_id: String,
    pub knowledge_id: String,
    pub re: f64,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_id: Option<String>,
    pub error: String,
    /// The backend (not the request) failed.
    pub backend: bool,
}

#[derive(Debug, Clone)]
pub struct DiagnoseOptions {
    pub table: GroupTable,
    pub clamp_floor: f64,
    pub length_normalize: bool,
    pub direction_band: f64,
    pub template_id: String,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        DiagnoseOptions {
            table: GroupTable::default(),
            clamp_floor: DEFAULT_CLAMP_FLOOR,
            length_normalize: false,
            direction_band: DEFAULT_DIRECTION_BAND,
            template_id: "plain".to_string(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Diagnosis {
    /// Prior scores, one per successfully scored query, sorted by query id.
    pub priors: Vec<OptionScores>,
    /// Every scored pair, sorted by (query id, knowledge id).
    pub pairs: Vec<PairRecord>,
    /// Pairs with RE ≥ τ, same order.
    pub deficiencies: Vec<Deficiency>,
    pub failures: Vec<PairFailure>,
}

impl Diagnosis {
    /// Queries with at least one deficient pair.
    pub fn flagged_queries(&self) -> BTreeSet<String> {
        self.deficiencies.iter().map(|d| d.query_id.clone()).collect()
    }
}

/// Scores every query once without knowledge and once per knowledge piece,
/// then thresholds each pair. Scoring failures are recorded and skipped.
pub fn diagnose_all(
    queries: &[Query],
    knowledge: &BTreeMap<String, Vec<KnowledgeRef>>,
    scorer: &Scorer,
    opts: &DiagnoseOptions,
) -> Diagnosis {
    let mut out = Diagnosis::default();
    let limit = scorer.max_in_flight;

    let priors = bounded_map(queries, limit, |q| {
        scorer
            .score_options(&ScoreRequest::prior(q, &opts.template_id))
            .map_err(|e| (e.is_backend(), e.to_string()))
            .and_then(|s| {
                normalize(&s, opts.length_normalize)
                    .map(|d| (s, d))
                    .map_err(|e| (false, e.to_string()))
            })
    });

    let mut jobs: Vec<(&Query, &OptionDistribution, &KnowledgeRef)> = Vec::new();
    let mut prior_dists = Vec::new();
    for (q, prior) in queries.iter().zip(priors) {
        match prior {
            Ok((scores, dist)) => {
                out.priors.push(scores);
                prior_dists.push((q, dist));
            }
            Err((backend, error)) => out.failures.push(PairFailure {
                query_id: q.query_id.clone(),
                knowledge_id: None,
                error,
                backend,
            }),
        }
    }
    for (q, dist) in &prior_dists {
        for k in knowledge.get(&q.query_id).into_iter().flatten() {
            jobs.push((q, dist, k));
        }
    }

    let posteriors = bounded_map(&jobs, limit, |(q, prior, k)| {
        let req = ScoreRequest::posterior(q, (*k).clone(), &opts.template_id);
        let scores = scorer
            .score_options(&req)
            .map_err(|e| (e.is_backend(), e.to_string()))?;
        let post = normalize(&scores, opts.length_normalize).map_err(|e| (false, e.to_string()))?;
        let re = relative_entropy(prior, &post, opts.clamp_floor).map_err(|e| (false, e.to_string()))?;
        Ok::<_, (bool, String)>((post, re))
    });

    for ((q, prior, k), result) in jobs.iter().zip(posteriors) {
        match result {
            Ok((post, re)) => {
                if let Some((group, budget)) = opts.table.classify(re) {
                    let direction = q
                        .gold_label
                        .and_then(|g| tag_direction(prior, &post, Some(g), opts.direction_band).ok());
                    out.deficiencies.push(Deficiency {
                        query_id: q.query_id.clone(),
                        knowledge_id: k.id.clone(),
                        re,
                        group,
                        budget,
                        direction,
                        p: prior.probs.clone(),
                        q: post.probs.clone(),
                    });
                }
                out.pairs.push(PairRecord {
                    query_id: q.query_id.clone(),
                    knowledge_id: k.id.clone(),
                    re,
                    p: prior.probs.clone(),
                    q: post.probs,
                });
            }
            Err((backend, error)) => out.failures.push(PairFailure {
                query_id: q.query_id.clone(),
                knowledge_id: Some(k.id.clone()),
                error,
                backend,
            }),
        }
    }

    out.priors.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    out.pairs
        .sort_by(|a, b| (&a.query_id, &a.knowledge_id).cmp(&(&b.query_id, &b.knowledge_id)));
    out.deficiencies
        .sort_by(|a, b| (&a.query_id, &a.knowledge_id).cmp(&(&b.query_id, &b.knowledge_id)));
    out.failures
        .sort_by(|a, b| (&a.query_id, &a.knowledge_id).cmp(&(&b.query_id, &b.knowledge_id)));
    out
}
