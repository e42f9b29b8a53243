//! Knowledge-base and query ingestion.
//!
//! Both inputs are line-delimited JSON. Facts are filtered by their source
//! confidence and deduplicated on normalized text; queries are validated and
//! given content-hash ids. Malformed lines are reported with their line
//! number and skipped.

use std::collections::HashSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::hashing::content_id;

/// Default confidence floor for facts (facts strictly below are dropped).
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub fact_id: String,
    pub text: String,
    pub confidence: f64,
    #[serde(default)]
    pub source: String,
}

impl Fact {
    /// Builds a fact with an id derived from its normalized text.
    pub fn new(text: &str, confidence: f64, source: impl Into<String>) -> Option<Fact> {
        let text = collapse_whitespace(text);
        if text.is_empty() || !(0.0..=1.0).contains(&confidence) {
            return None;
        }
        Some(Fact {
            fact_id: fact_id(&text),
            text,
            confidence,
            source: source.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub question: String,
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

impl Query {
    /// Validates and builds a query. The id covers the question and options
    /// but not the label, so redacting labels keeps ids stable.
    pub fn new(
        question: &str,
        options: Vec<String>,
        gold_label: Option<usize>,
        tags: Vec<String>,
    ) -> Result<Query, String> {
        let question = collapse_whitespace(question);
        if question.is_empty() {
            return Err("empty question".to_string());
        }
        let options: Vec<String> = options.iter().map(|o| collapse_whitespace(o)).collect();
        if options.len() < 2 {
            return Err("needs options".to_string());
        }
        if options.iter().any(|o| o.is_empty()) {
            return Err("empty option".to_string());
        }
        let mut seen = HashSet::new();
        if !options.iter().all(|o| seen.insert(o.as_str())) {
            return Err("duplicate options".to_string());
        }
        if let Some(label) = gold_label {
            if label >= options.len() {
                return Err(format!(
                    "label {label} out of range for {} options",
                    options.len()
                ));
            }
        }
        let mut parts = vec![normalize_text(&question)];
        parts.extend(options.iter().cloned());
        Ok(Query {
            query_id: content_id(parts),
            question,
            options,
            gold_label,
            tags,
        })
    }

    /// Copy of the query with the gold label removed.
    pub fn redacted(&self) -> Query {
        Query {
            gold_label: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Well-formed records seen. Equals kept + both drop counters.
    pub total_read: usize,
    pub kept: usize,
    pub dropped_low_confidence: usize,
    pub dropped_duplicate: usize,
    /// Lines rejected before they counted as records.
    pub malformed: usize,
}

impl CorpusStats {
    pub fn reconciles(&self) -> bool {
        self.total_read == self.kept + self.dropped_low_confidence + self.dropped_duplicate
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct FactIngest {
    pub facts: Vec<Fact>,
    pub stats: CorpusStats,
    pub errors: Vec<RecordError>,
}

#[derive(Debug, Clone, Default)]
pub struct QueryIngest {
    pub queries: Vec<Query>,
    /// Records that arrived without options; eligible for math preprocessing.
    pub optionless: Vec<OptionlessQuery>,
    pub errors: Vec<RecordError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionlessQuery {
    pub line: usize,
    pub question: String,
    pub tags: Vec<String>,
}

/// Case-folds and collapses runs of whitespace. Used as the dedup key.
pub fn normalize_text(text: &str) -> String {
    collapse_whitespace(&text.to_lowercase())
}

pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn fact_id(text: &str) -> String {
    content_id([normalize_text(text)])
}

#[derive(Deserialize)]
struct FactRecord {
    text: Option<String>,
    confidence: Option<f64>,
    #[serde(default)]
    source: Option<String>,
}

#[derive(Deserialize)]
struct QueryRecord {
    question: Option<String>,
    #[serde(default)]
    options: Option<Vec<String>>,
    #[serde(default)]
    label: Option<usize>,
    #[serde(default)]
    tags: Vec<String>,
}

/// Reads fact records, keeping those with `confidence >= min_confidence`,
/// first occurrence winning among normalized-text duplicates.
pub fn ingest_facts<R: BufRead>(reader: R, min_confidence: f64) -> FactIngest {
    let mut out = FactIngest::default();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                out.errors.push(RecordError {
                    line: line_no,
                    reason: format!("unreadable line: {e}"),
                });
                out.stats.malformed += 1;
                continue;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let fact = match parse_fact_line(&line) {
            Ok(f) => f,
            Err(reason) => {
                out.errors.push(RecordError {
                    line: line_no,
                    reason,
                });
                out.stats.malformed += 1;
                continue;
            }
        };
        out.stats.total_read += 1;
        if fact.confidence < min_confidence {
            out.stats.dropped_low_confidence += 1;
            continue;
        }
        if !seen.insert(fact.fact_id.clone()) {
            out.stats.dropped_duplicate += 1;
            continue;
        }
        out.stats.kept += 1;
        out.facts.push(fact);
    }
    if out.facts.is_empty() {
        log::warn!("fact ingestion kept no records");
    }
    out
}

fn parse_fact_line(line: &str) -> Result<Fact, String> {
    let rec: FactRecord = serde_json::from_str(line).map_err(|e| format!("invalid json: {e}"))?;
    let text = rec.text.ok_or("missing text")?;
    let confidence = rec.confidence.ok_or("missing confidence")?;
    if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
        return Err(format!("confidence {confidence} outside [0,1]"));
    }
    Fact::new(&text, confidence, rec.source.unwrap_or_default()).ok_or_else(|| "empty text".into())
}

/// Reads query records. Records without an `options` field are set aside for
/// preprocessing; records with fewer than two options are rejected.
pub fn ingest_queries<R: BufRead>(reader: R) -> QueryIngest {
    let mut out = QueryIngest::default();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                out.errors.push(RecordError {
                    line: line_no,
                    reason: format!("unreadable line: {e}"),
                });
                continue;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                out.errors.push(RecordError {
                    line: line_no,
                    reason: format!("invalid json: {e}"),
                });
                continue;
            }
        };
        let Some(question) = rec.question else {
            out.errors.push(RecordError {
                line: line_no,
                reason: "missing question".into(),
            });
            continue;
        };
        let Some(options) = rec.options else {
            out.optionless.push(OptionlessQuery {
                line: line_no,
                question: collapse_whitespace(&question),
                tags: rec.tags,
            });
            continue;
        };
        match Query::new(&question, options, rec.label, rec.tags) {
            Ok(q) => {
                if seen.insert(q.query_id.clone()) {
                    out.queries.push(q);
                } else {
                    out.errors.push(RecordError {
                        line: line_no,
                        reason: "duplicate query".into(),
                    });
                }
            }
            Err(reason) => out.errors.push(RecordError {
                line: line_no,
                reason,
            }),
        }
    }
    out
}
