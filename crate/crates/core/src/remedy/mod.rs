//! Remediation planning: budgets, synthesis prompts, response parsing and
//! curriculum ordering.

mod curriculum;
mod parse;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{OptionlessQuery, Query};
use crate::diagnose::{Deficiency, Severity};
use crate::hashing::{content_id, hash_u64};
use crate::parallel::bounded_map;
use crate::scorer::{format_options, GenerationPurpose, GenerationRequest, Scorer};

pub use curriculum::{order_curriculum, CurriculumManifest, ManifestEntry, MANIFEST_FORMAT_VERSION};
pub use parse::{
    answer_line, parse_math_preprocess, parse_options, parse_response, render_math_preprocess_response,
    render_scaffold, BlockIssue, MathPreprocess, ParseReport, ParsedExample,
};

const REASONING_TEMPLATE: &str = include_str!("../../templates/synthesis_reasoning.txt");
const MATH_TEMPLATE: &str = include_str!("../../templates/synthesis_math.txt");
const PREPROCESS_TEMPLATE: &str = include_str!("../../templates/preprocess_math.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RemedyError {
    #[error("unknown style {0}")]
    UnknownStyle(String),
    #[error("empty knowledge text for {0}")]
    EmptyKnowledge(String),
    #[error("template {name} lacks {placeholder}")]
    Template { name: String, placeholder: String },
    #[error("cannot read template {0}")]
    TemplateIo(String),
    #[error("example {example_id} references unknown deficiency {deficiency_ref}")]
    DanglingProvenance {
        example_id: String,
        deficiency_ref: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisStyle {
    Reasoning,
    Math,
}

impl std::str::FromStr for SynthesisStyle {
    type Err = RemedyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reasoning" => Ok(SynthesisStyle::Reasoning),
            "math" => Ok(SynthesisStyle::Math),
            other => Err(RemedyError::UnknownStyle(other.to_string())),
        }
    }
}

/// Dataset tag → synthesis style. Untagged or unmapped queries use the
/// default style; the first mapped tag wins.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleMap {
    pub default: SynthesisStyle,
    pub by_tag: BTreeMap<String, SynthesisStyle>,
}

impl Default for StyleMap {
    fn default() -> Self {
        StyleMap {
            default: SynthesisStyle::Reasoning,
            by_tag: BTreeMap::from([
                ("gsm8k".to_string(), SynthesisStyle::Math),
                ("e-care".to_string(), SynthesisStyle::Reasoning),
            ]),
        }
    }
}

impl StyleMap {
    pub fn from_strings(default: &str, by_tag: &BTreeMap<String, String>) -> Result<Self, RemedyError> {
        Ok(StyleMap {
            default: default.parse()?,
            by_tag: by_tag
                .iter()
                .map(|(k, v)| Ok((k.to_lowercase(), v.parse()?)))
                .collect::<Result<_, RemedyError>>()?,
        })
    }

    pub fn style_for(&self, query: &Query) -> SynthesisStyle {
        query
            .tags
            .iter()
            .find_map(|t| self.by_tag.get(&t.to_lowercase()).copied())
            .unwrap_or(self.default)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisTemplates {
    pub reasoning: String,
    pub math: String,
    pub preprocess: String,
}

impl Default for SynthesisTemplates {
    fn default() -> Self {
        SynthesisTemplates {
            reasoning: REASONING_TEMPLATE.to_string(),
            math: MATH_TEMPLATE.to_string(),
            preprocess: PREPROCESS_TEMPLATE.to_string(),
        }
    }
}

impl SynthesisTemplates {
    /// Defaults overridden by `synthesis_reasoning.txt`, `synthesis_math.txt`
    /// and `preprocess_math.txt` when present in `dir`.
    pub fn with_dir(dir: &Path) -> Result<Self, RemedyError> {
        let mut t = SynthesisTemplates::default();
        for (file, slot) in [
            ("synthesis_reasoning.txt", &mut t.reasoning),
            ("synthesis_math.txt", &mut t.math),
            ("preprocess_math.txt", &mut t.preprocess),
        ] {
            let path = dir.join(file);
            if path.exists() {
                *slot = std::fs::read_to_string(&path)
                    .map_err(|e| RemedyError::TemplateIo(format!("{}: {e}", path.display())))?;
            }
        }
        t.check()?;
        Ok(t)
    }

    pub fn check(&self) -> Result<(), RemedyError> {
        let required: [(&str, &str, &[&str]); 3] = [
            ("synthesis_reasoning", &self.reasoning, &["{knowledge}", "{examples}", "{n}"]),
            ("synthesis_math", &self.math, &["{knowledge}", "{examples}", "{n}"]),
            ("preprocess_math", &self.preprocess, &["{question}"]),
        ];
        for (name, text, placeholders) in required {
            for p in placeholders {
                if !text.contains(p) {
                    return Err(RemedyError::Template {
                        name: name.to_string(),
                        placeholder: p.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Replaces `{key}` placeholders in one pass; unknown braces are kept.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    'scan: while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        for (key, value) in values {
            let placeholder = format!("{{{key}}}");
            if tail.starts_with(&placeholder) {
                out.push_str(value);
                rest = &tail[placeholder.len()..];
                continue 'scan;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

/// One deficiency's share of the synthesis budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedJob {
    pub job_id: String,
    pub deficiency_ref: String,
    pub query_id: String,
    pub knowledge_id: String,
    pub group: Severity,
    pub re: f64,
    pub n_examples: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTotals {
    pub deficiencies: u64,
    pub examples: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub per_group: BTreeMap<Severity, GroupTotals>,
    pub total_deficiencies: u64,
    pub total_examples: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_total: Option<u64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub fn job_id(deficiency_ref: &str, n_examples: u32) -> String {
    content_id(["job", deficiency_ref, &n_examples.to_string()])
}

/// One job per deficiency with `n_examples` equal to its budget. When
/// `expected_total` is set and differs from the planned total, the report
/// carries a warning.
pub fn plan_budgets(deficiencies: &[Deficiency], expected_total: Option<u64>) -> (Vec<PlannedJob>, BudgetReport) {
    let mut report = BudgetReport {
        expected_total,
        ..Default::default()
    };
    let jobs: Vec<PlannedJob> = deficiencies
        .iter()
        .map(|d| {
            let totals = report.per_group.entry(d.group).or_default();
            totals.deficiencies += 1;
            totals.examples += u64::from(d.budget);
            report.total_deficiencies += 1;
            report.total_examples += u64::from(d.budget);
            let deficiency_ref = d.id();
            PlannedJob {
                job_id: job_id(&deficiency_ref, d.budget),
                deficiency_ref,
                query_id: d.query_id.clone(),
                knowledge_id: d.knowledge_id.clone(),
                group: d.group,
                re: d.re,
                n_examples: d.budget,
            }
        })
        .collect();
    if let Some(expected) = expected_total {
        if expected != report.total_examples {
            let msg = format!(
                "planned {} examples but {expected} were expected (difference {})",
                report.total_examples,
                report.total_examples as i64 - expected as i64
            );
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
    }
    (jobs, report)
}

/// The reference query as it appears under `Examples:`.
pub fn reference_example(query: &Query) -> String {
    format!("Question: {}\nOptions: {}", query.question, format_options(&query.options))
}

pub fn build_prompt(
    templates: &SynthesisTemplates,
    style: SynthesisStyle,
    n: u32,
    knowledge: &str,
    reference: &Query,
) -> Result<String, RemedyError> {
    if knowledge.trim().is_empty() {
        return Err(RemedyError::EmptyKnowledge(reference.query_id.clone()));
    }
    let template = match style {
        SynthesisStyle::Reasoning => &templates.reasoning,
        SynthesisStyle::Math => &templates.math,
    };
    let examples = reference_example(reference);
    let n = n.to_string();
    Ok(fill(
        template,
        &[("knowledge", knowledge), ("examples", &examples), ("n", &n)],
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisJob {
    pub job_id: String,
    pub deficiency_ref: String,
    pub n_examples: u32,
    pub style: SynthesisStyle,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobError {
    pub deficiency_ref: String,
    pub error: String,
}

/// Renders prompts for planned jobs. Jobs whose query or knowledge cannot be
/// resolved are reported instead.
pub fn build_jobs(
    planned: &[PlannedJob],
    queries: &BTreeMap<String, Query>,
    knowledge: &BTreeMap<String, String>,
    styles: &StyleMap,
    templates: &SynthesisTemplates,
) -> (Vec<SynthesisJob>, Vec<JobError>) {
    let mut jobs = Vec::new();
    let mut errors = Vec::new();
    for p in planned {
        let fail = |error: String| JobError {
            deficiency_ref: p.deficiency_ref.clone(),
            error,
        };
        let Some(query) = queries.get(&p.query_id) else {
            errors.push(fail(format!("unknown query {}", p.query_id)));
            continue;
        };
        let Some(text) = knowledge.get(&p.knowledge_id) else {
            errors.push(fail(format!("unknown knowledge {}", p.knowledge_id)));
            continue;
        };
        let style = styles.style_for(query);
        match build_prompt(templates, style, p.n_examples, text, query) {
            Ok(prompt) => jobs.push(SynthesisJob {
                job_id: p.job_id.clone(),
                deficiency_ref: p.deficiency_ref.clone(),
                n_examples: p.n_examples,
                style,
                prompt,
            }),
            Err(e) => errors.push(fail(e.to_string())),
        }
    }
    (jobs, errors)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub deficiency_ref: String,
    pub job_id: String,
    pub ordinal: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthExample {
    pub example_id: String,
    pub style: SynthesisStyle,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    pub explanation: String,
    pub provenance: Provenance,
}

impl SynthExample {
    pub fn from_parsed(ex: ParsedExample, job: &SynthesisJob, ordinal: u32) -> Self {
        SynthExample {
            example_id: content_id([job.job_id.as_str(), &ordinal.to_string(), &ex.question]),
            style: job.style,
            question: ex.question,
            options: ex.options,
            answer_index: ex.answer_index,
            explanation: ex.explanation,
            provenance: Provenance {
                deficiency_ref: job.deficiency_ref.clone(),
                job_id: job.job_id.clone(),
                ordinal,
            },
        }
    }

    fn as_parsed(&self) -> ParsedExample {
        ParsedExample {
            question: self.question.clone(),
            options: self.options.clone(),
            answer_index: self.answer_index,
            explanation: self.explanation.clone(),
        }
    }

    /// Instruction-side text: question and lettered options.
    pub fn input(&self) -> String {
        format!("Question: {}\nOptions: {}", self.question, format_options(&self.options))
    }

    /// Target-side text: explanation (or solution) then the answer.
    pub fn output(&self) -> String {
        let label = match self.style {
            SynthesisStyle::Reasoning => "Explanation",
            SynthesisStyle::Math => "Solution",
        };
        format!(
            "{label}: {}\nAnswer: {}",
            self.explanation,
            answer_line(&self.as_parsed(), self.style)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Complete,
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub job_id: String,
    pub deficiency_ref: String,
    pub requested: u32,
    pub produced: u32,
    pub attempts: u32,
    pub status: JobStatus,
    pub parse: ParseReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct SynthesisOutcome {
    pub examples: Vec<SynthExample>,
    pub reports: Vec<JobReport>,
}

impl SynthesisOutcome {
    pub fn shortfall(&self) -> u64 {
        self.reports
            .iter()
            .map(|r| u64::from(r.requested.saturating_sub(r.produced)))
            .sum()
    }
}

fn run_job(job: &SynthesisJob, scorer: &Scorer, max_attempts: u32) -> (Vec<SynthExample>, JobReport) {
    let mut report = JobReport {
        job_id: job.job_id.clone(),
        deficiency_ref: job.deficiency_ref.clone(),
        requested: job.n_examples,
        produced: 0,
        attempts: 0,
        status: JobStatus::Failed,
        parse: ParseReport::default(),
        error: None,
    };
    for attempt in 0..max_attempts.max(1) {
        report.attempts = attempt + 1;
        let req = GenerationRequest {
            key: job.job_id.clone(),
            prompt: job.prompt.clone(),
            purpose: GenerationPurpose::Synthesis {
                n: job.n_examples as usize,
                style: job.style,
            },
            attempt,
        };
        let text = match scorer.generate_raw(&req) {
            Ok(g) => g.text,
            Err(e) => {
                report.error = Some(e.to_string());
                continue;
            }
        };
        let (parsed, parse_report) = parse_response(&text, job.n_examples as usize, job.style);
        report.parse = parse_report;
        if parsed.is_empty() {
            report.error = Some("no parseable examples".into());
            continue;
        }
        report.error = None;
        report.produced = parsed.len() as u32;
        report.status = if report.produced >= job.n_examples {
            JobStatus::Complete
        } else {
            JobStatus::Partial
        };
        let examples = parsed
            .into_iter()
            .enumerate()
            .map(|(i, ex)| SynthExample::from_parsed(ex, job, i as u32))
            .collect();
        return (examples, report);
    }
    (Vec::new(), report)
}

/// Runs every job through the generator under the scorer's in-flight bound.
/// A job is retried with the same prompt while it yields nothing parseable.
pub fn synthesize(jobs: &[SynthesisJob], scorer: &Scorer, max_attempts: u32) -> SynthesisOutcome {
    let results = bounded_map(jobs, scorer.max_in_flight, |job| run_job(job, scorer, max_attempts));
    let mut out = SynthesisOutcome::default();
    for (examples, report) in results {
        if report.status == JobStatus::Failed {
            log::warn!(
                "synthesis for {} failed after {} attempts: {}",
                report.deficiency_ref,
                report.attempts,
                report.error.as_deref().unwrap_or("unknown")
            );
        }
        out.examples.extend(examples);
        out.reports.push(report);
    }
    out
}

/// A math query after option and knowledge generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedQuery {
    pub query: Query,
    pub knowledge: Vec<String>,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessSkip {
    pub line: usize,
    pub question: String,
    pub reason: String,
}

/// Asks the generator for knowledge, an answer and distractors, then builds
/// a multiple-choice query. The answer lands at a position derived from the
/// question hash so it is not always first.
pub fn preprocess_math_query(
    q: &OptionlessQuery,
    scorer: &Scorer,
    templates: &SynthesisTemplates,
    max_attempts: u32,
) -> Result<PreprocessedQuery, PreprocessSkip> {
    let skip = |reason: String| PreprocessSkip {
        line: q.line,
        question: q.question.clone(),
        reason,
    };
    let prompt = fill(&templates.preprocess, &[("question", &q.question)]);
    let key = format!("preprocess/{}", content_id([q.question.as_str()]));
    let mut last = String::from("no attempts");
    for attempt in 0..max_attempts.max(1) {
        let req = GenerationRequest {
            key: key.clone(),
            prompt: prompt.clone(),
            purpose: GenerationPurpose::MathPreprocess,
            attempt,
        };
        let text = match scorer.generate_raw(&req) {
            Ok(g) => g.text,
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        let parsed = match parse_math_preprocess(&text) {
            Ok(p) => p,
            Err(reason) => {
                last = reason;
                continue;
            }
        };
        let slots = parsed.distractors.len() + 1;
        let pos = (hash_u64([q.question.as_bytes()]) % slots as u64) as usize;
        let mut options = parsed.distractors.clone();
        options.insert(pos, parsed.answer.clone());
        // The generator's answer is not a gold label.
        return Query::new(&q.question, options, None, q.tags.clone())
            .map(|query| PreprocessedQuery {
                query,
                knowledge: parsed.knowledge,
                explanation: parsed.explanation,
            })
            .map_err(skip);
    }
    Err(skip(last))
}
