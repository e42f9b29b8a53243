//! Parsers and renderers for generator response scaffolds.
//!
//! Both parsers are total: any input yields a result plus a report, never a
//! panic. Blocks are delimited by `Question:` lines; fields may continue
//! over following lines until the next label.

use serde::{Deserialize, Serialize};

use super::SynthesisStyle;
use crate::corpus::collapse_whitespace;
use crate::scorer::{format_options, option_letter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedExample {
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    /// Explanation for reasoning examples, solution for math ones.
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockIssue {
    /// 1-based block number in the response.
    pub block: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    /// Well-formed blocks seen, before truncation.
    pub found: usize,
    pub malformed: usize,
    pub issues: Vec<BlockIssue>,
    /// Well-formed blocks dropped because more than requested were present.
    pub truncated: usize,
}

impl ParseReport {
    pub fn is_clean(&self) -> bool {
        self.malformed == 0 && self.truncated == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Label {
    Question,
    Options,
    Answer,
    Explanation,
    Solution,
    Knowledge,
    Distractors,
}

const LABELS: &[(&str, Label)] = &[
    ("question:", Label::Question),
    ("options:", Label::Options),
    ("answer:", Label::Answer),
    ("explanation:", Label::Explanation),
    ("solution:", Label::Solution),
    ("background knowledge:", Label::Knowledge),
    ("distractors:", Label::Distractors),
];

/// Splits a line into its label and the text after it, tolerating markdown
/// emphasis such as `**Answer:**`.
fn split_label(line: &str) -> Option<(Label, &str)> {
    let trimmed = line.trim_start().trim_start_matches(['*', '#', ' ']);
    for (name, label) in LABELS {
        let Some(head) = trimmed.get(..name.len()) else {
            continue;
        };
        if head.eq_ignore_ascii_case(name) {
            let rest = trimmed[name.len()..].trim_start_matches('*').trim();
            return Some((*label, rest));
        }
    }
    None
}

/// Labeled sections in order of appearance, each with its joined text.
fn sections(text: &str) -> Vec<(Label, String)> {
    let mut out: Vec<(Label, String)> = Vec::new();
    for line in text.lines() {
        if let Some((label, rest)) = split_label(line) {
            out.push((label, rest.to_string()));
        } else if let Some((_, body)) = out.last_mut() {
            let line = line.trim();
            if !line.is_empty() {
                if !body.is_empty() {
                    body.push('\n');
                }
                body.push_str(line);
            }
        }
    }
    out
}

/// Options introduced by `(A)`, `(B)`, ... in order. Text before `(A)` is
/// ignored. `None` when no `(A)` marker exists.
pub fn parse_options(text: &str) -> Option<Vec<String>> {
    let flat = collapse_whitespace(text);
    let mut cursor = flat.find("(A)")? + 3;
    let mut options = Vec::new();
    for i in 1.. {
        let marker = format!("({})", option_letter(i));
        match flat[cursor..].find(&marker) {
            Some(offset) => {
                options.push(flat[cursor..cursor + offset].trim().to_string());
                cursor += offset + marker.len();
            }
            None => {
                options.push(flat[cursor..].trim().to_string());
                break;
            }
        }
        if i >= 26 {
            options.push(flat[cursor..].trim().to_string());
            break;
        }
    }
    Some(options)
}

/// Index named by an answer line: the first `(X)` marker, a bare leading
/// letter, or an exact option match.
fn parse_answer(answer: &str, options: &[String]) -> Option<usize> {
    let bytes = answer.as_bytes();
    for w in bytes.windows(3) {
        if w[0] == b'(' && w[1].is_ascii_uppercase() && w[2] == b')' {
            return Some((w[1] - b'A') as usize);
        }
    }
    let trimmed = answer.trim();
    let mut chars = trimmed.chars();
    if let Some(c) = chars.next() {
        let next = chars.next();
        if c.is_ascii_uppercase() && next.is_none_or(|n| !n.is_alphanumeric()) {
            return Some((c as u8 - b'A') as usize);
        }
    }
    let flat = collapse_whitespace(trimmed);
    options.iter().position(|o| *o == flat)
}

#[derive(Default)]
struct RawBlock {
    question: Option<String>,
    options: Option<String>,
    answer: Option<String>,
    explanation: Option<String>,
    repeated: bool,
}

fn set(slot: &mut Option<String>, value: String, repeated: &mut bool) {
    if slot.is_some() {
        *repeated = true;
    } else {
        *slot = Some(value);
    }
}

fn validate(raw: RawBlock, style: SynthesisStyle) -> Result<ParsedExample, String> {
    let missing_body = match style {
        SynthesisStyle::Reasoning => "missing explanation",
        SynthesisStyle::Math => "missing solution",
    };
    if raw.repeated {
        return Err("repeated field".into());
    }
    let question = raw
        .question
        .map(|q| collapse_whitespace(&q))
        .filter(|q| !q.is_empty())
        .ok_or("missing question")?;
    let options_text = raw.options.ok_or("missing options")?;
    let options = parse_options(&options_text).ok_or("options lack (A) markers")?;
    if options.len() < 3 {
        return Err("fewer than 3 options".into());
    }
    if options.iter().any(String::is_empty) {
        return Err("empty option".into());
    }
    let mut seen = std::collections::BTreeSet::new();
    if !options.iter().all(|o| seen.insert(o.to_lowercase())) {
        return Err("duplicate options".into());
    }
    let answer = raw.answer.filter(|a| !a.trim().is_empty()).ok_or("missing answer")?;
    let answer_index = parse_answer(&answer, &options).ok_or("unparseable answer")?;
    if answer_index >= options.len() {
        return Err("answer out of range".into());
    }
    let explanation = raw
        .explanation
        .map(|e| e.trim().to_string())
        .filter(|e| !e.is_empty())
        .ok_or(missing_body)?;
    if style == SynthesisStyle::Math && !options[answer_index].chars().any(|c| c.is_ascii_digit()) {
        return Err("non-numeric answer".into());
    }
    Ok(ParsedExample {
        question,
        options,
        answer_index,
        explanation,
    })
}

/// Extracts up to `expected_n` well-formed examples from a synthesis response.
pub fn parse_response(
    text: &str,
    expected_n: usize,
    style: SynthesisStyle,
) -> (Vec<ParsedExample>, ParseReport) {
    let mut blocks: Vec<RawBlock> = Vec::new();
    for (label, body) in sections(text) {
        if label == Label::Question {
            blocks.push(RawBlock {
                question: Some(body),
                ..Default::default()
            });
            continue;
        }
        // Fields before the first question have no block to belong to.
        let Some(b) = blocks.last_mut() else { continue };
        match (label, style) {
            (Label::Options, _) => set(&mut b.options, body, &mut b.repeated),
            (Label::Answer, _) => set(&mut b.answer, body, &mut b.repeated),
            (Label::Explanation, SynthesisStyle::Reasoning) | (Label::Solution, SynthesisStyle::Math) => {
                set(&mut b.explanation, body, &mut b.repeated)
            }
            // Off-style fields are tolerated and dropped.
            _ => {}
        }
    }

    let mut report = ParseReport::default();
    let mut examples = Vec::new();
    for (i, raw) in blocks.into_iter().enumerate() {
        match validate(raw, style) {
            Ok(ex) => {
                report.found += 1;
                if examples.len() < expected_n {
                    examples.push(ex);
                } else {
                    report.truncated += 1;
                }
            }
            Err(reason) => {
                report.malformed += 1;
                report.issues.push(BlockIssue { block: i + 1, reason });
            }
        }
    }
    if report.truncated > 0 {
        log::warn!(
            "generator produced {} examples, keeping the first {expected_n}",
            report.found
        );
    }
    (examples, report)
}

/// Text of the answer line as the scaffolds write it.
pub fn answer_line(ex: &ParsedExample, style: SynthesisStyle) -> String {
    let letter = option_letter(ex.answer_index);
    match style {
        SynthesisStyle::Reasoning => format!("({letter})"),
        SynthesisStyle::Math => format!("({letter}) {}", ex.options[ex.answer_index]),
    }
}

/// Renders examples in the scaffold the synthesis prompts ask for.
pub fn render_scaffold(examples: &[ParsedExample], style: SynthesisStyle) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&format!("Question: {}\n", ex.question));
        let options = format_options(&ex.options);
        match style {
            SynthesisStyle::Reasoning => {
                out.push_str(&format!("Options: {options}\n"));
                out.push_str(&format!("Answer: {}\n", answer_line(ex, style)));
                out.push_str(&format!("Explanation: {}\n", ex.explanation));
            }
            SynthesisStyle::Math => {
                out.push_str(&format!("Solution: {}\n", ex.explanation));
                out.push_str(&format!("Options: {options}\n"));
                out.push_str(&format!("Answer: {}\n", answer_line(ex, style)));
            }
        }
        out.push('\n');
    }
    out
}

/// Sections of a math preprocessing response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MathPreprocess {
    pub knowledge: Vec<String>,
    pub explanation: String,
    pub answer: String,
    pub distractors: Vec<String>,
}

fn strip_bullet(line: &str) -> &str {
    let line = line.trim();
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return rest.trim();
        }
    }
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return rest.trim();
        }
    }
    line
}

fn items(body: &str) -> Vec<String> {
    body.lines()
        .map(strip_bullet)
        .filter(|l| !l.is_empty())
        .map(collapse_whitespace)
        .collect()
}

/// Parses a Background Knowledge / Explanation / Answer / Distractors
/// response. Distractors equal to the answer are dropped.
pub fn parse_math_preprocess(text: &str) -> Result<MathPreprocess, String> {
    let mut knowledge = None;
    let mut explanation = None;
    let mut answer = None;
    let mut distractors = None;
    for (label, body) in sections(text) {
        let slot = match label {
            Label::Knowledge => &mut knowledge,
            Label::Explanation => &mut explanation,
            Label::Answer => &mut answer,
            Label::Distractors => &mut distractors,
            _ => continue,
        };
        slot.get_or_insert(body);
    }
    let knowledge = knowledge.map(|k| items(&k)).unwrap_or_default();
    if knowledge.is_empty() {
        return Err("no knowledge".into());
    }
    let answer = answer
        .map(|a| collapse_whitespace(&a))
        .filter(|a| !a.is_empty())
        .ok_or("no answer")?;
    let raw = distractors.ok_or("no distractors")?;
    let listed = parse_options(&raw).unwrap_or_else(|| items(&raw));
    let mut seen = std::collections::BTreeSet::from([answer.to_lowercase()]);
    let distractors: Vec<String> = listed
        .into_iter()
        .filter(|d| !d.is_empty() && seen.insert(d.to_lowercase()))
        .collect();
    if distractors.is_empty() {
        return Err("no distractors".into());
    }
    if distractors.len() < 2 {
        return Err("fewer than 3 options".into());
    }
    Ok(MathPreprocess {
        knowledge,
        explanation: explanation.map(|e| e.trim().to_string()).unwrap_or_default(),
        answer,
        distractors,
    })
}

pub fn render_math_preprocess_response(
    knowledge: &[String],
    explanation: &str,
    answer: &str,
    distractors: &[String],
) -> String {
    let mut out = String::from("Background Knowledge:\n");
    for k in knowledge {
        out.push_str(&format!("- {k}\n"));
    }
    out.push_str(&format!("Explanation: {explanation}\n"));
    out.push_str(&format!("Answer: {answer}\n"));
    out.push_str(&format!("Distractors: {}\n", format_options(distractors)));
    out
}
