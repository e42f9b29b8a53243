//! Prompt templates for option scoring and answer generation.
//!
//! A template is plain text with `{question}`, `{options}` and `{knowledge}`
//! placeholders. `{knowledge}` expands to a `Knowledge: ...` line when the
//! request carries knowledge and to nothing otherwise, so prior prompts never
//! contain knowledge text.

use std::collections::BTreeMap;
use std::path::Path;

use super::ScoreError;

const BUILTIN: &[(&str, &str)] = &[
    ("plain", "{knowledge}Question: {question}\nOptions: {options}\nAnswer:"),
    ("mistral", "[INST]{knowledge}Question: {question}\nOptions: {options}[/INST]"),
    ("llama3", "user\n{knowledge}Question: {question}\nOptions: {options}\n\nassistant\n"),
    ("qwen2", "user\n{knowledge}Question: {question}\nOptions: {options}\n\nassistant\n"),
    ("gemma", "user\n{knowledge}Question: {question}\nOptions: {options}\nmodel\n"),
];

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            templates: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl TemplateSet {
    /// Built-ins overlaid with every `<id>.txt` file in `dir`.
    pub fn with_dir(dir: &Path) -> Result<Self, ScoreError> {
        let mut set = TemplateSet::default();
        let entries = std::fs::read_dir(dir)
            .map_err(|e| ScoreError::Template(format!("{}: {e}", dir.display())))?;
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = std::fs::read_to_string(&path)
                .map_err(|e| ScoreError::Template(format!("{}: {e}", path.display())))?;
            set.insert(id, text)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, id: &str, text: String) -> Result<(), ScoreError> {
        for required in ["{question}", "{options}"] {
            if !text.contains(required) {
                return Err(ScoreError::Template(format!(
                    "template {id} lacks {required}"
                )));
            }
        }
        self.templates.insert(id.to_string(), text);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&str, ScoreError> {
        self.templates
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| ScoreError::UnknownTemplate(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(
        &self,
        id: &str,
        question: &str,
        options: &[String],
        knowledge: Option<&str>,
    ) -> Result<String, ScoreError> {
        let template = self.get(id)?;
        let knowledge = knowledge
            .map(|k| format!("Knowledge: {k}\n"))
            .unwrap_or_default();
        // Single pass so placeholder-like text inside values is left alone.
        let mut out = String::with_capacity(template.len() + question.len() + 64);
        let mut rest = template;
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let tail = &rest[start..];
            let (value, len) = if tail.starts_with("{question}") {
                (question.to_string(), "{question}".len())
            } else if tail.starts_with("{options}") {
                (format_options(options), "{options}".len())
            } else if tail.starts_with("{knowledge}") {
                (knowledge.clone(), "{knowledge}".len())
            } else {
                ("{".to_string(), 1)
            };
            out.push_str(&value);
            rest = &tail[len..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Letter for an option index: 0 → 'A'. Indices past 'Z' continue into the
/// following code points and are never produced by the parsers.
pub fn option_letter(index: usize) -> char {
    char::from_u32('A' as u32 + index as u32).unwrap_or('?')
}

/// `(A) first (B) second ...`
pub fn format_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("({}) {o}", option_letter(i)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// The continuation scored for an option: the option text after a space.
pub fn continuation(option: &str) -> String {
    format!(" {option}")
}
