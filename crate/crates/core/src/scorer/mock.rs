//! Deterministic offline backend.
//!
//! Scores and generations come from an explicit script first. Anything the
//! script does not cover is derived from a SHA-256 of `(seed, request, ...)`
//! when a seed is set, and is an error otherwise. No ambient randomness is
//! used, so results are identical across processes and machines.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    BackendError, Generation, GenerationPurpose, GenerationRequest, LanguageModel, ScoreRequest,
    TokenScore,
};
use crate::hashing::hash_u64;
use crate::remedy::{render_math_preprocess_response, render_scaffold, ParsedExample, SynthesisStyle};
use crate::scorer::templates::option_letter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedScore {
    pub query_id: String,
    #[serde(default)]
    pub knowledge_id: Option<String>,
    pub nll: Vec<f64>,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedGeneration {
    pub key: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub scores: Vec<ScriptedScore>,
    #[serde(default)]
    pub generations: Vec<ScriptedGeneration>,
}

/// (query id, knowledge id) → (per-option NLL, token counts).
type ScoreTable = HashMap<(String, Option<String>), (Vec<f64>, Vec<u32>)>;

pub struct MockBackend {
    name: String,
    seed: Option<u64>,
    scores: ScoreTable,
    generations: HashMap<String, String>,
    logprobs: bool,
    score_calls: AtomicUsize,
    generate_calls: AtomicUsize,
}

impl MockBackend {
    pub fn from_script(script: MockScript) -> Self {
        let scores = script
            .scores
            .into_iter()
            .map(|s| ((s.query_id, s.knowledge_id), (s.nll, s.tokens)))
            .collect();
        let generations = script
            .generations
            .into_iter()
            .map(|g| (g.key, g.text))
            .collect();
        MockBackend {
            name: script.name.unwrap_or_else(|| "mock".to_string()),
            seed: script.seed,
            scores,
            generations,
            logprobs: true,
            score_calls: AtomicUsize::new(0),
            generate_calls: AtomicUsize::new(0),
        }
    }

    pub fn seeded(seed: u64) -> Self {
        MockBackend::from_script(MockScript {
            seed: Some(seed),
            ..Default::default()
        })
    }

    /// Makes every scoring call fail the way a generation-only server does.
    pub fn disable_logprobs(&mut self) {
        self.logprobs = false;
    }

    /// Number of `score_option` calls that reached the backend.
    pub fn score_calls(&self) -> usize {
        self.score_calls.load(Ordering::SeqCst)
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls.load(Ordering::SeqCst)
    }

    fn seed(&self, what: &str) -> Result<u64, BackendError> {
        self.seed
            .ok_or_else(|| BackendError::Unscripted(what.to_string()))
    }
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl LanguageModel for MockBackend {
    fn identity(&self) -> String {
        match self.seed {
            Some(s) => format!("mock/{}/{s}", self.name),
            None => format!("mock/{}", self.name),
        }
    }

    fn score_option(
        &self,
        req: &ScoreRequest,
        _prompt: &str,
        option_index: usize,
    ) -> Result<TokenScore, BackendError> {
        self.score_calls.fetch_add(1, Ordering::SeqCst);
        if !self.logprobs {
            return Err(BackendError::NoLogprobs);
        }
        let key = (req.query_id.clone(), req.knowledge.as_ref().map(|k| k.id.clone()));
        if let Some((nll, tokens)) = self.scores.get(&key) {
            return match (nll.get(option_index), tokens.get(option_index)) {
                (Some(&nll), Some(&tokens)) => Ok(TokenScore { nll, tokens }),
                _ => Err(BackendError::Invalid(format!(
                    "script for {} has no option {option_index}",
                    req.query_id
                ))),
            };
        }
        let seed = self.seed(&format!("score {} option {option_index}", req.query_id))?;
        let option = req.options.get(option_index).map(String::as_str).unwrap_or("");
        let seed_bytes = seed.to_le_bytes();
        let s = &seed_bytes[..];
        // Seeded scores hash the query id (question and options) and the
        // knowledge text, both of which the rendered prompt fixes.
        let core = req.query_id.as_bytes();
        let base = 0.3 + 2.7 * unit(hash_u64([s, b"prior", core, option.as_bytes()]));
        // Knowledge shifts each option by up to a per-pair strength; squaring
        // the strength makes small shifts common and large ones rare.
        let nll = match &req.knowledge {
            None => base,
            Some(k) => {
                let strength = 2.5 * unit(hash_u64([s, b"strength", core, k.text.as_bytes()])).powi(2);
                let jitter = unit(hash_u64([s, b"shift", core, k.text.as_bytes(), option.as_bytes()]));
                (base + (2.0 * jitter - 1.0) * strength).max(0.01)
            }
        };
        let t = hash_u64([s, b"tokens", option.as_bytes()]);
        Ok(TokenScore {
            nll,
            tokens: 1 + (t % 6) as u32,
        })
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Generation, BackendError> {
        self.generate_calls.fetch_add(1, Ordering::SeqCst);
        if let Some(text) = self.generations.get(&req.key) {
            return Ok(Generation {
                text: text.clone(),
                finish_reason: "stop".into(),
            });
        }
        let seed = self.seed(&format!("generation {}", req.key))?;
        let seed_bytes = seed.to_le_bytes();
        let h = hash_u64([&seed_bytes[..], b"generate", req.prompt.as_bytes()]);
        let text = match &req.purpose {
            GenerationPurpose::Answer { n_options } => {
                let pick = (h % (*n_options).max(1) as u64) as usize;
                format!(
                    "Let me reason about each option step by step. The answer is ({}).",
                    option_letter(pick)
                )
            }
            GenerationPurpose::Synthesis { n, style } => {
                render_scaffold(&fabricate_examples(h, *n, *style), *style)
            }
            GenerationPurpose::MathPreprocess => {
                let base = 2 + (h % 40) as i64;
                render_math_preprocess_response(
                    &[
                        "Addition combines quantities into a total.".to_string(),
                        "Multiplication is repeated addition.".to_string(),
                        "A price times a quantity gives a cost.".to_string(),
                        "Subtracting a part from a whole leaves the remainder.".to_string(),
                    ],
                    "Multiply the unit price by the count, then add the fee.",
                    &format!("{base}"),
                    &[format!("{}", base + 3), format!("{}", base + 7), format!("{}", base + 11)],
                )
            }
        };
        Ok(Generation {
            text,
            finish_reason: "stop".into(),
        })
    }
}

/// Well-formed examples derived from a hash, `n` of them.
fn fabricate_examples(h: u64, n: usize, style: SynthesisStyle) -> Vec<ParsedExample> {
    (0..n)
        .map(|i| {
            let tag = format!("{:08x}", (h.rotate_left(i as u32 * 7) ^ i as u64) as u32);
            let answer_index = ((h >> (i % 32)) % 3) as usize;
            match style {
                SynthesisStyle::Reasoning => ParsedExample {
                    question: format!("In scenario {tag}, which outcome is most plausible?"),
                    options: vec![
                        format!("The first outcome in case {tag}"),
                        format!("The second outcome in case {tag}"),
                        format!("The third outcome in case {tag}"),
                    ],
                    answer_index,
                    explanation: format!("The underlying fact implies outcome {} in case {tag}.", answer_index + 1),
                },
                SynthesisStyle::Math => {
                    let base = 3 + ((h >> (i % 40)) % 50) as i64;
                    let mut options = vec![
                        format!("${}", base * 2 - 2),
                        format!("${}", base * 2 + 1),
                        format!("${}", base * 2 + 3),
                    ];
                    options[answer_index] = format!("${}", base * 2);
                    ParsedExample {
                        question: format!("Case {tag}: two items cost ${base} each. What is the total?"),
                        options,
                        answer_index,
                        explanation: format!("2 x {base} = {}.", base * 2),
                    }
                }
            }
        })
        .collect()
}
