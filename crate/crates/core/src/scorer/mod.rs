//! The language model under diagnosis, seen as a scoring oracle.
//!
//! A [`LanguageModel`] returns the summed negative log-likelihood (natural
//! log) of an option continuation after a rendered prompt, and free-form
//! generations. [`Scorer`] adds templates, content-addressed caching and
//! retries on top of a backend.

mod http_backend;
mod mock;
pub mod templates;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::RecordCache;
use crate::corpus::{Fact, Query};
use crate::hashing::sha256_hex;
use crate::remedy::SynthesisStyle;
use crate::retry::RetryPolicy;

pub use http_backend::HttpBackend;
pub use mock::{MockBackend, MockScript, ScriptedGeneration, ScriptedScore};
pub use templates::{format_options, option_letter, TemplateSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend lacks logprob support")]
    NoLogprobs,
    #[error("backend timed out")]
    Timeout,
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend refused request: {0}")]
    Refused(String),
    #[error("unscripted request: {0}")]
    Unscripted(String),
    #[error("invalid backend response: {0}")]
    Invalid(String),
}

impl BackendError {
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Timeout | BackendError::Transient(_))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid scores for {query_id}: {reason}")]
    InvalidScores { query_id: String, reason: String },
}

impl ScoreError {
    /// True when the failure came from the backend rather than the request.
    pub fn is_backend(&self) -> bool {
        matches!(self, ScoreError::Backend(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRef {
    pub id: String,
    pub text: String,
}

impl From<&Fact> for KnowledgeRef {
    fn from(f: &Fact) -> Self {
        KnowledgeRef {
            id: f.fact_id.clone(),
            text: f.text.clone(),
        }
    }
}

/// One scoring or answering request. No knowledge means prior scoring,
/// knowledge present means posterior scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub query_id: String,
    pub question: String,
    pub options: Vec<String>,
    pub knowledge: Option<KnowledgeRef>,
    pub template_id: String,
}

impl ScoreRequest {
    pub fn prior(query: &Query, template_id: &str) -> Self {
        ScoreRequest {
            query_id: query.query_id.clone(),
            question: query.question.clone(),
            options: query.options.clone(),
            knowledge: None,
            template_id: template_id.to_string(),
        }
    }

    pub fn posterior(query: &Query, knowledge: KnowledgeRef, template_id: &str) -> Self {
        ScoreRequest {
            knowledge: Some(knowledge),
            ..ScoreRequest::prior(query, template_id)
        }
    }

    pub fn knowledge_id(&self) -> Option<&str> {
        self.knowledge.as_ref().map(|k| k.id.as_str())
    }
}

/// NLL and token count of one option continuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub nll: f64,
    pub tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionScores {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_id: Option<String>,
    pub nll: Vec<f64>,
    pub token_counts: Vec<u32>,
}

impl OptionScores {
    /// Per-token NLL, i.e. log-perplexity of each option.
    pub fn per_token(&self) -> Vec<f64> {
        self.nll
            .iter()
            .zip(&self.token_counts)
            .map(|(n, &t)| n / t.max(1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub query_id: String,
    pub text: String,
    pub finish_reason: String,
}

/// What a generation is for. Remote backends ignore it; the mock backend uses
/// it to fabricate well-formed responses when running on a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenerationPurpose {
    Answer { n_options: usize },
    Synthesis { n: usize, style: SynthesisStyle },
    MathPreprocess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Stable key for scripting and logs (query id, job id, ...).
    pub key: String,
    pub prompt: String,
    pub purpose: GenerationPurpose,
    /// Retry ordinal; part of the cache key so retries reach the backend.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub finish_reason: String,
}

pub trait LanguageModel: Send + Sync {
    /// Model and endpoint identity; part of every cache key.
    fn identity(&self) -> String;

    /// Scores `option_index` of `req` as a continuation of `prompt`.
    fn score_option(
        &self,
        req: &ScoreRequest,
        prompt: &str,
        option_index: usize,
    ) -> Result<TokenScore, BackendError>;

    fn generate(&self, req: &GenerationRequest) -> Result<Generation, BackendError>;
}

/// Backend plus templates, caches and retry policy.
pub struct Scorer {
    backend: Arc<dyn LanguageModel>,
    templates: TemplateSet,
    score_cache: RecordCache<TokenScore>,
    generation_cache: RecordCache<Generation>,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl Scorer {
    pub fn new(backend: Arc<dyn LanguageModel>) -> Self {
        Scorer {
            backend,
            templates: TemplateSet::default(),
            score_cache: RecordCache::in_memory(),
            generation_cache: RecordCache::in_memory(),
            retry: RetryPolicy::default(),
            max_in_flight: 4,
        }
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_caches(
        mut self,
        scores: RecordCache<TokenScore>,
        generations: RecordCache<Generation>,
    ) -> Self {
        self.score_cache = scores;
        self.generation_cache = generations;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend(&self) -> &Arc<dyn LanguageModel> {
        &self.backend
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn render(&self, req: &ScoreRequest) -> Result<String, ScoreError> {
        self.templates.render(
            &req.template_id,
            &req.question,
            &req.options,
            req.knowledge.as_ref().map(|k| k.text.as_str()),
        )
    }

    /// Content address of one option score.
    pub fn score_key(&self, prompt: &str, option: &str) -> String {
        sha256_hex([
            self.backend.identity().as_bytes(),
            prompt.as_bytes(),
            option.as_bytes(),
        ])
    }

    pub fn score_options(&self, req: &ScoreRequest) -> Result<OptionScores, ScoreError> {
        if req.options.is_empty() {
            return Err(ScoreError::InvalidRequest("no options".into()));
        }
        if let Some(k) = &req.knowledge {
            if k.text.trim().is_empty() {
                return Err(ScoreError::InvalidRequest("empty knowledge text".into()));
            }
        }
        let prompt = self.render(req)?;
        let mut nll = Vec::with_capacity(req.options.len());
        let mut token_counts = Vec::with_capacity(req.options.len());
        for (i, option) in req.options.iter().enumerate() {
            let key = self.score_key(&prompt, option);
            let score = match self.score_cache.get(&key) {
                Some(hit) => hit,
                None => {
                    let fresh = self.retry.run(
                        |_| self.backend.score_option(req, &prompt, i),
                        BackendError::is_transient,
                    )?;
                    validate_score(&req.query_id, i, &fresh)?;
                    if let Err(e) = self.score_cache.put(&key, fresh) {
                        log::warn!("score cache write failed: {e}");
                    }
                    fresh
                }
            };
            nll.push(score.nll);
            token_counts.push(score.tokens);
        }
        Ok(OptionScores {
            query_id: req.query_id.clone(),
            knowledge_id: req.knowledge_id().map(str::to_string),
            nll,
            token_counts,
        })
    }

    /// Free-form answer to the rendered question.
    pub fn generate(&self, req: &ScoreRequest) -> Result<GenerationResult, ScoreError> {
        if req.question.trim().is_empty() {
            return Err(ScoreError::InvalidRequest("empty question".into()));
        }
        let prompt = self.render(req)?;
        let g = self.generate_raw(&GenerationRequest {
            key: req.query_id.clone(),
            prompt,
            purpose: GenerationPurpose::Answer {
                n_options: req.options.len(),
            },
            attempt: 0,
        })?;
        Ok(GenerationResult {
            query_id: req.query_id.clone(),
            text: g.text,
            finish_reason: g.finish_reason,
        })
    }

    /// Generation for an already-rendered prompt, cached on
    /// (backend, prompt, attempt).
    pub fn generate_raw(&self, req: &GenerationRequest) -> Result<Generation, ScoreError> {
        if req.prompt.trim().is_empty() {
            return Err(ScoreError::InvalidRequest("empty prompt".into()));
        }
        let key = sha256_hex([
            self.backend.identity().as_bytes(),
            b"generate".as_slice(),
            req.prompt.as_bytes(),
            req.attempt.to_string().as_bytes(),
        ]);
        if let Some(hit) = self.generation_cache.get(&key) {
            return Ok(hit);
        }
        let g = self
            .retry
            .run(|_| self.backend.generate(req), BackendError::is_transient)?;
        if let Err(e) = self.generation_cache.put(&key, g.clone()) {
            log::warn!("generation cache write failed: {e}");
        }
        Ok(g)
    }
}

fn validate_score(query_id: &str, i: usize, s: &TokenScore) -> Result<(), ScoreError> {
    let reason = if !s.nll.is_finite() {
        Some(format!("option {i}: non-finite nll"))
    } else if s.nll < 0.0 {
        Some(format!("option {i}: negative nll {}", s.nll))
    } else if s.tokens == 0 {
        Some(format!("option {i}: zero tokens"))
    } else {
        None
    };
    match reason {
        Some(reason) => Err(ScoreError::InvalidScores {
            query_id: query_id.to_string(),
            reason,
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query() -> Query {
        Query::new(
            "Silver is used in cutlery. What follows?",
            vec!["It is edible".into(), "It is mildly toxic".into()],
            Some(1),
            vec![],
        )
        .unwrap()
    }

    fn scripted(q: &Query, k: Option<&str>, nll: Vec<f64>) -> ScriptedScore {
        ScriptedScore {
            query_id: q.query_id.clone(),
            knowledge_id: k.map(str::to_string),
            tokens: vec![1; nll.len()],
            nll,
        }
    }

    #[test]
    fn mock_table_passes_through() {
        let q = query();
        let mock = MockBackend::from_script(MockScript {
            scores: vec![scripted(&q, None, vec![1.0, 2.0])],
            ..Default::default()
        });
        let scorer = Scorer::new(Arc::new(mock));
        let s = scorer.score_options(&ScoreRequest::prior(&q, "plain")).unwrap();
        assert_eq!(s.nll, vec![1.0, 2.0]);
        assert_eq!(s.token_counts, vec![1, 1]);
        assert_eq!(s.knowledge_id, None);
    }

    #[test]
    fn second_request_served_from_cache() {
        let q = query();
        let mock = Arc::new(MockBackend::seeded(11));
        let scorer = Scorer::new(mock.clone());
        let req = ScoreRequest::prior(&q, "plain");
        let a = scorer.score_options(&req).unwrap();
        let calls = mock.score_calls();
        let b = scorer.score_options(&req).unwrap();
        assert_eq!(mock.score_calls(), calls);
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }

    #[test]
    fn prior_and_posterior_use_distinct_keys() {
        let q = query();
        let mock = Arc::new(MockBackend::seeded(3));
        let scorer = Scorer::new(mock.clone());
        let prior = ScoreRequest::prior(&q, "plain");
        let post = ScoreRequest::posterior(
            &q,
            KnowledgeRef {
                id: "k1".into(),
                text: "Silver is a mildly toxic element.".into(),
            },
            "plain",
        );
        let p1 = scorer.render(&prior).unwrap();
        let p2 = scorer.render(&post).unwrap();
        assert_ne!(scorer.score_key(&p1, &q.options[0]), scorer.score_key(&p2, &q.options[0]));
        scorer.score_options(&prior).unwrap();
        scorer.score_options(&post).unwrap();
        assert_eq!(mock.score_calls(), 4);
    }

    #[test]
    fn backend_without_logprobs_is_hard_error() {
        let q = query();
        let mut mock = MockBackend::seeded(1);
        mock.disable_logprobs();
        let scorer = Scorer::new(Arc::new(mock));
        let err = scorer.score_options(&ScoreRequest::prior(&q, "plain")).unwrap_err();
        assert_eq!(err.to_string(), "backend lacks logprob support");
    }

    #[test]
    fn generation_contract() {
        let q = query();
        let mock = MockBackend::from_script(MockScript {
            generations: vec![ScriptedGeneration {
                key: q.query_id.clone(),
                text: "Silver can be toxic, so the answer is (B).".into(),
            }],
            ..Default::default()
        });
        let scorer = Scorer::new(Arc::new(mock));
        let g = scorer.generate(&ScoreRequest::prior(&q, "mistral")).unwrap();
        assert!(g.text.contains("(B)"));

        let mut empty = ScoreRequest::prior(&q, "mistral");
        empty.question = "  ".into();
        assert!(matches!(scorer.generate(&empty), Err(ScoreError::InvalidRequest(_))));

        let unknown = ScoreRequest::prior(&q, "falcon");
        assert_eq!(scorer.generate(&unknown).unwrap_err().to_string(), "unknown template falcon");
    }

    #[test]
    fn unscripted_without_seed_errors() {
        let q = query();
        let scorer = Scorer::new(Arc::new(MockBackend::from_script(MockScript::default())));
        let err = scorer.score_options(&ScoreRequest::prior(&q, "plain")).unwrap_err();
        assert!(err.to_string().contains("unscripted request"), "{err}");
    }

    #[test]
    fn seeded_scores_are_stable_across_instances() {
        let q = query();
        let a = Scorer::new(Arc::new(MockBackend::seeded(5)))
            .score_options(&ScoreRequest::prior(&q, "plain"))
            .unwrap();
        let b = Scorer::new(Arc::new(MockBackend::seeded(5)))
            .score_options(&ScoreRequest::prior(&q, "plain"))
            .unwrap();
        let c = Scorer::new(Arc::new(MockBackend::seeded(6)))
            .score_options(&ScoreRequest::prior(&q, "plain"))
            .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_scores_rejected() {
        let q = query();
        let mock = MockBackend::from_script(MockScript {
            scores: vec![ScriptedScore {
                query_id: q.query_id.clone(),
                knowledge_id: None,
                nll: vec![1.0, f64::NAN],
                tokens: vec![1, 1],
            }],
            ..Default::default()
        });
        let err = Scorer::new(Arc::new(mock))
            .score_options(&ScoreRequest::prior(&q, "plain"))
            .unwrap_err();
        assert!(matches!(err, ScoreError::InvalidScores { .. }));
    }
}
