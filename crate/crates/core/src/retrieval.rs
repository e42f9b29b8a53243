//! Dense retrieval of facts for queries.
//!
//! Vectors are L2-normalized when they enter the system, so cosine similarity
//! is a plain dot product. Scoring is exhaustive; ties are broken by owner id
//! so results are reproducible.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::cache::RecordCache;
use crate::corpus::{Fact, Query};
use crate::hashing::{hash_u64, sha256_hex};
use crate::http::{HttpError, JsonClient};
use crate::parallel::bounded_map;
use crate::retry::RetryPolicy;

/// Tolerance for the unit-norm invariant on stored vectors.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("provider returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("cannot embed {0}")]
    InvalidVector(String),
    #[error("m must be at least 1")]
    ZeroM,
    #[error("empty fact index")]
    EmptyIndex,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("transient provider error: {0}")]
    Transient(String),
    #[error("provider error: {0}")]
    Fatal(String),
}

impl From<HttpError> for ProviderError {
    fn from(e: HttpError) -> Self {
        if e.is_transient() {
            ProviderError::Transient(e.to_string())
        } else {
            ProviderError::Fatal(e.to_string())
        }
    }
}

/// Source of raw (not necessarily normalized) embeddings.
pub trait EmbeddingProvider: Send + Sync {
    /// Identity folded into cache keys; two providers with the same id must
    /// return the same vectors.
    fn id(&self) -> String;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub owner_id: String,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalizes `values` to unit length. Fails on empty, non-finite or zero vectors.
    pub fn normalized(owner_id: impl Into<String>, values: Vec<f64>) -> Result<Self, RetrievalError> {
        let owner_id = owner_id.into();
        if values.is_empty() {
            return Err(RetrievalError::InvalidVector(format!("{owner_id}: empty vector")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::InvalidVector(format!("{owner_id}: non-finite value")));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(RetrievalError::InvalidVector(format!("{owner_id}: zero vector")));
        }
        Ok(EmbeddingVector {
            owner_id,
            dim: values.len(),
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Immutable set of unit vectors sharing one dimension.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingIndex {
    dim: usize,
    entries: Vec<EmbeddingVector>,
}

impl EmbeddingIndex {
    pub fn build(entries: Vec<EmbeddingVector>) -> Result<Self, RetrievalError> {
        let dim = entries.first().map(|e| e.dim).unwrap_or(0);
        for e in &entries {
            if e.dim != dim || e.values.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    got: e.values.len(),
                });
            }
            if (e.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(RetrievalError::InvalidVector(format!(
                    "{}: not unit-normalized",
                    e.owner_id
                )));
            }
        }
        Ok(EmbeddingIndex { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[EmbeddingVector] {
        &self.entries
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub fact_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub hits: Vec<Hit>,
    pub m: usize,
    /// Set when the index had no entries.
    #[serde(default)]
    pub empty_index: bool,
}

/// Higher similarity first, then ascending id. Similarities are finite, and
/// `-0.0` must tie with `0.0`, so this is not `total_cmp`.
fn rank(a: &Hit, b: &Hit) -> Ordering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.fact_id.cmp(&b.fact_id))
}

/// The `m` most similar index entries to `query`.
pub fn top_m(
    query: &EmbeddingVector,
    index: &EmbeddingIndex,
    m: usize,
) -> Result<RetrievalResult, RetrievalError> {
    if m == 0 {
        return Err(RetrievalError::ZeroM);
    }
    if index.is_empty() {
        return Ok(RetrievalResult {
            query_id: query.owner_id.clone(),
            hits: Vec::new(),
            m,
            empty_index: true,
        });
    }
    if query.dim != index.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: index.dim(),
            got: query.dim,
        });
    }
    let mut scored: Vec<Hit> = index
        .entries()
        .iter()
        .map(|e| Hit {
            fact_id: e.owner_id.clone(),
            similarity: dot(&query.values, &e.values),
        })
        .collect();
    let k = m.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank);
        scored.truncate(k);
    }
    scored.sort_by(rank);
    Ok(RetrievalResult {
        query_id: query.owner_id.clone(),
        hits: scored,
        m,
        empty_index: false,
    })
}

/// Deterministic offline provider: hashed bag of words, seeded.
///
/// Each lowercase alphanumeric token adds a signed unit to one bucket chosen by
/// hashing `(seed, token)`. Texts sharing words land near each other, which
/// keeps fixture retrieval meaningful without a model.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl StubEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        StubEmbedder { dim, seed }
    }

    fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let seed = self.seed.to_le_bytes();
        for token in text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = hash_u64([&seed[..], token.as_bytes()]);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        v
    }
}

impl EmbeddingProvider for StubEmbedder {
    fn id(&self) -> String {
        format!("stub-bow/{}/{}", self.dim, self.seed)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Remote provider speaking `{"texts": [...]}` → `{"vectors": [[...]]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    pub endpoint: String,
    pub model: String,
    client: JsonClient,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, client: JsonClient) -> Self {
        HttpEmbedder {
            endpoint: endpoint.into(),
            model: model.into(),
            client,
        }
    }
}

#[derive(Deserialize)]
struct VectorsResponse {
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn id(&self) -> String {
        format!("http/{}/{}", self.endpoint, self.model)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let body = json!({ "texts": texts, "model": self.model });
        let value = self.client.post(&self.endpoint, &body)?;
        let resp: VectorsResponse = serde_json::from_value(value)
            .map_err(|e| ProviderError::Fatal(format!("bad embedding response: {e}")))?;
        Ok(resp.vectors)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CachedEmbedding {
    pub owner_id: String,
    pub dim: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EmbedItem {
    pub owner_id: String,
    pub text: String,
}

/// Provider plus cache, retries and batching.
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: RecordCache<CachedEmbedding>,
    pub retry: RetryPolicy,
    pub batch_size: usize,
    pub max_in_flight: usize,
    calls: std::sync::atomic::AtomicUsize,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, cache: RecordCache<CachedEmbedding>) -> Self {
        Embedder {
            provider,
            cache,
            retry: RetryPolicy::default(),
            batch_size: 64,
            max_in_flight: 4,
            calls: Default::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Number of provider batch calls issued so far.
    pub fn provider_calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::Relaxed)
    }

    fn cache_key(&self, text: &str) -> String {
        sha256_hex([self.provider.id().as_bytes(), text.as_bytes()])
    }

    /// Embeds every item. The outer error is reserved for batch-level
    /// invariant violations (dimension disagreement); provider failures that
    /// survive retries surface per item.
    pub fn embed(
        &self,
        items: &[EmbedItem],
    ) -> Result<Vec<Result<EmbeddingVector, RetrievalError>>, RetrievalError> {
        let mut results: Vec<Option<Result<EmbeddingVector, RetrievalError>>> = vec![None; items.len()];
        let mut pending: Vec<usize> = Vec::new();
        let mut pending_texts: HashMap<&str, ()> = HashMap::new();
        for (i, item) in items.iter().enumerate() {
            if let Some(hit) = self.cache.get(&self.cache_key(&item.text)) {
                results[i] = Some(Ok(EmbeddingVector {
                    owner_id: item.owner_id.clone(),
                    dim: hit.dim,
                    values: hit.values,
                }));
            } else {
                pending.push(i);
                pending_texts.insert(item.text.as_str(), ());
            }
        }
        // Unique texts only; repeated texts within a call resolve from one vector.
        let mut unique: Vec<&str> = Vec::new();
        for &i in &pending {
            let t = items[i].text.as_str();
            if pending_texts.remove(t).is_some() {
                unique.push(t);
            }
        }
        let chunks: Vec<Vec<String>> = unique
            .chunks(self.batch_size.max(1))
            .map(|c| c.iter().map(|s| s.to_string()).collect())
            .collect();
        let outcomes = bounded_map(&chunks, self.max_in_flight, |chunk| {
            self.retry.run(
                |_| {
                    self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    self.provider.embed_batch(chunk)
                },
                |e| matches!(e, ProviderError::Transient(_)),
            )
        });

        let mut fresh: HashMap<String, Result<EmbeddingVector, RetrievalError>> = HashMap::new();
        let mut dim: Option<usize> = results
            .iter()
            .flatten()
            .filter_map(|r| r.as_ref().ok())
            .map(|v| v.dim)
            .next();
        for (chunk, outcome) in chunks.iter().zip(outcomes) {
            match outcome {
                Ok(vectors) => {
                    if vectors.len() != chunk.len() {
                        return Err(RetrievalError::CountMismatch {
                            expected: chunk.len(),
                            got: vectors.len(),
                        });
                    }
                    for (text, raw) in chunk.iter().zip(vectors) {
                        match dim {
                            Some(d) if d != raw.len() => {
                                return Err(RetrievalError::DimensionMismatch {
                                    expected: d,
                                    got: raw.len(),
                                })
                            }
                            _ => dim = Some(raw.len()),
                        }
                        let v = EmbeddingVector::normalized(String::new(), raw);
                        if let Ok(v) = &v {
                            let _ = self
                                .cache
                                .put(
                                    &self.cache_key(text),
                                    CachedEmbedding {
                                        owner_id: String::new(),
                                        dim: v.dim,
                                        values: v.values.clone(),
                                    },
                                )
                                .map_err(|e| log::warn!("embedding cache write failed: {e}"));
                        }
                        fresh.insert(text.clone(), v);
                    }
                }
                Err(e) => {
                    for text in chunk {
                        fresh.insert(text.clone(), Err(RetrievalError::Provider(e.to_string())));
                    }
                }
            }
        }
        for i in pending {
            let item = &items[i];
            let r = match fresh.get(item.text.as_str()) {
                Some(Ok(v)) => Ok(EmbeddingVector {
                    owner_id: item.owner_id.clone(),
                    dim: v.dim,
                    values: v.values.clone(),
                }),
                Some(Err(RetrievalError::InvalidVector(msg))) => Err(RetrievalError::InvalidVector(
                    format!("{}{msg}", item.owner_id),
                )),
                Some(Err(e)) => Err(e.clone()),
                None => Err(RetrievalError::Provider("no vector returned".into())),
            };
            results[i] = Some(r);
        }
        Ok(results.into_iter().map(|r| r.expect("every item resolved")).collect())
    }
}

/// Which query text is embedded for retrieval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryText {
    #[default]
    Question,
    QuestionWithOptions,
}

impl QueryText {
    pub fn render(&self, q: &Query) -> String {
        match self {
            QueryText::Question => q.question.clone(),
            QueryText::QuestionWithOptions => format!("{} {}", q.question, q.options.join(" ")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeSets {
    pub sets: BTreeMap<String, RetrievalResult>,
    pub errors: Vec<(String, RetrievalError)>,
}

impl KnowledgeSets {
    pub fn fact_ids(&self, query_id: &str) -> Vec<String> {
        self.sets
            .get(query_id)
            .map(|r| r.hits.iter().map(|h| h.fact_id.clone()).collect())
            .unwrap_or_default()
    }
}

/// Embeds facts into an index. Facts whose embedding fails are left out
/// (logged), the rest are indexed.
pub fn build_index(facts: &[Fact], embedder: &Embedder) -> Result<EmbeddingIndex, RetrievalError> {
    let items: Vec<EmbedItem> = facts
        .iter()
        .map(|f| EmbedItem {
            owner_id: f.fact_id.clone(),
            text: f.text.clone(),
        })
        .collect();
    let mut entries = Vec::with_capacity(items.len());
    for r in embedder.embed(&items)? {
        match r {
            Ok(v) => entries.push(v),
            Err(e) => log::warn!("fact left out of index: {e}"),
        }
    }
    EmbeddingIndex::build(entries)
}

/// Retrieves up to `m` fact ids for each query. Per-query failures are
/// collected without aborting the batch.
pub fn build_knowledge_sets(
    queries: &[Query],
    index: &EmbeddingIndex,
    embedder: &Embedder,
    m: usize,
    query_text: QueryText,
) -> Result<KnowledgeSets, RetrievalError> {
    if m == 0 {
        return Err(RetrievalError::ZeroM);
    }
    let mut out = KnowledgeSets::default();
    if queries.is_empty() {
        return Ok(out);
    }
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let items: Vec<EmbedItem> = queries
        .iter()
        .map(|q| EmbedItem {
            owner_id: q.query_id.clone(),
            text: query_text.render(q),
        })
        .collect();
    let vectors = embedder.embed(&items)?;
    for (q, v) in queries.iter().zip(vectors) {
        match v.and_then(|v| top_m(&v, index, m)) {
            Ok(r) => {
                out.sets.insert(q.query_id.clone(), r);
            }
            Err(e) => out.errors.push((q.query_id.clone(), e)),
        }
    }
    Ok(out)
}

/// Convenience wrapper: index the facts and retrieve in one call.
pub fn retrieve_for_queries(
    queries: &[Query],
    facts: &[Fact],
    embedder: &Embedder,
    m: usize,
    query_text: QueryText,
) -> Result<KnowledgeSets, RetrievalError> {
    if facts.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let index = build_index(facts, embedder)?;
    build_knowledge_sets(queries, &index, embedder, m, query_text)
}
