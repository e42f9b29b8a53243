//! Stage runner behind the CLI.
//!
//! Stages run in a fixed linear order. Each writes its files under
//! `<out>/<stage>/` atomically and appends a [`StageRecord`] to
//! `<out>/stages.jsonl`. A stage whose input hashes and output files match
//! its latest record is skipped unless forced.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::RecordCache;
use crate::config::{BackendConfig, BackendKind, PipelineConfig};
use crate::corpus::{ingest_facts, ingest_queries, CorpusStats, Fact, OptionlessQuery, Query, RecordError};
use crate::diagnose::{diagnose_all, Deficiency, DiagnoseOptions, PairFailure, PairRecord, Severity};
use crate::evalkit::{
    golden_label_detect, perplexity_detect, random_detect, re_detect, DetectionReport, DetectionRun,
};
use crate::hashing::{file_sha256, sha256_hex};
use crate::http::JsonClient;
use crate::jsonl;
use crate::remedy::{
    build_jobs, order_curriculum, plan_budgets, preprocess_math_query, synthesize, BudgetReport, JobReport,
    JobStatus, PreprocessSkip, SynthExample, SynthesisJob, SynthesisTemplates,
};
use crate::retrieval::{
    top_m, EmbedItem, Embedder, EmbeddingIndex, EmbeddingProvider, EmbeddingVector, HttpEmbedder, StubEmbedder,
};
use crate::retry::RetryPolicy;
use crate::scorer::{HttpBackend, KnowledgeRef, LanguageModel, MockBackend, MockScript, OptionScores, Scorer, TemplateSet};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const LOCK_FILE: &str = ".kdiag.lock";
pub const STAGES_FILE: &str = "stages.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{0}")]
    Validation(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("output directory {} is locked by another run (remove {LOCK_FILE} if stale)", .0.display())]
    Locked(PathBuf),
}

impl PipelineError {
    /// 1 for validation problems, 2 for backend failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Backend(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Embed,
    Retrieve,
    Diagnose,
    Plan,
    Synthesize,
    Curriculum,
    EvalDetect,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Embed,
        Stage::Retrieve,
        Stage::Diagnose,
        Stage::Plan,
        Stage::Synthesize,
        Stage::Curriculum,
        Stage::EvalDetect,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Retrieve => "retrieve",
            Stage::Diagnose => "diagnose",
            Stage::Plan => "plan",
            Stage::Synthesize => "synthesize",
            Stage::Curriculum => "curriculum",
            Stage::EvalDetect => "eval-detect",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Embed => &[Stage::Ingest],
            Stage::Retrieve => &[Stage::Ingest, Stage::Embed],
            Stage::Diagnose => &[Stage::Ingest, Stage::Retrieve],
            Stage::Plan => &[Stage::Ingest, Stage::Retrieve, Stage::Diagnose],
            Stage::Synthesize => &[Stage::Plan],
            Stage::Curriculum => &[Stage::Diagnose, Stage::Synthesize],
            Stage::EvalDetect => &[Stage::Ingest, Stage::Diagnose],
            Stage::Report => &[Stage::Ingest, Stage::Diagnose, Stage::Plan, Stage::Synthesize, Stage::Curriculum, Stage::EvalDetect],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub input_hashes: BTreeMap<String, String>,
    /// Output file name → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub output_path: PathBuf,
    /// Seconds since the Unix epoch.
    pub completed_at: u64,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    pub record: StageRecord,
}

/// Exclusive claim on an output directory, released on drop.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A math query after preprocessing, with its generated knowledge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttachedKnowledge {
    pub query_id: String,
    pub facts: Vec<Fact>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub facts: CorpusStats,
    pub fact_errors: Vec<RecordError>,
    pub queries_kept: usize,
    pub query_errors: Vec<RecordError>,
    pub optionless: usize,
    pub preprocessed: usize,
    pub preprocess_skips: Vec<PreprocessSkip>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeSource {
    Retrieved,
    Attached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeHit {
    pub fact_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSetRecord {
    pub query_id: String,
    pub source: KnowledgeSource,
    pub hits: Vec<KnowledgeHit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnerError {
    pub owner_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseSummary {
    pub queries: usize,
    pub priors: usize,
    pub pairs: usize,
    pub deficiencies: usize,
    pub flagged_queries: usize,
    pub per_group: BTreeMap<Severity, usize>,
    pub failures: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub jobs: usize,
    pub complete: usize,
    pub partial: usize,
    pub failed: usize,
    pub requested: u64,
    pub produced: u64,
    pub shortfall: u64,
}

type Outputs = Vec<(&'static str, Vec<u8>)>;

/// Subdirectory of `templates_dir` holding scoring templates (`<id>.txt`).
/// Synthesis templates sit directly in `templates_dir`.
pub const SCORING_TEMPLATES: &str = "scoring";

/// Files in `dir` and its scoring subdirectory, sorted.
fn template_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for d in [dir.to_path_buf(), dir.join(SCORING_TEMPLATES)] {
        if d != dir && !d.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&d).map_err(io_err(&d))?.flatten() {
            let p = entry.path();
            if p.is_file() {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| PipelineError::Validation(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn jsonl_bytes<T: Serialize>(records: &[T]) -> Result<Vec<u8>, PipelineError> {
    jsonl::to_string(records)
        .map(String::into_bytes)
        .map_err(|e| PipelineError::Validation(e.to_string()))
}

fn build_model(b: &BackendConfig, global_seed: u64) -> Result<Arc<dyn LanguageModel>, PipelineError> {
    match b.kind {
        BackendKind::Mock => {
            let mut script = match &b.script {
                Some(path) => jsonl::read_json::<MockScript>(path).map_err(io_err(path))?,
                None => MockScript::default(),
            };
            script.seed = b.seed.or(script.seed).or(Some(global_seed));
            if script.name.is_none() {
                script.name = b.name.clone();
            }
            Ok(Arc::new(MockBackend::from_script(script)))
        }
        BackendKind::Http => {
            let client = JsonClient::from_env(Duration::from_secs(b.timeout_secs), b.auth_env.as_deref());
            Ok(Arc::new(HttpBackend::new(
                b.endpoint.clone().unwrap_or_default(),
                b.model.clone().unwrap_or_default(),
                client,
            )))
        }
        BackendKind::Stub => Err(PipelineError::Validation("stub is an embedder kind".into())),
    }
}

fn retry_policy(b: &BackendConfig) -> RetryPolicy {
    RetryPolicy {
        retries: b.retries,
        base_delay_ms: b.retry_base_ms,
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
    _lock: OutputLock,
}

impl Pipeline {
    /// Creates the output directory and takes its lock. The config must
    /// already be validated.
    pub fn open(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        let out = cfg.paths.out_dir.clone();
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let lock = OutputLock::acquire(&out)?;
        Ok(Pipeline { cfg, out, _lock: lock })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.name())
    }

    fn records(&self) -> Result<Vec<StageRecord>, PipelineError> {
        let path = self.out.join(STAGES_FILE);
        if !path.exists() {
            return Ok(Vec::new());
        }
        jsonl::read_all(&path).map_err(io_err(&path))
    }

    fn latest(&self, stage: Stage) -> Result<Option<StageRecord>, PipelineError> {
        Ok(self.records()?.into_iter().rev().find(|r| r.stage == stage))
    }

    /// True when every output named in `record` exists with its hash.
    fn outputs_intact(&self, record: &StageRecord) -> bool {
        record.outputs.iter().all(|(name, hash)| {
            file_sha256(&self.stage_dir(record.stage).join(name)).is_ok_and(|h| &h == hash)
        })
    }

    fn input_hashes(&self, stage: Stage) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut inputs = BTreeMap::new();
        let config = serde_json::to_vec(&self.cfg).map_err(|e| PipelineError::Validation(e.to_string()))?;
        inputs.insert("config".to_string(), sha256_hex([&config[..]]));
        let mut files: Vec<(String, PathBuf)> = Vec::new();
        if stage == Stage::Ingest {
            files.push(("facts".into(), self.cfg.paths.facts.clone()));
            files.push(("queries".into(), self.cfg.paths.queries.clone()));
        }
        for (name, b) in [
            ("scorer", &self.cfg.backends.scorer),
            ("generator", &self.cfg.backends.generator),
        ] {
            if let Some(script) = &b.script {
                files.push((format!("script:{name}"), script.clone()));
            }
        }
        if let Some(dir) = &self.cfg.paths.templates_dir {
            for p in template_files(dir)? {
                files.push((format!("template:{}", p.display()), p));
            }
        }
        for (key, path) in files {
            let hash = file_sha256(&path).map_err(io_err(&path))?;
            inputs.insert(key, hash);
        }
        // nearest upstream first
        for up in stage.upstream().iter().rev() {
            let record = self
                .latest(*up)?
                .filter(|r| self.outputs_intact(r))
                .ok_or_else(|| PipelineError::Validation(format!("{stage} requires {up} output")))?;
            for (name, hash) in record.outputs {
                inputs.insert(format!("{up}/{name}"), hash);
            }
        }
        Ok(inputs)
    }

    /// Runs one stage, or skips it when inputs and outputs match the last
    /// record and `force` is off.
    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<StageOutcome, PipelineError> {
        let input_hashes = self.input_hashes(stage)?;
        if !force {
            if let Some(prev) = self.latest(stage)? {
                if prev.input_hashes == input_hashes && self.outputs_intact(&prev) {
                    log::info!("{stage}: up to date, skipping");
                    return Ok(StageOutcome {
                        stage,
                        skipped: true,
                        record: prev,
                    });
                }
            }
        }
        log::info!("{stage}: running");
        let outputs = match stage {
            Stage::Ingest => self.ingest()?,
            Stage::Embed => self.embed()?,
            Stage::Retrieve => self.retrieve()?,
            Stage::Diagnose => self.diagnose()?,
            Stage::Plan => self.plan()?,
            Stage::Synthesize => self.synthesize()?,
            Stage::Curriculum => self.curriculum()?,
            Stage::EvalDetect => self.eval_detect()?,
            Stage::Report => self.report()?,
        };
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut hashes = BTreeMap::new();
        for (name, bytes) in outputs {
            let path = dir.join(name);
            jsonl::write_atomic(&path, &bytes).map_err(io_err(&path))?;
            hashes.insert(name.to_string(), sha256_hex([&bytes[..]]));
        }
        let record = StageRecord {
            stage,
            input_hashes,
            outputs: hashes,
            output_path: dir,
            completed_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            tool_version: TOOL_VERSION.to_string(),
        };
        let stages = self.out.join(STAGES_FILE);
        let mut line = serde_json::to_string(&record).map_err(|e| PipelineError::Validation(e.to_string()))?;
        line.push('\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&stages)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(io_err(&stages))?;
        Ok(StageOutcome {
            stage,
            skipped: false,
            record,
        })
    }

    /// Every stage in order. Without `resume` each stage is recomputed.
    pub fn run_all(&self, resume: bool) -> Result<Vec<StageOutcome>, PipelineError> {
        Stage::ALL.iter().map(|s| self.run_stage(*s, !resume)).collect()
    }

    fn read<T: DeserializeOwned>(&self, stage: Stage, file: &str) -> Result<Vec<T>, PipelineError> {
        let path = self.stage_dir(stage).join(file);
        if !path.exists() {
            return Err(PipelineError::Validation(format!("requires {stage} output ({file})")));
        }
        jsonl::read_all(&path).map_err(io_err(&path))
    }

    fn read_doc<T: DeserializeOwned>(&self, stage: Stage, file: &str) -> Result<T, PipelineError> {
        let path = self.stage_dir(stage).join(file);
        if !path.exists() {
            return Err(PipelineError::Validation(format!("requires {stage} output ({file})")));
        }
        jsonl::read_json(&path).map_err(io_err(&path))
    }

    fn cache<V: Clone + Serialize + DeserializeOwned>(&self, name: &str) -> Result<RecordCache<V>, PipelineError> {
        let dir = self.cfg.cache_dir();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(name);
        RecordCache::open(&path).map_err(io_err(&path))
    }

    fn scorer_for(&self, b: &BackendConfig, prefix: &str) -> Result<Scorer, PipelineError> {
        let model = build_model(b, self.cfg.seed)?;
        let templates = match &self.cfg.paths.templates_dir {
            Some(dir) if dir.join(SCORING_TEMPLATES).is_dir() => TemplateSet::with_dir(&dir.join(SCORING_TEMPLATES))
                .map_err(|e| PipelineError::Validation(e.to_string()))?,
            _ => TemplateSet::default(),
        };
        let mut scorer = Scorer::new(model)
            .with_templates(templates)
            .with_caches(
                self.cache(&format!("{prefix}_scores.jsonl"))?,
                self.cache(&format!("{prefix}_generations.jsonl"))?,
            )
            .with_retry(retry_policy(b));
        scorer.max_in_flight = b.max_in_flight;
        Ok(scorer)
    }

    fn synthesis_templates(&self) -> Result<SynthesisTemplates, PipelineError> {
        match &self.cfg.paths.templates_dir {
            Some(dir) => SynthesisTemplates::with_dir(dir).map_err(|e| PipelineError::Validation(e.to_string())),
            None => Ok(SynthesisTemplates::default()),
        }
    }

    fn embedder(&self) -> Result<Embedder, PipelineError> {
        let b = &self.cfg.backends.embedder;
        let provider: Arc<dyn EmbeddingProvider> = match b.kind {
            BackendKind::Stub => Arc::new(StubEmbedder::new(b.dim, b.seed.unwrap_or(self.cfg.seed))),
            BackendKind::Http => {
                let client = JsonClient::from_env(Duration::from_secs(b.timeout_secs), b.auth_env.as_deref());
                Arc::new(HttpEmbedder::new(
                    b.endpoint.clone().unwrap_or_default(),
                    b.model.clone().unwrap_or_default(),
                    client,
                ))
            }
            BackendKind::Mock => return Err(PipelineError::Validation("mock is not an embedder kind".into())),
        };
        let mut embedder = Embedder::new(provider, self.cache("embeddings.jsonl")?).with_retry(retry_policy(b));
        embedder.max_in_flight = b.max_in_flight;
        Ok(embedder)
    }

    fn ingest(&self) -> Result<Outputs, PipelineError> {
        let open = |p: &Path| File::open(p).map(BufReader::new).map_err(io_err(p));
        let facts = ingest_facts(open(&self.cfg.paths.facts)?, self.cfg.retrieval.min_confidence);
        let queries = ingest_queries(open(&self.cfg.paths.queries)?);
        let mut report = IngestReport {
            facts: facts.stats,
            fact_errors: facts.errors,
            queries_kept: queries.queries.len(),
            query_errors: queries.errors,
            optionless: queries.optionless.len(),
            ..Default::default()
        };
        let mut all_queries = queries.queries;
        let mut attached = Vec::new();
        if !queries.optionless.is_empty() {
            let generator = self.scorer_for(&self.cfg.backends.generator, "generator")?;
            let templates = self.synthesis_templates()?;
            let attempts = self.cfg.remedy.max_attempts;
            let results = crate::parallel::bounded_map(&queries.optionless, generator.max_in_flight, |oq: &OptionlessQuery| {
                preprocess_math_query(oq, &generator, &templates, attempts)
            });
            let mut seen: BTreeSet<String> = all_queries.iter().map(|q| q.query_id.clone()).collect();
            for (oq, r) in queries.optionless.iter().zip(results) {
                match r {
                    Ok(pq) if seen.insert(pq.query.query_id.clone()) => {
                        let source = format!("generated:{}", pq.query.query_id);
                        let facts: Vec<Fact> = pq
                            .knowledge
                            .iter()
                            .filter_map(|k| Fact::new(k, 1.0, source.clone()))
                            .collect();
                        attached.push(AttachedKnowledge {
                            query_id: pq.query.query_id.clone(),
                            facts,
                        });
                        all_queries.push(pq.query);
                        report.preprocessed += 1;
                    }
                    Ok(_) => report.preprocess_skips.push(PreprocessSkip {
                        line: oq.line,
                        question: oq.question.clone(),
                        reason: "duplicate query".into(),
                    }),
                    Err(skip) => report.preprocess_skips.push(skip),
                }
            }
        }
        log::info!(
            "ingest: kept {} facts, {} queries ({} preprocessed)",
            facts.facts.len(),
            all_queries.len(),
            report.preprocessed
        );
        Ok(vec![
            ("facts.jsonl", jsonl_bytes(&facts.facts)?),
            ("queries.jsonl", jsonl_bytes(&all_queries)?),
            ("attached_knowledge.jsonl", jsonl_bytes(&attached)?),
            ("report.json", json_bytes(&report)?),
        ])
    }

    fn embed(&self) -> Result<Outputs, PipelineError> {
        let facts: Vec<Fact> = self.read(Stage::Ingest, "facts.jsonl")?;
        let queries: Vec<Query> = self.read(Stage::Ingest, "queries.jsonl")?;
        let attached: Vec<AttachedKnowledge> = self.read(Stage::Ingest, "attached_knowledge.jsonl")?;
        let attached_ids: BTreeSet<&str> = attached.iter().map(|a| a.query_id.as_str()).collect();
        let embedder = self.embedder()?;
        let fact_items: Vec<EmbedItem> = facts
            .iter()
            .map(|f| EmbedItem {
                owner_id: f.fact_id.clone(),
                text: f.text.clone(),
            })
            .collect();
        let query_items: Vec<EmbedItem> = queries
            .iter()
            .filter(|q| !attached_ids.contains(q.query_id.as_str()))
            .map(|q| EmbedItem {
                owner_id: q.query_id.clone(),
                text: self.cfg.retrieval.query_text.render(q),
            })
            .collect();
        let mut errors = Vec::new();
        let mut split = |items: &[EmbedItem]| -> Result<Vec<EmbeddingVector>, PipelineError> {
            let results = embedder
                .embed(items)
                .map_err(|e| PipelineError::Validation(e.to_string()))?;
            let mut ok = Vec::new();
            for (item, r) in items.iter().zip(results) {
                match r {
                    Ok(v) => ok.push(v),
                    Err(e) => errors.push(OwnerError {
                        owner_id: item.owner_id.clone(),
                        error: e.to_string(),
                    }),
                }
            }
            Ok(ok)
        };
        let fact_vectors = split(&fact_items)?;
        let query_vectors = split(&query_items)?;
        let attempted = fact_items.len() + query_items.len();
        if attempted > 0 && errors.len() == attempted {
            return Err(PipelineError::Backend(format!(
                "every embedding failed, first error: {}",
                errors[0].error
            )));
        }
        Ok(vec![
            ("facts.jsonl", jsonl_bytes(&fact_vectors)?),
            ("queries.jsonl", jsonl_bytes(&query_vectors)?),
            ("errors.jsonl", jsonl_bytes(&errors)?),
        ])
    }

    fn retrieve(&self) -> Result<Outputs, PipelineError> {
        let facts: Vec<Fact> = self.read(Stage::Ingest, "facts.jsonl")?;
        let queries: Vec<Query> = self.read(Stage::Ingest, "queries.jsonl")?;
        let attached: Vec<AttachedKnowledge> = self.read(Stage::Ingest, "attached_knowledge.jsonl")?;
        let fact_vectors: Vec<EmbeddingVector> = self.read(Stage::Embed, "facts.jsonl")?;
        let query_vectors: Vec<EmbeddingVector> = self.read(Stage::Embed, "queries.jsonl")?;
        let texts: BTreeMap<&str, &str> = facts.iter().map(|f| (f.fact_id.as_str(), f.text.as_str())).collect();
        let by_query: BTreeMap<&str, &EmbeddingVector> =
            query_vectors.iter().map(|v| (v.owner_id.as_str(), v)).collect();
        let attached: BTreeMap<&str, &AttachedKnowledge> =
            attached.iter().map(|a| (a.query_id.as_str(), a)).collect();
        let index = EmbeddingIndex::build(fact_vectors).map_err(|e| PipelineError::Validation(e.to_string()))?;
        let needs_index = queries.iter().any(|q| !attached.contains_key(q.query_id.as_str()));
        if needs_index && index.is_empty() {
            return Err(PipelineError::Validation("retrieve: the fact index is empty".into()));
        }
        let mut sets = Vec::new();
        let mut errors = Vec::new();
        for q in &queries {
            if let Some(a) = attached.get(q.query_id.as_str()) {
                sets.push(KnowledgeSetRecord {
                    query_id: q.query_id.clone(),
                    source: KnowledgeSource::Attached,
                    hits: a
                        .facts
                        .iter()
                        .map(|f| KnowledgeHit {
                            fact_id: f.fact_id.clone(),
                            text: f.text.clone(),
                            similarity: None,
                        })
                        .collect(),
                });
                continue;
            }
            let Some(v) = by_query.get(q.query_id.as_str()) else {
                errors.push(OwnerError {
                    owner_id: q.query_id.clone(),
                    error: "no query embedding".into(),
                });
                continue;
            };
            match top_m(v, &index, self.cfg.retrieval.m) {
                Ok(result) => sets.push(KnowledgeSetRecord {
                    query_id: q.query_id.clone(),
                    source: KnowledgeSource::Retrieved,
                    hits: result
                        .hits
                        .into_iter()
                        .map(|h| KnowledgeHit {
                            text: texts.get(h.fact_id.as_str()).copied().unwrap_or_default().to_string(),
                            fact_id: h.fact_id,
                            similarity: Some(h.similarity),
                        })
                        .collect(),
                }),
                Err(e) => errors.push(OwnerError {
                    owner_id: q.query_id.clone(),
                    error: e.to_string(),
                }),
            }
        }
        Ok(vec![
            ("knowledge_sets.jsonl", jsonl_bytes(&sets)?),
            ("errors.jsonl", jsonl_bytes(&errors)?),
        ])
    }

    fn knowledge_sets(&self) -> Result<Vec<KnowledgeSetRecord>, PipelineError> {
        self.read(Stage::Retrieve, "knowledge_sets.jsonl")
    }

    fn diagnose(&self) -> Result<Outputs, PipelineError> {
        let queries: Vec<Query> = self.read(Stage::Ingest, "queries.jsonl")?;
        let knowledge: BTreeMap<String, Vec<KnowledgeRef>> = self
            .knowledge_sets()?
            .into_iter()
            .map(|s| {
                let refs = s
                    .hits
                    .into_iter()
                    .map(|h| KnowledgeRef {
                        id: h.fact_id,
                        text: h.text,
                    })
                    .collect();
                (s.query_id, refs)
            })
            .collect();
        let scorer = self.scorer_for(&self.cfg.backends.scorer, "scorer")?;
        let d = &self.cfg.diagnose;
        let opts = DiagnoseOptions {
            table: d.group_table(),
            clamp_floor: d.clamp_floor,
            length_normalize: d.length_normalize,
            direction_band: d.direction_band,
            template_id: d.template.clone(),
        };
        let diagnosis = diagnose_all(&queries, &knowledge, &scorer, &opts);
        let logprob_refusal = crate::scorer::BackendError::NoLogprobs.to_string();
        if let Some(f) = diagnosis.failures.iter().find(|f| f.error == logprob_refusal) {
            return Err(PipelineError::Backend(f.error.clone()));
        }
        if diagnosis.priors.is_empty() && diagnosis.failures.iter().any(|f| f.backend) {
            return Err(PipelineError::Backend(format!(
                "no query could be scored, first error: {}",
                diagnosis.failures[0].error
            )));
        }
        if !diagnosis.failures.is_empty() {
            log::warn!("diagnose: {} scoring failures recorded", diagnosis.failures.len());
        }
        let mut per_group = BTreeMap::new();
        for def in &diagnosis.deficiencies {
            *per_group.entry(def.group).or_insert(0) += 1;
        }
        let summary = DiagnoseSummary {
            queries: queries.len(),
            priors: diagnosis.priors.len(),
            pairs: diagnosis.pairs.len(),
            deficiencies: diagnosis.deficiencies.len(),
            flagged_queries: diagnosis.flagged_queries().len(),
            per_group,
            failures: diagnosis.failures.len(),
        };
        Ok(vec![
            ("priors.jsonl", jsonl_bytes::<OptionScores>(&diagnosis.priors)?),
            ("pairs.jsonl", jsonl_bytes::<PairRecord>(&diagnosis.pairs)?),
            ("deficiencies.jsonl", jsonl_bytes::<Deficiency>(&diagnosis.deficiencies)?),
            ("failures.jsonl", jsonl_bytes::<PairFailure>(&diagnosis.failures)?),
            ("summary.json", json_bytes(&summary)?),
        ])
    }

    fn plan(&self) -> Result<Outputs, PipelineError> {
        let queries: BTreeMap<String, Query> = self
            .read::<Query>(Stage::Ingest, "queries.jsonl")?
            .into_iter()
            .map(|q| (q.query_id.clone(), q))
            .collect();
        let knowledge: BTreeMap<String, String> = self
            .knowledge_sets()?
            .into_iter()
            .flat_map(|s| s.hits.into_iter().map(|h| (h.fact_id, h.text)))
            .collect();
        let deficiencies: Vec<Deficiency> = self.read(Stage::Diagnose, "deficiencies.jsonl")?;
        let (planned, report) = plan_budgets(&deficiencies, self.cfg.remedy.expected_total);
        let styles = self.cfg.style_map().map_err(PipelineError::Validation)?;
        let (jobs, errors) = build_jobs(&planned, &queries, &knowledge, &styles, &self.synthesis_templates()?);
        log::info!(
            "plan: {} jobs, {} examples requested",
            jobs.len(),
            report.total_examples
        );
        Ok(vec![
            ("jobs.jsonl", jsonl_bytes(&jobs)?),
            ("job_errors.jsonl", jsonl_bytes(&errors)?),
            ("budget_report.json", json_bytes(&report)?),
        ])
    }

    fn synthesize(&self) -> Result<Outputs, PipelineError> {
        let jobs: Vec<SynthesisJob> = self.read(Stage::Plan, "jobs.jsonl")?;
        let generator = self.scorer_for(&self.cfg.backends.generator, "generator")?;
        let outcome = synthesize(&jobs, &generator, self.cfg.remedy.max_attempts);
        let count = |s: JobStatus| outcome.reports.iter().filter(|r| r.status == s).count();
        let summary = SynthesisSummary {
            jobs: jobs.len(),
            complete: count(JobStatus::Complete),
            partial: count(JobStatus::Partial),
            failed: count(JobStatus::Failed),
            requested: jobs.iter().map(|j| u64::from(j.n_examples)).sum(),
            produced: outcome.examples.len() as u64,
            shortfall: outcome.shortfall(),
        };
        if !jobs.is_empty() && summary.failed == jobs.len() {
            let first = outcome.reports.first().and_then(|r| r.error.clone()).unwrap_or_default();
            return Err(PipelineError::Backend(format!("every synthesis job failed, first error: {first}")));
        }
        Ok(vec![
            ("examples.jsonl", jsonl_bytes::<SynthExample>(&outcome.examples)?),
            ("job_reports.jsonl", jsonl_bytes::<JobReport>(&outcome.reports)?),
            ("summary.json", json_bytes(&summary)?),
        ])
    }

    fn curriculum(&self) -> Result<Outputs, PipelineError> {
        let examples: Vec<SynthExample> = self.read(Stage::Synthesize, "examples.jsonl")?;
        let deficiencies: Vec<Deficiency> = self.read(Stage::Diagnose, "deficiencies.jsonl")?;
        let manifest = order_curriculum(&examples, &deficiencies).map_err(|e| PipelineError::Validation(e.to_string()))?;
        Ok(vec![("manifest.jsonl", jsonl_bytes(&manifest.entries)?)])
    }

    fn eval_detect(&self) -> Result<Outputs, PipelineError> {
        let queries: Vec<Query> = self
            .read::<Query>(Stage::Ingest, "queries.jsonl")?
            .into_iter()
            .filter(|q| q.gold_label.is_some())
            .collect();
        if queries.is_empty() {
            return Err(PipelineError::Validation("eval-detect needs labeled queries".into()));
        }
        let priors: Vec<OptionScores> = self.read(Stage::Diagnose, "priors.jsonl")?;
        let deficiencies: Vec<Deficiency> = self.read(Stage::Diagnose, "deficiencies.jsonl")?;
        let e = &self.cfg.eval;
        let scorer = self.scorer_for(&self.cfg.backends.scorer, "scorer")?;
        let invalid = |err: crate::evalkit::EvalError| PipelineError::Validation(err.to_string());
        let golden = golden_label_detect(&queries, &scorer, &e.template, e.unparseable).map_err(invalid)?;
        if golden.evaluated.is_empty() {
            let reason = golden.notes.skipped.first().map(|s| s.1.clone()).unwrap_or_default();
            return Err(PipelineError::Backend(format!("golden-label run evaluated nothing: {reason}")));
        }
        let truth = golden.flagged.clone();
        let ids: Vec<String> = queries.iter().map(|q| q.query_id.clone()).collect();
        let ppl = perplexity_detect(&queries, &priors, e.perplexity_length_normalize).map_err(invalid)?;
        let random = random_detect(&ids, e.random_sample_size.unwrap_or(truth.len()), self.cfg.seed);
        let re = re_detect(&ids, &deficiencies, self.cfg.diagnose.tau);
        let runs = vec![golden, ppl, random, re];
        let report = DetectionReport::build(&runs, &truth);
        Ok(vec![
            ("runs.jsonl", jsonl_bytes::<DetectionRun>(&runs)?),
            ("detection_report.json", json_bytes(&report)?),
            ("detection_table.txt", report.to_table().into_bytes()),
        ])
    }

    fn report(&self) -> Result<Outputs, PipelineError> {
        let ingest: IngestReport = self.read_doc(Stage::Ingest, "report.json")?;
        let diag: DiagnoseSummary = self.read_doc(Stage::Diagnose, "summary.json")?;
        let budget: BudgetReport = self.read_doc(Stage::Plan, "budget_report.json")?;
        let synth: SynthesisSummary = self.read_doc(Stage::Synthesize, "summary.json")?;
        let manifest: Vec<crate::remedy::ManifestEntry> = self.read(Stage::Curriculum, "manifest.jsonl")?;
        let detection: DetectionReport = self.read_doc(Stage::EvalDetect, "detection_report.json")?;

        let mut out = String::new();
        let mut line = |s: String| {
            out.push_str(&s);
            out.push('\n');
        };
        line("# Diagnosis report".into());
        line(String::new());
        line("## Corpus".into());
        line(format!(
            "facts read {}, kept {}, below confidence {}, duplicates {}, malformed {}",
            ingest.facts.total_read,
            ingest.facts.kept,
            ingest.facts.dropped_low_confidence,
            ingest.facts.dropped_duplicate,
            ingest.facts.malformed
        ));
        line(format!(
            "queries kept {}, rejected {}, preprocessed {} of {} without options",
            ingest.queries_kept,
            ingest.query_errors.len(),
            ingest.preprocessed,
            ingest.optionless
        ));
        line(String::new());
        line("## Deficiencies".into());
        line(format!(
            "{} queries, {} scored pairs, {} deficiencies over {} queries, {} failures",
            diag.queries, diag.pairs, diag.deficiencies, diag.flagged_queries, diag.failures
        ));
        line(String::new());
        line("| group | deficiencies | examples |".into());
        line("|---|---:|---:|".into());
        for (group, totals) in &budget.per_group {
            line(format!("| {group} | {} | {} |", totals.deficiencies, totals.examples));
        }
        line(format!("| total | {} | {} |", budget.total_deficiencies, budget.total_examples));
        for w in &budget.warnings {
            line(format!("\nwarning: {w}"));
        }
        line(String::new());
        line("## Synthesis".into());
        line(format!(
            "{} jobs ({} complete, {} partial, {} failed), {} of {} examples, manifest has {} entries",
            synth.jobs, synth.complete, synth.partial, synth.failed, synth.produced, synth.requested, manifest.len()
        ));
        line(String::new());
        line("## Detection".into());
        line(format!("truth set {} of {} evaluated queries", detection.truth_size, detection.evaluated));
        line(String::new());
        line("```".into());
        out.push_str(&detection.to_table());
        out.push_str("```\n");
        Ok(vec![("report.md", out.into_bytes())])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>(), Ok(s));
            assert_eq!(serde_json::to_value(s).unwrap(), s.name());
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn upstream_only_points_backwards() {
        for s in Stage::ALL {
            assert!(s.upstream().iter().all(|u| u < &s));
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Backend("x".into()).exit_code(), 2);
        assert_eq!(PipelineError::Validation("x".into()).exit_code(), 1);
        assert_eq!(PipelineError::Config(vec![]).exit_code(), 1);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let first = OutputLock::acquire(dir.path()).unwrap();
        assert!(matches!(OutputLock::acquire(dir.path()), Err(PipelineError::Locked(_))));
        drop(first);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }
}
