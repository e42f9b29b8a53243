//! Label-free diagnosis of knowledge deficiencies in language models.
//!
//! The pipeline retrieves background facts for each multiple-choice query,
//! scores the model's option distribution with and without each fact, and
//! treats large shifts (relative entropy above a threshold) as deficiencies.
//! Deficiencies are bucketed into severity groups that set a synthesis
//! budget, and the synthesized examples are exported as a training manifest
//! ordered from the mildest to the most severe deficiency.
//!
//! Modules map onto pipeline stages:
//!
//! * [`corpus`] ingests and deduplicates facts and queries.
//! * [`retrieval`] embeds text and retrieves the top-m facts per query.
//! * [`scorer`] wraps the model under diagnosis (option NLLs and generation).
//! * [`diagnose`] turns scores into distributions, relative entropy and groups.
//! * [`remedy`] plans budgets, renders synthesis prompts, parses responses and
//!   orders the curriculum.
//! * [`evalkit`] compares deficiency detectors with precision/recall/F1.
//! * [`pipeline`] and [`config`] orchestrate the stages behind the CLI.
//! * [`fixture`] generates the offline demo corpus used by the tests.

pub mod cache;
pub mod config;
pub mod corpus;
pub mod diagnose;
pub mod evalkit;
pub mod fixture;
pub mod hashing;
pub mod http;
pub mod jsonl;
pub mod parallel;
pub mod pipeline;
pub mod remedy;
pub mod retrieval;
pub mod retry;
pub mod scorer;





