//! leakscope measures what conversational-AI histories give away about their
//! authors: how often users explicitly disclose personal information, how
//! early in a history the first disclosure appears, and how much demographic
//! identity an LLM adversary can still recover once explicit disclosures are
//! filtered out.
//!
//! The pipeline stages map onto the modules here:
//!
//! - [`corpus`]: shared domain types and the canonical corpus file format
//! - [`ingest`]: chat-export and activity-log parsers
//! - [`filter`]: entity flagging plus LLM safety/taxonomy classification
//! - [`audit`]: discovery points, category distributions, leak curves
//! - [`cohort`]: analytic-cohort construction from verdicts
//! - [`gateway`]: prompt templates, endpoint clients, caching, mock oracle
//! - [`protocol`]: incremental-prefix demographic-inference runs
//! - [`eval`]: confusion matrices, baselines, context statistics
//! - [`synth`]: synthetic corpora with planted, recoverable ground truth

pub mod audit;
pub mod cohort;
pub mod corpus;
pub mod eval;
pub mod filter;
pub mod gateway;
pub mod ingest;
pub mod parallel;
pub mod protocol;
pub mod svg;
pub mod synth;

pub use corpus::{
    canonicalize_label, Attribute, DataStreamKind, DemographicProfile, Message, MessageStream,
    UserRecord,
};
