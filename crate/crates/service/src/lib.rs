//! Annotation backend for collecting prompt annotations, image ratings and
//! slot rankings.
//!
//! Every accepted request appends one record to `annotations.log` and syncs
//! it before replying, so an acknowledged submission survives a restart.
//! Seeds are read from the service directory: `prompts.jsonl`,
//! `generations.jsonl`, and optionally `annotators.jsonl` and `gold.jsonl`.

use std::path::PathBuf;

use thiserror::Error;

mod http;
mod log;
mod reason;
mod service;

pub use http::{router, serve_with_shutdown};
pub use reason::{Reason, Rejection};
pub use service::{
    submission_id, task_id, Ack, AnnotatorProfile, AnnotatorSeed, Event, ExportBundle, Ledger, Progress,
    PromptAnnotation, PromptSubmission, QualificationRequest, QualificationResult, RankingSubmission,
    RatingSubmission, ReviewRequest, Service, ServiceConfig, SkipRequest, Stage, Task, TaskImage, Verdict,
    ANNOTATORS_FILE, DEFAULT_QUALIFICATION_THRESHOLD, DEFAULT_SKIP_CAP, GOLD_FILE, LOG_FILE,
};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Corpus(#[from] prefkit_core::corpus::CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: corrupt log record: {message}")]
    CorruptLog {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}
