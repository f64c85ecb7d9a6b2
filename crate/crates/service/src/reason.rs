//! Machine-readable rejection reasons.

use serde::{Deserialize, Serialize};

/// Why a request was refused. Serialized with a `code` tag, e.g.
/// `{"code":"slot_overflow","slot":1,"size":3}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum Reason {
    MalformedRequest { message: String },
    UnknownAnnotator { annotator_id: String },
    InactiveAnnotator { annotator_id: String },
    TaskNotIssued { task_id: String },
    AnnotatorMismatch { expected: String, found: String },
    OutOfRange { aspect: String, value: u8 },
    InvalidFlags,
    UnknownImage { image_id: String },
    AlreadyRated { image_id: String },
    TooManySlots { slots: usize },
    SlotOverflow { slot: usize, size: usize },
    EmptyRanking,
    DuplicateImage { image_id: String },
    UnplacedImage { image_id: String },
    ConsistencyViolation {
        higher_id: String,
        lower_id: String,
        higher_overall: u8,
        lower_overall: u8,
    },
    TaskInProgress { task_id: String },
    SkipLimitReached { limit: usize },
    UnknownSubmission { submission_id: String },
    AlreadyReviewed { submission_id: String },
    NoGoldSet,
    NoOverlap,
    Storage { message: String },
}

impl Reason {
    pub fn code(&self) -> &'static str {
        match self {
            Reason::MalformedRequest { .. } => "malformed_request",
            Reason::UnknownAnnotator { .. } => "unknown_annotator",
            Reason::InactiveAnnotator { .. } => "inactive_annotator",
            Reason::TaskNotIssued { .. } => "task_not_issued",
            Reason::AnnotatorMismatch { .. } => "annotator_mismatch",
            Reason::OutOfRange { .. } => "out_of_range",
            Reason::InvalidFlags => "invalid_flags",
            Reason::UnknownImage { .. } => "unknown_image",
            Reason::AlreadyRated { .. } => "already_rated",
            Reason::TooManySlots { .. } => "too_many_slots",
            Reason::SlotOverflow { .. } => "slot_overflow",
            Reason::EmptyRanking => "empty_ranking",
            Reason::DuplicateImage { .. } => "duplicate_image",
            Reason::UnplacedImage { .. } => "unplaced_image",
            Reason::ConsistencyViolation { .. } => "consistency_violation",
            Reason::TaskInProgress { .. } => "task_in_progress",
            Reason::SkipLimitReached { .. } => "skip_limit_reached",
            Reason::UnknownSubmission { .. } => "unknown_submission",
            Reason::AlreadyReviewed { .. } => "already_reviewed",
            Reason::NoGoldSet => "no_gold_set",
            Reason::NoOverlap => "no_overlap",
            Reason::Storage { .. } => "storage",
        }
    }

    /// HTTP status for a rejection led by this reason.
    pub fn status(&self) -> u16 {
        match self {
            Reason::MalformedRequest { .. } => 400,
            Reason::InactiveAnnotator { .. } => 403,
            Reason::UnknownAnnotator { .. } | Reason::UnknownSubmission { .. } => 404,
            Reason::TaskNotIssued { .. }
            | Reason::TaskInProgress { .. }
            | Reason::SkipLimitReached { .. }
            | Reason::AlreadyReviewed { .. }
            | Reason::NoGoldSet => 409,
            Reason::Storage { .. } => 500,
            _ => 422,
        }
    }
}

/// A refused request: one or more reasons, most significant first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub reasons: Vec<Reason>,
}

impl Rejection {
    pub fn status(&self) -> u16 {
        self.reasons.first().map_or(400, Reason::status)
    }

    pub fn codes(&self) -> Vec<&'static str> {
        self.reasons.iter().map(Reason::code).collect()
    }
}

impl From<Reason> for Rejection {
    fn from(r: Reason) -> Self {
        Rejection { reasons: vec![r] }
    }
}

impl From<Vec<Reason>> for Rejection {
    fn from(reasons: Vec<Reason>) -> Self {
        Rejection { reasons }
    }
}
