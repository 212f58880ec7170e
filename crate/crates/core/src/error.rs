use std::path::PathBuf;

use thiserror::Error;

use crate::messaging::AgentId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("class separation could not be met after {attempts} resampling attempts")]
    DegenerateGeometry { attempts: usize },

    #[error("shot count {0} is not one of 1, 2, 4, 8, 16")]
    InvalidShotCount(usize),

    #[error("class `{class}` has {available} samples, needs at least {required}")]
    InsufficientSamples {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("template `{0}` must contain exactly one `{{}}` placeholder")]
    InvalidTemplate(String),

    #[error("text encoder needs at least one token vector")]
    EmptyTokens,

    #[error("zero-norm visual feature in robust encoding")]
    DegenerateFeature,

    #[error("duplicate concept name `{0}`")]
    DuplicateConcept(String),

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("template bank is empty")]
    EmptyTemplateBank,

    #[error("no route to agent {0}")]
    Routing(AgentId),

    #[error("invalid message: {0}")]
    InvalidMessage(String),

    #[error("protocol error: missing {payload} message on edge {from}->{to}")]
    Protocol {
        from: AgentId,
        to: AgentId,
        payload: &'static str,
    },

    #[error("state of agent {state} passed to agent {agent}")]
    StateMismatch { agent: AgentId, state: AgentId },

    #[error("similarity matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("loss weight denominator must be positive, got {0}")]
    NonPositiveDenominator(f64),

    #[error("vocabulary is empty")]
    EmptyVocabulary,

    #[error("non-finite value in {term}")]
    NonFinite { term: &'static str },

    #[error("non-finite loss at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("frozen backbone changed during training: {before} -> {after}")]
    BackboneChanged { before: String, after: String },

    #[error("gradient check failed for groups: {}", .0.join(", "))]
    GradientCheck(Vec<String>),

    #[error("unknown ablation flag `{0}`")]
    UnknownFlag(String),

    #[error("unsupported format version {found} (this build reads {supported})")]
    FormatVersion { found: u32, supported: u32 },

    #[error("checksum mismatch for {}", .0.display())]
    Checksum(PathBuf),

    #[error("malformed file {}: {reason}", .path.display())]
    Malformed { path: PathBuf, reason: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used by the CLI for machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::DegenerateGeometry { .. } => "degenerate_geometry",
            Error::InvalidShotCount(_) => "invalid_shot_count",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidTemplate(_) => "invalid_template",
            Error::EmptyTokens => "empty_tokens",
            Error::DegenerateFeature => "degenerate_feature",
            Error::DuplicateConcept(_) => "duplicate_concept",
            Error::UnknownConcept(_) => "unknown_concept",
            Error::EmptyTemplateBank => "empty_template_bank",
            Error::Routing(_) => "routing",
            Error::InvalidMessage(_) => "invalid_message",
            Error::Protocol { .. } => "protocol",
            Error::StateMismatch { .. } => "state_mismatch",
            Error::NonSquare { .. } => "non_square",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::NonPositiveDenominator(_) => "non_positive_denominator",
            Error::EmptyVocabulary => "empty_vocabulary",
            Error::NonFinite { .. } => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::BackboneChanged { .. } => "backbone_changed",
            Error::GradientCheck(_) => "gradient_check",
            Error::UnknownFlag(_) => "unknown_flag",
            Error::FormatVersion { .. } => "format_version",
            Error::Checksum(_) => "checksum",
            Error::Malformed { .. } => "malformed",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// True for failures of a hard invariant rather than bad input.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(
            self,
            Error::BackboneChanged { .. } | Error::GradientCheck(_) | Error::Checksum(_)
        )
    }
}
