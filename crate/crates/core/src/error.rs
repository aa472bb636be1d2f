use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PersonaError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid persona: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate input: zero-norm vector")]
    DegenerateInput,
    #[error("pearson needs at least 2 elements, got {0}")]
    TooShort(usize),
    #[error("document index {index} out of range for corpus of {len}")]
    DocOutOfRange { index: usize, len: usize },
}

/// Failures from any model-backed provider (generator, reviewer, embedder,
/// scorer, comparator).
#[derive(Debug, Error)]
pub enum ProviderError {
    /// Transient; the retry policy may try again.
    #[error("retriable provider error: {0}")]
    Retriable(String),
    #[error("provider error: {0}")]
    Fatal(String),
    #[error("provider returned invalid output: {0}")]
    Validation(String),
    #[error("could not parse completion: {message}")]
    Generation { message: String, raw: String },
    #[error("missing API key: set {0}")]
    MissingApiKey(&'static str),
}

impl ProviderError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ProviderError::Retriable(_))
    }
}

#[derive(Debug, Error)]
pub enum DistributionError {
    #[error("distribution validation failed: {0}")]
    Validation(String),
    #[error("unknown attribute {dimension}.{attribute}")]
    UnknownAttribute {
        dimension: String,
        attribute: String,
    },
    #[error("could not parse distribution file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("lexicon is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One configuration problem, addressed by its dotted field path.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration invalid ({} violation(s))", .0.len())]
    Config(Vec<Violation>),
    #[error("{0}")]
    Validation(String),
    #[error("stage {stage} requires {}, which does not exist", .missing.display())]
    Dependency {
        stage: &'static str,
        missing: PathBuf,
    },
    #[error("refusing to overwrite {} (use --force)", .0.display())]
    WouldOverwrite(PathBuf),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Persona(#[from] PersonaError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code for the CLI: 2 validation, 3 dependency, 4 provider, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Validation(_)
            | PipelineError::Distribution(DistributionError::Validation(_))
            | PipelineError::Distribution(DistributionError::UnknownAttribute { .. })
            | PipelineError::Persona(PersonaError::Invalid(_))
            | PipelineError::Persona(PersonaError::Integrity(_)) => 2,
            PipelineError::Dependency { .. } => 3,
            PipelineError::Provider(_) => 4,
            _ => 1,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        PipelineError::Io {
            context: context.into(),
            source,
        }
    }
}
