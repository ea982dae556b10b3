use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("unsupported trace schema version {found} (expected {expected})")]
    SchemaVersionMismatch { found: u64, expected: u64 },

    #[error("exit of `{func}` at ts={ts} on pid={pid} tid={tid} has no matching entry")]
    ExitWithoutEntry {
        func: String,
        pid: u64,
        tid: u64,
        ts: u64,
    },

    #[error("{relation}: example does not fit relation arity ({reason})")]
    ArityMismatch { relation: String, reason: String },

    #[error("cannot derive conditions from an empty example")]
    EmptyExample,

    #[error("precondition deduction needs at least one passing example")]
    NoPassingExamples,

    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid invariant file: {0}")]
    InvariantFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Non-fatal conditions noticed while reading or checking a trace.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Warning {
    pub kind: WarningKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningKind {
    /// The stream ended with API calls still open.
    IncompleteStream,
    /// A record arrived for a step whose checks had already fired.
    LateRecord,
    EmptyTrace,
    BudgetExhausted,
}

impl Warning {
    pub fn new(kind: WarningKind, message: impl Into<String>) -> Self {
        Warning {
            kind,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}
