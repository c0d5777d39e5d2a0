use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("TR bin {0} contains no frames")]
    EmptyBin(usize),

    #[error("requested {requested} TRs but the frames only cover {available:.3} s")]
    InsufficientFrames { requested: usize, available: f64 },

    #[error("window of {len} TRs exceeds the positional table ({max})")]
    WindowTooLong { len: usize, max: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("unknown subject {subject} (model has {subjects})")]
    UnknownSubject { subject: usize, subjects: usize },

    #[error("unknown expert {expert} (bank has {experts})")]
    UnknownExpert { expert: usize, experts: usize },

    #[error("all combined routing scores are zero")]
    DegenerateGate,

    #[error("Top-K margin stayed below tolerance for {0} attempts")]
    TieMargin(usize),

    #[error("forward cache is stale or missing")]
    StaleCache,

    #[error("schedule exhausted at step {step} of {total}")]
    ScheduleExhausted { step: usize, total: usize },

    #[error("target is constant")]
    DegenerateTarget,

    #[error("inter-subject evaluation needs at least two subjects, found {0}")]
    NeedMultipleSubjects(usize),

    #[error("no non-degenerate parcels to aggregate")]
    EmptyReport,

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }
}
