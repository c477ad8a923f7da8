use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("causality violation: event at t={event_time} scheduled while clock is {clock}")]
    CausalityViolation { event_time: f64, clock: f64 },

    #[error("run_until({t_end}) is earlier than the clock ({clock})")]
    TimeReversal { t_end: f64, clock: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown machine id `{0}` in production status")]
    UnknownMachine(String),

    #[error("position ({x}, {y}) is outside the layout bounds")]
    OutOfBounds { x: f64, y: f64 },

    #[error("no samples available: {0}")]
    EmptySamples(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("over-allocation: {allocated} PRBs requested of {available}")]
    OverAllocation { allocated: u32, available: u32 },

    #[error("recent QoS history is empty")]
    EmptyHistory,

    #[error("trace does not cover [{from}, {to}]")]
    InsufficientCoverage { from: f64, to: f64 },

    #[error("k = {k} exceeds the {available} available entries")]
    KTooLarge { k: usize, available: usize },

    #[error("decide() called while a transfer is in progress")]
    TransferInProgress,

    #[error("event log is not time-ordered at entry {0}")]
    UnorderedLog(usize),

    #[error("granularity {g} does not divide {total} PRBs")]
    Granularity { g: u32, total: u32 },

    #[error("Q-table exceeded {0} distinct observation keys")]
    StateSpaceOverflow(usize),

    #[error("incompatible encodings: {0}")]
    IncompatibleEncoding(String),

    #[error("reliability undefined: no non-empty windows")]
    NoWindows,

    #[error("anchors are collinear; trilateration is rank deficient")]
    CollinearAnchors,

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("config: {0}")]
    Config(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid scenario:\n{}", join_lines(.0))]
    Validation(Vec<crate::config::Diagnostic>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn join_lines(d: &[crate::config::Diagnostic]) -> String {
    d.iter().map(|x| format!("  {x}")).collect::<Vec<_>>().join("\n")
}
