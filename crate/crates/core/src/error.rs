use std::fmt;

use thiserror::Error;

/// One rejected CSV line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineDiagnostic {
    /// 1-based line number in the source file (the header is line 1).
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for LineDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error: empty formula")]
    EmptyFormula,
    #[error("unknown element `{0}`")]
    UnknownElement(String),
    #[error("syntax error at position {position}: {reason}")]
    Syntax { position: usize, reason: String },
    #[error("composition has no entries")]
    EmptyComposition,
    #[error(
        "nonzero value at channel {channel}, row {row}, col {col} does not correspond to an element of that block"
    )]
    InvalidCell { channel: usize, row: usize, col: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("circular padding {pad} exceeds width {width}")]
    PadTooLarge { pad: usize, width: usize },
    #[error("batch norm needs at least 2 values per channel in train mode, got {0}")]
    DegenerateBatch(usize),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("invalid network config: {0}")]
    ConfigInvalid(String),
    #[error("invalid training config: {0}")]
    TrainConfigInvalid(String),

    #[error("{} bad line(s) in {path}:\n{}", diagnostics.len(), join_lines(diagnostics))]
    Csv { path: String, diagnostics: Vec<LineDiagnostic> },
    #[error("no records in the {0} class")]
    EmptyClass(&'static str),
    #[error("need at least 5 records to split, got {0}")]
    TooFewRecords(usize),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; sample indices {indices:?}")]
    NonFiniteLoss { epoch: usize, batch: usize, indices: Vec<usize> },

    #[error("both classes are required for ROC/AUC")]
    SingleClass,
    #[error("targets have zero variance; R-squared is undefined")]
    ZeroVariance,

    #[error("unsupported model file: {0}")]
    VersionMismatch(String),
    #[error("malformed model file: {0}")]
    ModelFormat(String),
    #[error("task mismatch: model was trained for {model}, requested {requested}")]
    TaskMismatch { model: String, requested: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join_lines(d: &[LineDiagnostic]) -> String {
    d.iter().map(|l| format!("  {l}")).collect::<Vec<_>>().join("\n")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
