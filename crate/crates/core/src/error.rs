use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is zero (or below 1e-12)")]
    ZeroNorm,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("function returned a non-finite value")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("query `{query}` references unknown tool `{tool}`")]
    DanglingTool { query: String, tool: String },
    #[error("query `{0}`: label and golden tool set disagree")]
    LabelMismatch(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("no embedding for id `{0}`")]
    MissingEmbedding(String),
    #[error("need at least {need} retrieval queries, found {found}")]
    TooSmall { need: usize, found: usize },

    #[error("query `{0}` has an empty golden tool set")]
    EmptyGoldenSet(String),
    #[error("id sets disagree: {0}")]
    IdMismatch(String),
    #[error("scene has no tools")]
    EmptyScene,
    #[error("query pool is empty")]
    EmptyPool,
    #[error("unknown transfer function `{0}`")]
    UnknownVariant(String),
    #[error("tool set is empty")]
    EmptyToolSet,
    #[error("golden set is empty")]
    EmptyGolden,

    #[error("contrastive batch needs at least 2 entries, got {0}")]
    BatchTooSmall(usize),
    #[error("slate size {m} must exceed golden count {golden}")]
    SlateTooSmall { m: usize, golden: usize },
    #[error("need {need} negatives but only {available} non-golden tools exist")]
    InsufficientNegatives { need: usize, available: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },

    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
