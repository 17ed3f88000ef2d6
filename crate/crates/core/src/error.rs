//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),
    #[error("face index {index} out of range (n = {n})")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("disconnected mesh: {unreachable} vertices unreachable from vertex {vertex}")]
    DisconnectedMesh { vertex: usize, unreachable: usize },
    #[error("eigensolve failed: {0}")]
    EigensolveFailure(String),
    #[error("k = {k} too large for mesh with n = {n} vertices")]
    KTooLarge { k: usize, n: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("insufficient spectrum: {0}")]
    InsufficientSpectrum(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("rank deficient: smallest singular value {sigma_min:.3e}")]
    RankDeficient { sigma_min: f64 },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("infeasible assignment: {rows} rows but only {cols} columns")]
    InfeasibleAssignment { rows: usize, cols: usize },
    #[error("universe size mismatch: {0} vs {1}")]
    UniverseSizeMismatch(usize, usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("missing pair ({0}, {1})")]
    MissingPair(usize, usize),
    #[error("missing map for cycle edge ({0}, {1})")]
    MissingMap(usize, usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 config, 2 I/O, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io(_) | Error::Json(_) | Error::Parse(_) => 2,
            _ => 3,
        }
    }
}
