use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes surfaced by
/// the CLI exit codes: config errors exit 2, numeric aborts exit 3, failed
/// checks exit 1.
#[derive(Debug, Error)]
pub enum VitapesError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("audit error: {0}")]
    Audit(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("objective error: {0}")]
    Objective(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("inversion unsupported: {0}")]
    InversionUnsupported(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("check failure: {0}")]
    CheckFailed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, VitapesError>;

impl VitapesError {
    /// Process exit code for the CLI: 0 ok, 1 check failure, 2 config error,
    /// 3 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            VitapesError::Config(_) | VitapesError::Format(_) => 2,
            VitapesError::Numeric(_) => 3,
            VitapesError::CheckFailed(_) => 1,
            _ => 1,
        }
    }
}
