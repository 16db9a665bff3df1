//! Workspace-wide error type.
//!
//! Variants map onto the CLI exit codes: config/lookup/parameter problems
//! exit 2, budget overruns exit 3, numeric aborts exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible image or vector dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A parameter outside its accepted range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Malformed binary or text artifact.
    #[error("format error: {0}")]
    Format(String),

    /// Unknown name looked up in a registry or preset table.
    #[error("unknown name: {0}")]
    Lookup(String),

    /// Bad run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A computation would exceed its configured budget.
    #[error("budget exceeded: {0}")]
    Budget(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI. 0 is success and never produced here.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Budget(_) => 3,
            Error::Numeric(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
