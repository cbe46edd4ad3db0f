use std::io;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Failures surfaced by the command-line entry points, each mapped to a
/// process exit code.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Io(_) | HarnessError::Format(_) => 2,
            HarnessError::Numeric(_) => 3,
            HarnessError::Check(_) => 4,
        }
    }
}

impl From<tipool::Error> for HarnessError {
    fn from(e: tipool::Error) -> Self {
        use tipool::Error as E;
        match e {
            E::Io(e) => HarnessError::Io(e),
            E::Format(m) => HarnessError::Format(m),
            E::Consistency(m) => HarnessError::Format(m),
            E::NonFinite(m) => HarnessError::Numeric(m),
            other => HarnessError::Config(other.to_string()),
        }
    }
}

impl From<toml::de::Error> for HarnessError {
    fn from(e: toml::de::Error) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<toml::ser::Error> for HarnessError {
    fn from(e: toml::ser::Error) -> Self {
        HarnessError::Format(e.to_string())
    }
}
