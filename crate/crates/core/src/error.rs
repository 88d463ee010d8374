//! Error type shared by every module of the core crate.

use alloc::string::String;

/// Failure modes of the numerical core.
///
/// Variants map onto the error classes the pipeline distinguishes: shape
/// problems, bad labels, degenerate inputs, non-finite values, protocol
/// misuse (wrong task stage, consumed graph) and infeasible batches.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("graph state error: {0}")]
    State(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("batch composition error: {0}")]
    BatchComposition(String),
    #[error("bank integrity error: {0}")]
    BankIntegrity(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;

impl Error {
    /// Prefixes the message with where the failure happened, keeping the kind.
    pub fn context(self, prefix: impl core::fmt::Display) -> Self {
        use alloc::format;
        match self {
            Self::Dimension(m) => Self::Dimension(format!("{prefix}: {m}")),
            Self::Label(m) => Self::Label(format!("{prefix}: {m}")),
            Self::Degenerate(m) => Self::Degenerate(format!("{prefix}: {m}")),
            Self::Numeric(m) => Self::Numeric(format!("{prefix}: {m}")),
            Self::State(m) => Self::State(format!("{prefix}: {m}")),
            Self::Protocol(m) => Self::Protocol(format!("{prefix}: {m}")),
            Self::BatchComposition(m) => Self::BatchComposition(format!("{prefix}: {m}")),
            Self::BankIntegrity(m) => Self::BankIntegrity(format!("{prefix}: {m}")),
            Self::Config(m) => Self::Config(format!("{prefix}: {m}")),
        }
    }
}
