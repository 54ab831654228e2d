use thiserror::Error;

/// Errors produced by the cache pipeline and its file formats.
///
/// Variants split into two families: caller mistakes ([`Error::Usage`]) and
/// bad input data (everything else). [`Error::exit_code`] maps them onto the
/// CLI contract.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("malformed input at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("unsupported {what} version: expected {expected}, found {found}")]
    Version {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }

    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_))
    }

    /// Process exit code: 1 for usage errors, 2 for data errors.
    pub fn exit_code(&self) -> i32 {
        if self.is_usage() {
            1
        } else {
            2
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}
