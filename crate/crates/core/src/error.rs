use thiserror::Error;

/// Errors raised by the model, sampler and experiment code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("exact evaluation is intractable: smallest layer has {units} units, cap is {cap}")]
    Intractable { units: usize, cap: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged at update {update}: {reason}")]
    Diverged { update: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
