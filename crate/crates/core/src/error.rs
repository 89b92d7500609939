use std::fmt;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Where a training run stopped after the loss blew up.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    /// 1-based step index at which the loss became non-finite or exceeded the threshold.
    pub step: usize,
    /// The offending loss value (may be NaN or infinite).
    pub loss: f64,
    /// Last loss that was finite and under the threshold, if any step got that far.
    pub last_finite_loss: Option<f64>,
}

impl fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "diverged at step {} (loss {})", self.step, self.loss)?;
        match self.last_finite_loss {
            Some(l) => write!(f, ", last finite loss {l}"),
            None => write!(f, ", no finite loss recorded"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training {0}")]
    Diverged(DivergenceReport),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
