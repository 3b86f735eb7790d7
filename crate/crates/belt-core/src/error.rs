//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes disagree; names the first offending dimension.
    #[error("shape mismatch in {context}: dimension {dimension} expects {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        dimension: usize,
        expected: usize,
        actual: usize,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate trigger: empty support")]
    EmptyTriggerSupport,

    /// All reversed-trigger norms coincide; the MAD anomaly index is undefined.
    #[error("degenerate norm distribution: median absolute deviation is zero")]
    DegenerateNormDistribution,

    /// A class center was referenced before any clean sample of that class
    /// initialized it.
    #[error("center for class {class} is uninitialized; run a warm-up pass over clean samples first")]
    UninitializedCenter { class: usize },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// A dataset / checkpoint file could not be parsed.
    #[error("failed to load {path}: {detail} (byte offset {offset})")]
    Load {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    /// The reverse-engineering optimizer diverged even after the retry.
    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

/// Compares two shapes and reports the first differing axis.
pub fn check_same_shape(context: &'static str, expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(Error::ShapeMismatch {
            context,
            dimension: expected.len().min(actual.len()),
            expected: expected.len(),
            actual: actual.len(),
        });
    }
    for (dim, (&e, &a)) in expected.iter().zip(actual.iter()).enumerate() {
        if e != a {
            return Err(Error::ShapeMismatch {
                context,
                dimension: dim,
                expected: e,
                actual: a,
            });
        }
    }
    Ok(())
}
