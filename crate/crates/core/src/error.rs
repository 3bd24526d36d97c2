// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    /// A loaded artifact violates one of its invariants. `entry` names the
    /// offending record (value id, line number, layer, ...).
    #[error("validation error at {entry}: {message}")]
    Validation { entry: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("layer {layer} out of range for a model with {num_layers} layers")]
    LayerOutOfRange { layer: usize, num_layers: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("scorer failed on value {value_id}: {message}")]
    Scorer { value_id: String, message: String },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("operation not supported by this backend: {0}")]
    Unsupported(String),

    #[error("no layer reaches accuracy threshold {threshold}; best observed {best_accuracy}")]
    NoLayerQualifies { threshold: f64, best_accuracy: f64 },

    #[error("calibration failed: probability {achieved} at |epsilon| = {epsilon_max} is below target {target}")]
    CalibrationFailure {
        target: f64,
        achieved: f64,
        epsilon_max: f64,
    },

    #[error("no direction for value {0} in bank")]
    MissingDirection(String),

    #[error("direction for value {value_id} has no layer {layer}")]
    MissingLayer { value_id: String, layer: usize },

    #[error("value {value_id} has no probe for layer {layer}")]
    MissingProbe { value_id: String, layer: usize },

    #[error("prompt of {prompt_tokens} tokens plus {max_tokens} new tokens exceeds the context budget of {budget}; comment lengths: {comment_lengths:?}")]
    ContextOverflow {
        prompt_tokens: usize,
        max_tokens: usize,
        budget: usize,
        comment_lengths: Vec<usize>,
    },

    #[error("target value {0} was not among the gated values")]
    TargetNotGated(String),

    #[error("none of the {0} comments contained a parseable choice")]
    Unparseable(usize),

    #[error("option sets differ: {left:?} vs {right:?}")]
    OptionMismatch {
        left: Vec<String>,
        right: Vec<String>,
    },

    #[error("pipeline aborted at stage {stage}: {source}; partial artifacts: {partial:?}")]
    Stage {
        stage: String,
        partial: Vec<PathBuf>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn validation(entry: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            entry: entry.into(),
            message: message.into(),
        }
    }
}
