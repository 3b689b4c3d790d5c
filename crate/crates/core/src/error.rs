//! Unified error type for the library.
//!
//! Every fallible operation in this crate returns [`Error`]. Frame-indexed
//! pipeline failures wrap their cause in [`Error::Frame`] so batch callers can
//! report which frame of a clip failed without losing the underlying reason.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: dimension is zero")]
    ZeroDimension { context: &'static str },

    #[error("{context}: buffer holds {actual} values, expected {expected}")]
    BufferLength {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("pixel {index} is {value}, outside [0, 1]")]
    PixelOutOfRange { index: usize, value: f32 },

    #[error("{context}: got {actual_height}x{actual_width}, expected {expected_height}x{expected_width}")]
    DimensionMismatch {
        context: &'static str,
        expected_height: usize,
        expected_width: usize,
        actual_height: usize,
        actual_width: usize,
    },

    #[error("{context}: got {actual}, expected {expected}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("latent {context}: got {actual:?}, expected {expected:?}")]
    LatentShapeMismatch {
        context: &'static str,
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("{context}: non-finite value produced")]
    NonFinite { context: &'static str },

    #[error("clip contains no frames")]
    EmptyClip,

    #[error("foreground mask selects no pixels")]
    EmptyForeground,

    #[error("placement leaves no foreground pixel on the canvas")]
    EmptyPlacement,

    #[error("step {step} outside 1..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("step count {steps} must be at least 1")]
    InvalidStepCount { steps: usize },

    #[error("inversion depth {t_b} outside 1..={total}")]
    InvalidInversionDepth { t_b: usize, total: usize },

    #[error("attention window tau={tau}, t_b={t_b} violates 1 <= tau <= t_b <= {total}")]
    InvalidWindow {
        tau: usize,
        t_b: usize,
        total: usize,
    },

    #[error("previous-frame trajectory inverted to t_b={actual}, current window needs {expected}")]
    TrajectoryDepthMismatch { expected: usize, actual: usize },

    #[error("attention map row {row} sums to {sum}, expected 1 within 1e-6")]
    RowNotStochastic { row: usize, sum: f64 },

    #[error("attention map entry ({row}, {col}) is {value}, expected finite and >= 0")]
    AttentionValue { row: usize, col: usize, value: f64 },

    #[error("invalid configuration: {reason}")]
    ConfigInvalid { reason: String },

    #[error("backend: {message}")]
    Backend { message: String },

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: Box<image::ImageError>,
    },

    #[error("{path}: not a valid flow file: {detail}")]
    FlowFormat { path: PathBuf, detail: String },

    #[error("{path}: contains no readable entries")]
    EmptyDirectory { path: PathBuf },

    #[error("manifest: {source}")]
    Json {
        #[from]
        source: serde_json::Error,
    },

    #[error("no frame pair has a valid warp region")]
    NoValidPairs,
}

impl Error {
    /// Wraps an error with the index of the clip frame it occurred on.
    pub fn frame(index: usize, source: Error) -> Error {
        Error::Frame {
            index,
            source: Box::new(source),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Error {
        Error::Image {
            path: path.into(),
            source: Box::new(source),
        }
    }

    pub fn config(reason: impl Into<String>) -> Error {
        Error::ConfigInvalid {
            reason: reason.into(),
        }
    }

    pub fn backend(message: impl Into<String>) -> Error {
        Error::Backend {
            message: message.into(),
        }
    }
}
