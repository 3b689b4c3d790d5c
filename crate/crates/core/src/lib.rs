//! Training-free video composition over a pluggable latent-diffusion
//! backend, plus the metrics used to score the results.
//!
//! The pipeline takes a composite clip (foreground pasted over a new
//! background) and re-renders it frame by frame so the pasted material
//! blends in: each frame is partially inverted under a neutral condition,
//! then re-denoised under the edit prompt while self-attention rows covering
//! the foreground are carried over from the previous output frame; finally
//! the untouched background is restored pixel-exactly. See [`pipeline`] for
//! the orchestration entry points, [`backend`] for the adapter contract, and
//! [`metrics`] for temporal / semantic scoring.

pub mod backend;
pub mod bpi;
pub mod compose;
pub mod error;
mod exec;
pub mod frame;
pub mod ifa;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod pipeline;
pub mod schedule;
pub mod toy;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
