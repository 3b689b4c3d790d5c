//! The denoiser abstraction.
//!
//! A [`DenoiserBackend`] bundles everything the pipeline needs from a latent
//! diffusion model: the pixel/latent codec, text conditioning, per-step noise
//! prediction, and a catalog of the attention layers it exposes. Adapters for
//! real models implement this trait; the crate ships [`crate::toy::ToyBackend`]
//! as a fast deterministic stand-in for tests and benchmarks.
//!
//! # Adapter contract
//!
//! * `encode`/`decode` may change spatial dimensions and channel count; the
//!   pipeline treats latent shapes as backend-owned. [`BackendInfo`] declares
//!   the codec round-trip tolerance so callers know what reconstruction
//!   accuracy to expect.
//! * `predict_noise` must be deterministic for equal inputs when `info()`
//!   declares `deterministic: true`. The pipeline's reproducibility
//!   guarantees only hold over deterministic backends.
//! * When a hook is passed, the backend must invoke it once per cataloged
//!   attention layer per forward pass, handing over all heads of that layer
//!   as post-softmax maps, and must consume the possibly modified maps in
//!   the remainder of the pass. A backend that cannot re-inject modified
//!   maps must not advertise attention layers in its catalog.
//! * Calls are serialized by the pipeline unless
//!   [`DenoiserBackend::supports_concurrent_predict`] returns `true`.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::frame::FrameImage;
use crate::latent::LatentGrid;

/// How a text condition steers the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditioningMode {
    /// Ordinary prompt conditioning.
    Prompt,
    /// The exceptional (null) condition: the backend's neutral conditioning
    /// used for inversion and for the unconditional half of guided sampling.
    Exceptional,
}

/// An embedded text condition, produced by [`DenoiserBackend::embed_text`].
#[derive(Debug, Clone, PartialEq)]
pub struct TextCondition {
    pub mode: ConditioningMode,
    pub prompt_text: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

/// One attention layer advertised by a backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionLayerInfo {
    /// Stable identifier, unique within the catalog.
    pub id: usize,
    pub kind: AttentionKind,
    /// Spatial grid the query axis runs over, row-major.
    pub query_height: usize,
    pub query_width: usize,
    pub heads: usize,
}

/// A post-softmax attention map for one head: `rows` query positions over
/// `cols` key positions, rows summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Row-sum slack accepted by [`AttentionMap::new`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

impl AttentionMap {
    /// Builds a map from row-major data, checking that entries are finite
    /// and non-negative and that each row sums to 1 within
    /// [`ROW_SUM_TOLERANCE`].
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, Error> {
        if rows == 0 || cols == 0 {
            return Err(Error::ZeroDimension {
                context: "attention map",
            });
        }
        if data.len() != rows * cols {
            return Err(Error::BufferLength {
                context: "attention values",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        for row in 0..rows {
            let mut sum = 0.0;
            for col in 0..cols {
                let value = data[row * cols + col];
                if !value.is_finite() || value < 0.0 {
                    return Err(Error::AttentionValue { row, col, value });
                }
                sum += value;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::RowNotStochastic { row, sum });
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Softmax over each row of a logit matrix.
    pub fn from_logits(rows: usize, cols: usize, logits: &[f64]) -> Result<Self, Error> {
        if logits.len() != rows * cols {
            return Err(Error::BufferLength {
                context: "attention logits",
                expected: rows * cols,
                actual: logits.len(),
            });
        }
        let mut data = vec![0.0; rows * cols];
        for row in 0..rows {
            let slice = &logits[row * cols..(row + 1) * cols];
            let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::NonFinite {
                    context: "attention logits",
                });
            }
            let mut sum = 0.0;
            for (col, &logit) in slice.iter().enumerate() {
                let e = (logit - max).exp();
                data[row * cols + col] = e;
                sum += e;
            }
            for col in 0..cols {
                data[row * cols + col] /= sum;
            }
        }
        Self::new(rows, cols, data)
    }

    /// The maximum-entropy map: every row uniform.
    pub fn uniform(rows: usize, cols: usize) -> Result<Self, Error> {
        Self::new(rows, cols, vec![1.0 / cols as f64; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.rows)
            .map(|r| (self.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Where in the network an attention callback fired.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttentionSite {
    pub layer: usize,
    pub step: usize,
    pub kind: AttentionKind,
    pub query_height: usize,
    pub query_width: usize,
}

/// Callback invoked by a backend once per attention layer per forward pass.
/// The hook may mutate the maps in place; the backend consumes the modified
/// maps for the rest of the pass.
pub trait AttentionHook {
    fn on_attention(
        &mut self,
        site: &AttentionSite,
        heads: &mut [AttentionMap],
    ) -> Result<(), Error>;
}

/// One captured attention map.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub site: AttentionSite,
    pub head: usize,
    pub map: AttentionMap,
}

/// A non-modifying hook that keeps a copy of every map it sees.
#[derive(Debug, Default)]
pub struct RecordingHook {
    pub records: Vec<AttentionRecord>,
}

impl AttentionHook for RecordingHook {
    fn on_attention(
        &mut self,
        site: &AttentionSite,
        heads: &mut [AttentionMap],
    ) -> Result<(), Error> {
        for (head, map) in heads.iter().enumerate() {
            self.records.push(AttentionRecord {
                site: site.clone(),
                head,
                map: map.clone(),
            });
        }
        Ok(())
    }
}

/// Static facts a backend declares about itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub id: String,
    /// Equal inputs produce equal outputs on every entry point.
    pub deterministic: bool,
    /// Worst-case per-channel error of `decode(encode(frame))`, in pixel
    /// units.
    pub decode_roundtrip_tolerance: f64,
}

/// A latent diffusion model as seen by the pipeline.
pub trait DenoiserBackend {
    fn info(&self) -> BackendInfo;

    /// Projects a frame into the backend's latent space.
    fn encode(&self, frame: &FrameImage) -> Result<LatentGrid, Error>;

    /// Projects a latent back to pixels.
    fn decode(&self, latent: &LatentGrid) -> Result<FrameImage, Error>;

    /// Embeds text for conditioning. `mode` selects between ordinary prompt
    /// conditioning and the backend's exceptional (null) condition; for the
    /// exceptional mode the text is conventionally empty.
    fn embed_text(&self, text: &str, mode: ConditioningMode) -> Result<TextCondition, Error>;

    /// Predicts the noise content of `latent` at step `t`, optionally
    /// exposing attention maps to `hook` (see the module docs for the hook
    /// protocol).
    fn predict_noise(
        &self,
        latent: &LatentGrid,
        step: usize,
        condition: &TextCondition,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<LatentGrid, Error>;

    /// The attention layers this backend exposes to hooks.
    fn layer_catalog(&self) -> &[AttentionLayerInfo];

    /// Whether `predict_noise` may be called from multiple threads at once.
    fn supports_concurrent_predict(&self) -> bool {
        false
    }
}
