//! Output quality metrics.
//!
//! * **Temporal loss**: for each consecutive output pair, frame `i` is
//!   warped forward along the supplied optical flow and compared to frame
//!   `i+1` by mean squared error over the pixels (and channels) where the
//!   warp is valid; the clip score is the mean over pairs. Lower is
//!   smoother.
//! * **Semantic loss**: per frame, features are extracted from the output
//!   and from the reference background, each layer is summarized by its
//!   Gram matrix `G = F * F^T / (C * N)`, and the layers' squared Frobenius
//!   distances are summed; the clip score is the mean over frames. Lower
//!   means the output keeps the background's global appearance statistics.
//!
//! Both scores are conventionally reported scaled by 1000;
//! [`MetricsReport`] stores raw values and applies the scaling only in its
//! display form.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::exec;
use crate::frame::{check_same_dims, sample_bilinear_clamped, FrameImage, VideoClip, CHANNELS};

/// Dense per-pixel displacement field with a validity flag per pixel.
/// Displacements are in pixels: the content at `(x, y)` of the source frame
/// appears at `(x + dx, y + dy)` conceptually; warping samples the source at
/// that location to predict the next frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    dx: Vec<f32>,
    dy: Vec<f32>,
    valid: Vec<bool>,
}

impl FlowField {
    /// Builds a flow field; displacement values must be finite wherever the
    /// pixel is marked valid.
    pub fn new(
        height: usize,
        width: usize,
        dx: Vec<f32>,
        dy: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self, Error> {
        if height == 0 || width == 0 {
            return Err(Error::ZeroDimension { context: "flow" });
        }
        let expected = height * width;
        for (name, len) in [("dx", dx.len()), ("dy", dy.len()), ("valid", valid.len())] {
            if len != expected {
                return Err(Error::BufferLength {
                    context: match name {
                        "dx" => "flow dx values",
                        "dy" => "flow dy values",
                        _ => "flow validity bits",
                    },
                    expected,
                    actual: len,
                });
            }
        }
        for i in 0..expected {
            if valid[i] && (!dx[i].is_finite() || !dy[i].is_finite()) {
                return Err(Error::NonFinite {
                    context: "flow displacement",
                });
            }
        }
        Ok(Self {
            height,
            width,
            dx,
            dy,
            valid,
        })
    }

    /// The all-zero, all-valid flow (a static-scene assumption).
    pub fn zero(height: usize, width: usize) -> Result<Self, Error> {
        Self::new(
            height,
            width,
            vec![0.0; height * width],
            vec![0.0; height * width],
            vec![true; height * width],
        )
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn displacement(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn dx(&self) -> &[f32] {
        &self.dx
    }

    pub fn dy(&self) -> &[f32] {
        &self.dy
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
}

/// Warps a frame along a flow field: output pixel `(x, y)` bilinearly
/// samples the frame at `(x + dx, y + dy)`. Returns the warped frame and a
/// per-pixel validity map; a pixel is invalid when its flow is invalid or
/// its sample point leaves the frame, and such pixels are written as zero.
pub fn warp(frame: &FrameImage, flow: &FlowField) -> Result<(FrameImage, Vec<bool>), Error> {
    check_same_dims("flow vs frame", frame.dims(), flow.dims())?;
    let (h, w) = frame.dims();
    let mut valid = vec![false; h * w];
    let frame_out = FrameImage::from_fn(h, w, |y, x, c| {
        if !flow.is_valid(y, x) {
            return 0.0;
        }
        let (dx, dy) = flow.displacement(y, x);
        let sx = x as f64 + dx as f64;
        let sy = y as f64 + dy as f64;
        if sx < 0.0 || sx > (w - 1) as f64 || sy < 0.0 || sy > (h - 1) as f64 {
            return 0.0;
        }
        if c == 0 {
            valid[y * w + x] = true;
        }
        sample_bilinear_clamped(frame, sy, sx, c).clamp(0.0, 1.0) as f32
    })?;
    Ok((frame_out, valid))
}

/// Per-pair temporal loss breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    /// Index of the earlier frame of the pair.
    pub pair: usize,
    /// Masked MSE, absent when no pixel of the pair was valid.
    pub value: Option<f64>,
    /// Fraction of pixels that entered the comparison.
    pub valid_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalLossDetail {
    /// Mean over pairs that had a valid region.
    pub value: f64,
    pub pairs: Vec<PairScore>,
}

/// Temporal loss of a clip under `clip.len() - 1` flow fields. A clip of one
/// frame scores zero. Pairs whose warp region is entirely invalid are
/// excluded from the mean with a warning; if every pair is excluded the
/// metric is undefined and an error is returned.
pub fn temporal_loss(clip: &VideoClip, flows: &[FlowField]) -> Result<TemporalLossDetail, Error> {
    if flows.len() + 1 != clip.len() {
        return Err(Error::LengthMismatch {
            context: "flow fields",
            expected: clip.len().saturating_sub(1),
            actual: flows.len(),
        });
    }
    if clip.len() == 1 {
        return Ok(TemporalLossDetail {
            value: 0.0,
            pairs: Vec::new(),
        });
    }
    let pairs = exec::try_map_range(clip.len() - 1, true, |i| {
        let (warped, valid) = warp(clip.frame(i), &flows[i])?;
        let next = clip.frame(i + 1);
        let (h, w) = warped.dims();
        let mut sum = 0.0;
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                if !valid[y * w + x] {
                    continue;
                }
                count += 1;
                for c in 0..CHANNELS {
                    let d = next.get(y, x, c) as f64 - warped.get(y, x, c) as f64;
                    sum += d * d;
                }
            }
        }
        Ok(PairScore {
            pair: i,
            value: (count > 0).then(|| sum / (count * CHANNELS) as f64),
            valid_fraction: count as f64 / (h * w) as f64,
        })
    })?;
    for pair in &pairs {
        if pair.value.is_none() {
            log::warn!(
                "temporal loss: pair {} has no valid warp region, skipping",
                pair.pair
            );
        }
    }
    let scored: Vec<f64> = pairs.iter().filter_map(|p| p.value).collect();
    if scored.is_empty() {
        return Err(Error::NoValidPairs);
    }
    Ok(TemporalLossDetail {
        value: scored.iter().sum::<f64>() / scored.len() as f64,
        pairs,
    })
}

/// A dense feature activation: `channels` planes of `cells` values each,
/// stored plane-major (`data[c * cells + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    cells: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, cells: usize, data: Vec<f64>) -> Result<Self, Error> {
        if channels == 0 || cells == 0 {
            return Err(Error::ZeroDimension {
                context: "feature map",
            });
        }
        if data.len() != channels * cells {
            return Err(Error::BufferLength {
                context: "feature values",
                expected: channels * cells,
                actual: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "feature values",
            });
        }
        Ok(Self {
            channels,
            cells,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        &self.data[channel * self.cells..(channel + 1) * self.cells]
    }
}

/// Symmetric `channels x channels` Gram matrix of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    size: usize,
    data: Vec<f64>,
}

impl GramMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.size + b]
    }

    /// Squared Frobenius distance to another Gram matrix of the same size.
    pub fn squared_distance(&self, other: &GramMatrix) -> Result<f64, Error> {
        if self.size != other.size {
            return Err(Error::LengthMismatch {
                context: "gram matrix size",
                expected: self.size,
                actual: other.size,
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

/// `G = F * F^T / (channels * cells)`: channel co-activation statistics,
/// invariant to spatial arrangement.
pub fn gram(features: &FeatureMap) -> GramMatrix {
    let c = features.channels();
    let n = features.cells();
    let norm = 1.0 / (c * n) as f64;
    let mut data = vec![0.0; c * c];
    for a in 0..c {
        let pa = features.plane(a);
        for b in a..c {
            let pb = features.plane(b);
            let dot: f64 = pa.iter().zip(pb).map(|(x, y)| x * y).sum();
            data[a * c + b] = dot * norm;
            data[b * c + a] = dot * norm;
        }
    }
    GramMatrix { size: c, data }
}

/// Produces feature maps from a frame, one per advertised layer.
///
/// Implementations must be shareable across threads; extraction calls are
/// only issued concurrently when [`FeatureExtractor::concurrent_safe`]
/// returns `true`, so an adapter wrapping a single-session model can opt
/// out and still satisfy the bound with internal locking.
pub trait FeatureExtractor: Sync {
    fn id(&self) -> &str;

    /// Layer names, in the order `extract` returns maps.
    fn layers(&self) -> Vec<String>;

    fn extract(&self, frame: &FrameImage) -> Result<Vec<FeatureMap>, Error>;

    fn concurrent_safe(&self) -> bool {
        false
    }
}

/// Layer names conventionally used when the extractor is a perceptual
/// network: the first convolution of each block, as in style-transfer
/// practice. Adapters around such networks should advertise these names.
pub const PERCEPTUAL_LAYERS: [&str; 5] = ["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"];

/// One layer of grayscale pixels as features (`C = 1`).
#[derive(Debug, Clone, Copy, Default)]
pub struct LumaFeatures;

impl FeatureExtractor for LumaFeatures {
    fn id(&self) -> &str {
        "luma"
    }

    fn layers(&self) -> Vec<String> {
        vec!["luma".to_string()]
    }

    fn extract(&self, frame: &FrameImage) -> Result<Vec<FeatureMap>, Error> {
        let (h, w) = frame.dims();
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let v = 0.2126 * frame.get(y, x, 0) as f64
                    + 0.7152 * frame.get(y, x, 1) as f64
                    + 0.0722 * frame.get(y, x, 2) as f64;
                data.push(v);
            }
        }
        Ok(vec![FeatureMap::new(1, h * w, data)?])
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// One layer with the three color planes as channels (`C = 3`).
#[derive(Debug, Clone, Copy, Default)]
pub struct RgbFeatures;

impl FeatureExtractor for RgbFeatures {
    fn id(&self) -> &str {
        "rgb"
    }

    fn layers(&self) -> Vec<String> {
        vec!["rgb".to_string()]
    }

    fn extract(&self, frame: &FrameImage) -> Result<Vec<FeatureMap>, Error> {
        let (h, w) = frame.dims();
        let cells = h * w;
        let mut data = vec![0.0; CHANNELS * cells];
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    data[c * cells + y * w + x] = frame.get(y, x, c) as f64;
                }
            }
        }
        Ok(vec![FeatureMap::new(CHANNELS, cells, data)?])
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticLossDetail {
    /// Mean over frames of the per-frame layer-summed Gram distance.
    pub value: f64,
    pub per_frame: Vec<f64>,
}

/// Semantic loss of a clip against per-frame reference backgrounds.
pub fn semantic_loss(
    clip: &VideoClip,
    references: &VideoClip,
    extractor: &dyn FeatureExtractor,
) -> Result<SemanticLossDetail, Error> {
    if references.len() != clip.len() {
        return Err(Error::LengthMismatch {
            context: "reference frames",
            expected: clip.len(),
            actual: references.len(),
        });
    }
    let per_frame = exec::try_map_range(clip.len(), extractor.concurrent_safe(), |i| {
        let out_layers = extractor.extract(clip.frame(i))?;
        let ref_layers = extractor.extract(references.frame(i))?;
        if out_layers.len() != ref_layers.len() {
            return Err(Error::LengthMismatch {
                context: "extractor layers",
                expected: out_layers.len(),
                actual: ref_layers.len(),
            });
        }
        let mut total = 0.0;
        for (out_map, ref_map) in out_layers.iter().zip(&ref_layers) {
            total += gram(out_map).squared_distance(&gram(ref_map))?;
        }
        Ok(total)
    })?;
    Ok(SemanticLossDetail {
        value: per_frame.iter().sum::<f64>() / per_frame.len() as f64,
        per_frame,
    })
}

/// Both metrics over one clip, with per-pair and per-frame breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub temporal_loss: f64,
    pub semantic_loss: f64,
    pub temporal_pairs: Vec<PairScore>,
    pub semantic_frames: Vec<f64>,
    pub extractor: String,
}

/// Conventional display scale for both metrics.
pub const REPORT_SCALE: f64 = 1e3;

impl MetricsReport {
    pub fn evaluate(
        clip: &VideoClip,
        flows: &[FlowField],
        references: &VideoClip,
        extractor: &dyn FeatureExtractor,
    ) -> Result<Self, Error> {
        let temporal = temporal_loss(clip, flows)?;
        let semantic = semantic_loss(clip, references, extractor)?;
        Ok(Self {
            temporal_loss: temporal.value,
            semantic_loss: semantic.value,
            temporal_pairs: temporal.pairs,
            semantic_frames: semantic.per_frame,
            extractor: extractor.id().to_string(),
        })
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<16} {:>12}", "metric", "value (x10^3)")?;
        writeln!(
            f,
            "{:<16} {:>12.4}",
            "temporal loss",
            self.temporal_loss * REPORT_SCALE
        )?;
        write!(
            f,
            "{:<16} {:>12.4}",
            "semantic loss",
            self.semantic_loss * REPORT_SCALE
        )
    }
}
