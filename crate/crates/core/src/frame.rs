//! Image-space data model: RGB frames, binary foreground masks, clips, and
//! the geometric placement applied to foreground material before compositing.
//!
//! Frames store `f32` values in `[0, 1]`, row-major as `[y][x][channel]`.
//! Resampling uses pixel-center alignment: output pixel `x` reads the input
//! at `(x + 0.5) * in / out - 0.5`, so identity-sized resampling reproduces
//! the source bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Color channels per frame pixel.
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FrameImage {
    /// Builds a frame from a row-major `[y][x][channel]` buffer. Every value
    /// must be finite and in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, Error> {
        if height == 0 || width == 0 {
            return Err(Error::ZeroDimension { context: "frame" });
        }
        let expected = height * width * CHANNELS;
        if data.len() != expected {
            return Err(Error::BufferLength {
                context: "frame pixels",
                expected,
                actual: data.len(),
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(Error::PixelOutOfRange { index, value });
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self, Error> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut pixel: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, Error> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(pixel(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    /// Bilinear resample with edge clamping. Preserves the source exactly
    /// when the target size equals the source size.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<FrameImage, Error> {
        if height == 0 || width == 0 {
            return Err(Error::ZeroDimension {
                context: "resize target",
            });
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        FrameImage::from_fn(height, width, |y, x, c| {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            sample_bilinear_clamped(self, src_y, src_x, c) as f32
        })
    }

    /// Largest absolute per-channel difference to another frame of the same
    /// size.
    pub fn max_abs_diff(&self, other: &FrameImage) -> Result<f32, Error> {
        check_same_dims("frame pair", self.dims(), other.dims())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// Samples a frame channel at a real-valued coordinate, clamping the support
/// to the image border. Intended for resampling where the coordinate is
/// already inside (or at the edge of) the image.
pub(crate) fn sample_bilinear_clamped(frame: &FrameImage, y: f64, x: f64, c: usize) -> f64 {
    let h = frame.height() as isize;
    let w = frame.width() as isize;
    let y0 = y.floor();
    let x0 = x.floor();
    let wy = y - y0;
    let wx = x - x0;
    let mut acc = 0.0;
    for (dy, weight_y) in [(0isize, 1.0 - wy), (1, wy)] {
        for (dx, weight_x) in [(0isize, 1.0 - wx), (1, wx)] {
            let weight = weight_y * weight_x;
            if weight == 0.0 {
                continue;
            }
            let yy = (y0 as isize + dy).clamp(0, h - 1) as usize;
            let xx = (x0 as isize + dx).clamp(0, w - 1) as usize;
            acc += weight * frame.get(yy, xx, c) as f64;
        }
    }
    acc
}

/// Samples a frame channel at a real-valued coordinate; regions outside the
/// image contribute zero. Used by foreground placement, where uncovered
/// canvas must stay empty.
pub(crate) fn sample_bilinear_zero(frame: &FrameImage, y: f64, x: f64, c: usize) -> f64 {
    let h = frame.height() as isize;
    let w = frame.width() as isize;
    let y0 = y.floor() as isize;
    let x0 = x.floor() as isize;
    let wy = y - y0 as f64;
    let wx = x - x0 as f64;
    let mut acc = 0.0;
    for (dy, weight_y) in [(0isize, 1.0 - wy), (1, wy)] {
        for (dx, weight_x) in [(0isize, 1.0 - wx), (1, wx)] {
            let weight = weight_y * weight_x;
            if weight == 0.0 {
                continue;
            }
            let yy = y0 + dy;
            let xx = x0 + dx;
            if yy < 0 || yy >= h || xx < 0 || xx >= w {
                continue;
            }
            acc += weight * frame.get(yy as usize, xx as usize, c) as f64;
        }
    }
    acc
}

pub(crate) fn check_same_dims(
    context: &'static str,
    expected: (usize, usize),
    actual: (usize, usize),
) -> Result<(), Error> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected_height: expected.0,
            expected_width: expected.1,
            actual_height: actual.0,
            actual_width: actual.1,
        });
    }
    Ok(())
}

/// Per-pixel boolean foreground map aligned with a frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, Error> {
        if height == 0 || width == 0 {
            return Err(Error::ZeroDimension { context: "mask" });
        }
        if bits.len() != height * width {
            return Err(Error::BufferLength {
                context: "mask bits",
                expected: height * width,
                actual: bits.len(),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Result<Self, Error> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut bit: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, Error> {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(bit(y, x));
            }
        }
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn any_set(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbor resample with pixel-center alignment.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<ForegroundMask, Error> {
        if height == 0 || width == 0 {
            return Err(Error::ZeroDimension {
                context: "resize target",
            });
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        ForegroundMask::from_fn(height, width, |y, x| {
            let src_y = ((y as f64 + 0.5) * sy - 0.5).round() as isize;
            let src_x = ((x as f64 + 0.5) * sx - 0.5).round() as isize;
            let yy = src_y.clamp(0, self.height as isize - 1) as usize;
            let xx = src_x.clamp(0, self.width as isize - 1) as usize;
            self.get(yy, xx)
        })
    }
}

/// An ordered, dimension-consistent sequence of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<FrameImage>,
}

impl VideoClip {
    pub fn new(frames: Vec<FrameImage>) -> Result<Self, Error> {
        let first = frames.first().ok_or(Error::EmptyClip)?;
        let dims = first.dims();
        for frame in &frames[1..] {
            check_same_dims("clip frame", dims, frame.dims())?;
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn frame(&self, index: usize) -> &FrameImage {
        &self.frames[index]
    }

    pub fn frames(&self) -> &[FrameImage] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<FrameImage> {
        self.frames
    }

    pub fn iter(&self) -> std::slice::Iter<'_, FrameImage> {
        self.frames.iter()
    }
}

/// Uniform scale plus pixel translation applied to foreground frames before
/// they are pasted onto the composite canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    scale: f64,
    translate_x: f64,
    translate_y: f64,
}

impl Placement {
    pub fn new(scale: f64, translate_x: f64, translate_y: f64) -> Result<Self, Error> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::config(format!(
                "placement scale {scale} must be finite and positive"
            )));
        }
        if !translate_x.is_finite() || !translate_y.is_finite() {
            return Err(Error::config("placement translation must be finite"));
        }
        Ok(Self {
            scale,
            translate_x,
            translate_y,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            translate_x: 0.0,
            translate_y: 0.0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn translate_x(&self) -> f64 {
        self.translate_x
    }

    pub fn translate_y(&self) -> f64 {
        self.translate_y
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.translate_x == 0.0 && self.translate_y == 0.0
    }
}

impl Default for Placement {
    fn default() -> Self {
        Self::identity()
    }
}
