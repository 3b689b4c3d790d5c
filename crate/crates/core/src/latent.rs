//! Dense latent tensors exchanged with a denoiser backend.
//!
//! Stored row-major as `[y][x][channel]` in `f64`. Step arithmetic and
//! attention math stay in double precision so that inversion round-trips
//! hold to the tolerances the rest of the crate asserts.

use crate::error::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    /// Builds a latent from a row-major buffer; every value must be finite.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, Error> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ZeroDimension { context: "latent" });
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::BufferLength {
                context: "latent values",
                expected,
                actual: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "latent values",
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Same layout checks as [`LatentGrid::new`] without the finiteness scan;
    /// for internal construction where the caller checks its own output.
    pub(crate) fn from_parts(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, Error> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::BufferLength {
                context: "latent values",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self, Error> {
        Self::new(
            height,
            width,
            channels,
            vec![0.0; height * width * channels],
        )
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut value: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, Error> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(value(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same_shape(
        &self,
        context: &'static str,
        other: &LatentGrid,
    ) -> Result<(), Error> {
        if !self.same_shape(other) {
            return Err(Error::LatentShapeMismatch {
                context,
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }

    /// Largest absolute element difference to a latent of the same shape.
    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64, Error> {
        self.check_same_shape("difference operand", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Largest absolute element magnitude.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}
