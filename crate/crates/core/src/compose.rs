//! Pixel-exact composition.
//!
//! The merge kernel is an exact per-pixel select: foreground where the mask
//! is set, background elsewhere, with no arithmetic blending. Composite
//! assembly and background replacement share it, so a frame composited and
//! then background-replaced against the same material is reproduced bit for
//! bit.

use crate::error::Error;
use crate::exec;
use crate::frame::{
    check_same_dims, sample_bilinear_zero, ForegroundMask, FrameImage, Placement, VideoClip,
};

/// Merges one frame over a background: `out(p) = frame(p)` where the mask is
/// set, `background(p)` elsewhere.
pub fn replace_background(
    frame: &FrameImage,
    background: &FrameImage,
    mask: &ForegroundMask,
) -> Result<FrameImage, Error> {
    check_same_dims("background vs frame", frame.dims(), background.dims())?;
    check_same_dims("mask vs frame", frame.dims(), mask.dims())?;
    FrameImage::from_fn(frame.height(), frame.width(), |y, x, c| {
        if mask.get(y, x) {
            frame.get(y, x, c)
        } else {
            background.get(y, x, c)
        }
    })
}

/// Builds the composite clip: each foreground frame is merged over the
/// matching background frame under its mask. Clips and masks must agree in
/// count and dimensions.
pub fn assemble_composite(
    foreground: &VideoClip,
    background: &VideoClip,
    masks: &[ForegroundMask],
) -> Result<VideoClip, Error> {
    if foreground.len() != background.len() {
        return Err(Error::LengthMismatch {
            context: "background frames",
            expected: foreground.len(),
            actual: background.len(),
        });
    }
    if foreground.len() != masks.len() {
        return Err(Error::LengthMismatch {
            context: "masks",
            expected: foreground.len(),
            actual: masks.len(),
        });
    }
    let frames = exec::try_map_range(foreground.len(), true, |i| {
        replace_background(foreground.frame(i), background.frame(i), &masks[i])
            .map_err(|e| Error::frame(i, e))
    })?;
    VideoClip::new(frames)
}

/// Scales and translates a foreground frame (and its mask) onto a canvas of
/// the given size. Frame pixels resample bilinearly, mask bits by nearest
/// neighbor; canvas regions with no source coverage stay zero / unset.
///
/// Fails with [`Error::EmptyPlacement`] when the placed mask selects nothing,
/// which otherwise would silently drop the foreground from the composite.
pub fn place_foreground(
    frame: &FrameImage,
    mask: &ForegroundMask,
    placement: &Placement,
    canvas_height: usize,
    canvas_width: usize,
) -> Result<(FrameImage, ForegroundMask), Error> {
    check_same_dims("mask vs frame", frame.dims(), mask.dims())?;
    if canvas_height == 0 || canvas_width == 0 {
        return Err(Error::ZeroDimension { context: "canvas" });
    }
    if placement.is_identity() && (canvas_height, canvas_width) == frame.dims() {
        return Ok((frame.clone(), mask.clone()));
    }
    let scale = placement.scale();
    let tx = placement.translate_x();
    let ty = placement.translate_y();
    let src_h = frame.height() as isize;
    let src_w = frame.width() as isize;

    let placed = FrameImage::from_fn(canvas_height, canvas_width, |y, x, c| {
        let src_y = ((y as f64 + 0.5) - ty) / scale - 0.5;
        let src_x = ((x as f64 + 0.5) - tx) / scale - 0.5;
        sample_bilinear_zero(frame, src_y, src_x, c).clamp(0.0, 1.0) as f32
    })?;
    let placed_mask = ForegroundMask::from_fn(canvas_height, canvas_width, |y, x| {
        let src_y = (((y as f64 + 0.5) - ty) / scale - 0.5).round() as isize;
        let src_x = (((x as f64 + 0.5) - tx) / scale - 0.5).round() as isize;
        if src_y < 0 || src_y >= src_h || src_x < 0 || src_x >= src_w {
            false
        } else {
            mask.get(src_y as usize, src_x as usize)
        }
    })?;
    if !placed_mask.any_set() {
        return Err(Error::EmptyPlacement);
    }
    Ok((placed, placed_mask))
}
