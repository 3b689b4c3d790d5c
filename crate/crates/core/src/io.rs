//! File formats and directory conventions.
//!
//! * Frame directories: numbered image files (`.png`, `.jpg`, `.jpeg`),
//!   consumed in lexicographic filename order. Pixels map to `[0, 1]` by
//!   `v / 255`; writing rounds `v * 255` to the nearest integer, so a
//!   read-modify-write of untouched frames is lossless.
//! * Mask directories: same layout, single-channel (or collapsed to luma);
//!   a pixel is foreground when its level is at least half.
//! * Flow files: the classic `.flo` layout, little-endian: the sentinel
//!   float `202021.25`, `i32` width, `i32` height, then row-major
//!   interleaved `f32` (dx, dy) pairs. Components with magnitude above 1e9
//!   mark invalid pixels.
//! * Latent spills: a raw dump of an inversion trajectory, magic `VLAT`,
//!   used for debugging pipeline runs.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::bpi::InversionTrajectory;
use crate::error::Error;
use crate::frame::{ForegroundMask, FrameImage, VideoClip};
use crate::latent::LatentGrid;
use crate::metrics::FlowField;

const FLO_SENTINEL: f32 = 202021.25;
const FLO_INVALID_THRESHOLD: f32 = 1e9;
const FLO_INVALID_WRITE: f32 = 1e10;

const SPILL_MAGIC: &[u8; 4] = b"VLAT";
const SPILL_VERSION: u32 = 1;

/// Image files under `dir` in lexicographic filename order.
fn image_paths(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|ext| ext.to_str())
            .map(|ext| {
                let ext = ext.to_ascii_lowercase();
                ext == "png" || ext == "jpg" || ext == "jpeg"
            })
            .unwrap_or(false);
        if is_image {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(Error::EmptyDirectory {
            path: dir.to_path_buf(),
        });
    }
    paths.sort();
    Ok(paths)
}

pub fn read_frame(path: &Path) -> Result<FrameImage, Error> {
    let dynamic = image::open(path).map_err(|e| Error::image(path, e))?;
    let rgb = dynamic.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data: Vec<f32> = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    FrameImage::new(h as usize, w as usize, data)
}

pub fn write_frame(path: &Path, frame: &FrameImage) -> Result<(), Error> {
    let (h, w) = frame.dims();
    let bytes: Vec<u8> = frame
        .data()
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    let buffer = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches dimensions");
    buffer.save(path).map_err(|e| Error::image(path, e))
}

/// Reads all frames of a directory as a clip.
pub fn read_frame_dir(dir: &Path) -> Result<VideoClip, Error> {
    let frames = image_paths(dir)?
        .iter()
        .map(|path| read_frame(path))
        .collect::<Result<Vec<_>, _>>()?;
    VideoClip::new(frames)
}

/// Writes a clip as `frame_0000.png`, `frame_0001.png`, ... under `dir`,
/// creating the directory if needed. Returns the written paths.
pub fn write_frame_dir(dir: &Path, clip: &VideoClip) -> Result<Vec<PathBuf>, Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(clip.len());
    for (i, frame) in clip.iter().enumerate() {
        let path = dir.join(format!("frame_{i:04}.png"));
        write_frame(&path, frame)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn read_mask(path: &Path) -> Result<ForegroundMask, Error> {
    let dynamic = image::open(path).map_err(|e| Error::image(path, e))?;
    let luma = dynamic.to_luma8();
    let (w, h) = luma.dimensions();
    let bits: Vec<bool> = luma.as_raw().iter().map(|&v| v >= 128).collect();
    ForegroundMask::new(h as usize, w as usize, bits)
}

pub fn write_mask(path: &Path, mask: &ForegroundMask) -> Result<(), Error> {
    let (h, w) = mask.dims();
    let bytes: Vec<u8> = mask
        .bits()
        .iter()
        .map(|&b| if b { 255 } else { 0 })
        .collect();
    let buffer = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches dimensions");
    buffer.save(path).map_err(|e| Error::image(path, e))
}

pub fn read_mask_dir(dir: &Path) -> Result<Vec<ForegroundMask>, Error> {
    image_paths(dir)?
        .iter()
        .map(|path| read_mask(path))
        .collect()
}

pub fn write_mask_dir(dir: &Path, masks: &[ForegroundMask]) -> Result<Vec<PathBuf>, Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(masks.len());
    for (i, mask) in masks.iter().enumerate() {
        let path = dir.join(format!("mask_{i:04}.png"));
        write_mask(&path, mask)?;
        paths.push(path);
    }
    Ok(paths)
}

fn flow_format(path: &Path, detail: impl Into<String>) -> Error {
    Error::FlowFormat {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn read_flo(path: &Path) -> Result<FlowField, Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(flow_format(path, "file shorter than the 12-byte header"));
    }
    let sentinel = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if sentinel != FLO_SENTINEL {
        return Err(flow_format(path, format!("bad sentinel {sentinel}")));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16 {
        return Err(flow_format(path, format!("implausible dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + w * h * 2 * 4;
    if bytes.len() != expected {
        return Err(flow_format(
            path,
            format!(
                "expected {expected} bytes for {w}x{h}, found {}",
                bytes.len()
            ),
        ));
    }
    let mut dx = Vec::with_capacity(w * h);
    let mut dy = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let offset = 12 + i * 8;
        let u = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
        let v = f32::from_le_bytes(bytes[offset + 4..offset + 8].try_into().unwrap());
        let ok = u.is_finite()
            && v.is_finite()
            && u.abs() < FLO_INVALID_THRESHOLD
            && v.abs() < FLO_INVALID_THRESHOLD;
        dx.push(if ok { u } else { 0.0 });
        dy.push(if ok { v } else { 0.0 });
        valid.push(ok);
    }
    FlowField::new(h, w, dx, dy, valid)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<(), Error> {
    let (h, w) = flow.dims();
    let mut bytes = Vec::with_capacity(12 + h * w * 8);
    bytes.extend_from_slice(&FLO_SENTINEL.to_le_bytes());
    bytes.extend_from_slice(&(w as i32).to_le_bytes());
    bytes.extend_from_slice(&(h as i32).to_le_bytes());
    for i in 0..h * w {
        let (u, v) = if flow.valid()[i] {
            (flow.dx()[i], flow.dy()[i])
        } else {
            (FLO_INVALID_WRITE, FLO_INVALID_WRITE)
        };
        bytes.extend_from_slice(&u.to_le_bytes());
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads all `.flo` files of a directory in lexicographic filename order.
pub fn read_flow_dir(dir: &Path) -> Result<Vec<FlowField>, Error> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("flo") {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(Error::EmptyDirectory {
            path: dir.to_path_buf(),
        });
    }
    paths.sort();
    paths.iter().map(|path| read_flo(path)).collect()
}

/// Dumps a trajectory's latent stack (`z_0 ..= z_{t_b}`) to a raw file.
pub fn spill_trajectory(path: &Path, trajectory: &InversionTrajectory) -> Result<(), Error> {
    let latents = trajectory.latents();
    let (h, w, c) = latents[0].dims();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let header: Vec<u32> = vec![
        SPILL_VERSION,
        trajectory.t_b() as u32,
        latents.len() as u32,
        h as u32,
        w as u32,
        c as u32,
    ];
    out.write_all(SPILL_MAGIC).map_err(|e| Error::io(path, e))?;
    for value in header {
        out.write_all(&value.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    for latent in latents {
        for value in latent.data() {
            out.write_all(&value.to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads back a spilled trajectory as `(t_b, latent stack)`.
pub fn read_trajectory_spill(path: &Path) -> Result<(usize, Vec<LatentGrid>), Error> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != SPILL_MAGIC {
        return Err(flow_format(path, "not a latent spill file"));
    }
    let mut header = [0u32; 6];
    for slot in header.iter_mut() {
        let mut buf = [0u8; 4];
        input.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        *slot = u32::from_le_bytes(buf);
    }
    let [version, t_b, count, h, w, c] = header;
    if version != SPILL_VERSION {
        return Err(flow_format(
            path,
            format!("unsupported spill version {version}"),
        ));
    }
    if count != t_b + 1 {
        return Err(flow_format(path, "latent count does not match depth"));
    }
    let mut latents = Vec::with_capacity(count as usize);
    let volume = (h * w * c) as usize;
    for _ in 0..count {
        let mut data = Vec::with_capacity(volume);
        for _ in 0..volume {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            data.push(f64::from_le_bytes(buf));
        }
        latents.push(LatentGrid::new(h as usize, w as usize, c as usize, data)?);
    }
    Ok((t_b as usize, latents))
}
