//! Frame and mask I/O.
//!
//! Frames live on disk as 8-bit PNG (gray, RGB, or RGBA) or binary PGM
//! (P5) and in memory as unit-interval reals. Sequences are directories
//! of numbered files; lexicographic order is temporal order
//! (`frame_%06d.png`).

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageReader};

use crate::error::{Error, Result};

/// An image with channel values in [0, 1], row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "frame data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("frame value {v} outside [0,1]")));
        }
        Ok(Frame { width, height, channels, data })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Frame { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

/// A binary mask; values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "mask data length {} != {width}x{height}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("non-binary mask value {v}")));
        }
        Ok(MaskImage { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        MaskImage { width, height, data: vec![0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Integer byte -> unit interval, exactly p/255.
#[inline]
fn byte_to_unit(p: u8) -> f32 {
    p as f32 / 255.0
}

/// Unit interval -> byte, round half up.
#[inline]
pub fn quantize(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn load_frame(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, format!("decode failed: {e}")))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, bytes): (usize, Vec<u8>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        DynamicImage::ImageRgba8(b) => (4, b.into_raw()),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported pixel format {:?} (want 8-bit gray/RGB/RGBA)", other.color()),
            ))
        }
    };
    let data = bytes.into_iter().map(byte_to_unit).collect();
    Frame::new(width, height, channels, data)
}

pub fn save_frame(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = frame.data.iter().map(|&v| quantize(v)).collect();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        if frame.channels != 1 {
            return Err(Error::invalid("PGM output requires a single-channel frame"));
        }
        return write_pgm(path, frame.width, frame.height, &bytes);
    }
    let (w, h) = (frame.width as u32, frame.height as u32);
    let result = match frame.channels {
        1 => ImageBuffer::<image::Luma<u8>, _>::from_raw(w, h, bytes).unwrap().save(path),
        3 => ImageBuffer::<image::Rgb<u8>, _>::from_raw(w, h, bytes).unwrap().save(path),
        4 => ImageBuffer::<image::Rgba<u8>, _>::from_raw(w, h, bytes).unwrap().save(path),
        c => return Err(Error::invalid(format!("unsupported channel count {c}"))),
    };
    result.map_err(|e| Error::format(path, format!("save failed: {e}")))
}

/// Binary PGM (P5), maxval 255.
fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Masks are stored as 0/255 gray images (PGM or PNG).
pub fn save_mask(mask: &MaskImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        return write_pgm(path, mask.width, mask.height, &bytes);
    }
    ImageBuffer::<image::Luma<u8>, _>::from_raw(mask.width as u32, mask.height as u32, bytes)
        .unwrap()
        .save(path)
        .map_err(|e| Error::format(path, format!("save failed: {e}")))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskImage> {
    let path = path.as_ref();
    let frame = load_frame(path)?;
    if frame.channels != 1 {
        return Err(Error::format(path, "mask must be single-channel"));
    }
    let mut data = Vec::with_capacity(frame.data.len());
    for &v in &frame.data {
        let byte = quantize(v);
        match byte {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(Error::format(path, format!("non-binary mask byte {other}")));
            }
        }
    }
    MaskImage::new(frame.width, frame.height, data)
}

/// Luminance conversion; pass-through for single-channel frames, alpha ignored.
pub fn to_grayscale(frame: &Frame) -> Frame {
    if frame.channels == 1 {
        return frame.clone();
    }
    let mut data = Vec::with_capacity(frame.width * frame.height);
    for px in frame.data.chunks_exact(frame.channels) {
        data.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
    }
    Frame { width: frame.width, height: frame.height, channels: 1, data }
}

/// Sorted list of the frame files (`.png`/`.pgm`) in a directory.
pub fn list_frames(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}
