//! Motion-feature masks: flow-magnitude thresholding, first-frame
//! duplication to keep mask and frame counts aligned, and fusion of
//! the mask as a fourth channel onto the RGB frame.

use crate::error::{Error, Result};
use crate::imageio::{Frame, MaskImage};
use crate::tensorops::Tensor;

/// Binary foreground indicator derived from flow magnitude.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotionMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl MotionMask {
    pub fn as_mask_image(&self) -> MaskImage {
        MaskImage { width: self.width, height: self.height, data: self.data.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct MaskParams {
    /// Magnitude threshold, pixels/frame.
    pub alpha: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams { alpha: 0.4 }
    }
}

/// Indicator of magnitude >= alpha; the boundary value maps to 1.
pub fn threshold_mask(magnitude: &Tensor, alpha: f64) -> Result<MotionMask> {
    if alpha < 0.0 {
        return Err(Error::invalid(format!("negative threshold {alpha}")));
    }
    let [height, width] = match magnitude.shape.as_slice() {
        &[h, w] => [h, w],
        s => return Err(Error::shape(format!("magnitude must be [H,W], got {s:?}"))),
    };
    let data = magnitude.data.iter().map(|&v| u8::from(v >= alpha)).collect();
    Ok(MotionMask { width, height, data })
}

/// Duplicate the first mask so `frame_count` frames each have one:
/// output[0] = output[1] = input[0], output[k] = input[k-1].
pub fn align_sequence(masks: &[MotionMask], frame_count: usize) -> Result<Vec<MotionMask>> {
    if frame_count < 2 {
        return Err(Error::invalid(format!("need at least 2 frames, got {frame_count}")));
    }
    if masks.len() != frame_count - 1 {
        return Err(Error::invalid(format!(
            "got {} masks for {frame_count} frames (want {})",
            masks.len(),
            frame_count - 1
        )));
    }
    let mut out = Vec::with_capacity(frame_count);
    out.push(masks[0].clone());
    out.extend(masks.iter().cloned());
    Ok(out)
}

/// Stack the motion mask as a fourth channel: output channels are
/// R, G, B, M with M exactly 0.0 or 1.0.
pub fn fuse(frame: &Frame, mask: &MotionMask) -> Result<Tensor> {
    if frame.channels != 3 {
        return Err(Error::invalid(format!("fuse needs a 3-channel frame, got {}", frame.channels)));
    }
    if frame.width != mask.width || frame.height != mask.height {
        return Err(Error::shape(format!(
            "frame {}x{} vs mask {}x{}",
            frame.width, frame.height, mask.width, mask.height
        )));
    }
    let plane = frame.width * frame.height;
    let mut out = Tensor::zeros(&[4, frame.height, frame.width]);
    for c in 0..3 {
        for i in 0..plane {
            out.data[c * plane + i] = frame.data[i * 3 + c] as f64;
        }
    }
    for i in 0..plane {
        out.data[3 * plane + i] = mask.data[i] as f64;
    }
    Ok(out)
}
