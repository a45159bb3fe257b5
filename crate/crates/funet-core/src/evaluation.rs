//! Dice evaluation and the full inference pipeline (flow -> motion
//! mask -> fuse -> network -> binarize) over frame sequences.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{estimate_flow, flow_magnitude, HsParams};
use crate::imageio::{list_frames, load_frame, load_mask, Frame, MaskImage};
use crate::model::{forward, logits_to_mask, ModelParams};
use crate::motionmask::{align_sequence, fuse, threshold_mask};
use crate::tensorops::Tensor;

/// Dice coefficient 2|A n B| / (|A| + |B|). Two empty masks agree
/// perfectly and score 1.
pub fn dice(pred: &MaskImage, gt: &MaskImage) -> Result<f64> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::shape(format!(
            "mask extents {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut intersection = 0u64;
    let mut total = 0u64;
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        intersection += (a & b) as u64;
        total += (a + b) as u64;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * intersection as f64 / total as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_frame_dice: Vec<f64>,
    pub mean_dice: f64,
    pub frame_count: usize,
    pub threshold: f64,
}

impl EvalReport {
    pub fn from_per_frame(per_frame_dice: Vec<f64>, threshold: f64) -> Self {
        let frame_count = per_frame_dice.len();
        let mean_dice = if frame_count == 0 {
            0.0
        } else {
            per_frame_dice.iter().sum::<f64>() / frame_count as f64
        };
        EvalReport { per_frame_dice, mean_dice, frame_count, threshold }
    }
}

/// Run the inference pipeline on an in-memory frame sequence and return
/// one predicted mask per frame.
pub fn predict_sequence(
    params: &ModelParams,
    frames: &[Frame],
    alpha: f64,
    threshold: f64,
    hs: &HsParams,
) -> Result<Vec<MaskImage>> {
    if frames.len() < 2 {
        return Err(Error::invalid("inference needs at least 2 frames"));
    }
    let mut motion = Vec::with_capacity(frames.len() - 1);
    for pair in frames.windows(2) {
        let flow = estimate_flow(&pair[0], &pair[1], hs)?;
        motion.push(threshold_mask(&flow_magnitude(&flow), alpha)?);
    }
    let aligned = align_sequence(&motion, frames.len())?;
    let mut out = Vec::with_capacity(frames.len());
    for (frame, mask) in frames.iter().zip(&aligned) {
        let fused = fuse(frame, mask)?;
        let mut input = Tensor::zeros(&[1, 4, frame.height, frame.width]);
        input.data.copy_from_slice(&fused.data);
        let (logits, _) = forward(params, &input)?;
        out.push(logits_to_mask(&logits, threshold)?);
    }
    Ok(out)
}

fn rgb_frame(path: &Path) -> Result<Frame> {
    let f = load_frame(path)?;
    match f.channels {
        3 => Ok(f),
        4 => {
            // Drop alpha.
            let data = f
                .data
                .chunks_exact(4)
                .flat_map(|px| [px[0], px[1], px[2]])
                .collect();
            Frame::new(f.width, f.height, 3, data)
        }
        c => Err(Error::format(path, format!("expected a color frame, got {c} channels"))),
    }
}

pub fn load_frame_dir(dir: impl AsRef<Path>) -> Result<Vec<Frame>> {
    let paths = list_frames(&dir)?;
    if paths.is_empty() {
        return Err(Error::invalid(format!("no frames in {}", dir.as_ref().display())));
    }
    paths.iter().map(|p| rgb_frame(p)).collect()
}

pub fn load_mask_dir(dir: impl AsRef<Path>) -> Result<Vec<MaskImage>> {
    let paths = list_frames(&dir)?;
    if paths.is_empty() {
        return Err(Error::invalid(format!("no masks in {}", dir.as_ref().display())));
    }
    paths.iter().map(load_mask).collect()
}

/// Full-pipeline evaluation of one sequence on disk against ground
/// truth masks.
pub fn evaluate_sequence(
    params: &ModelParams,
    frames_dir: impl AsRef<Path>,
    gt_dir: impl AsRef<Path>,
    alpha: f64,
    threshold: f64,
    hs: &HsParams,
) -> Result<EvalReport> {
    let frames = load_frame_dir(frames_dir)?;
    let gts = load_mask_dir(gt_dir)?;
    if frames.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} frames but {} ground-truth masks",
            frames.len(),
            gts.len()
        )));
    }
    let preds = predict_sequence(params, &frames, alpha, threshold, hs)?;
    let per_frame: Result<Vec<f64>> = preds.iter().zip(&gts).map(|(p, g)| dice(p, g)).collect();
    Ok(EvalReport::from_per_frame(per_frame?, threshold))
}
