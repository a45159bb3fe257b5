//! Training: BCE-with-logits loss, RMSProp with momentum, sequence-level
//! dataset splitting, and the seeded training loop with on-disk flow
//! caching.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::dataset::{DatasetManifest, SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL};
use crate::error::{Error, Result};
use crate::evaluation::dice;
use crate::flow::{estimate_flow, flow_magnitude, read_flo, write_flo, HsParams};
use crate::imageio::{load_frame, load_mask, Frame, MaskImage};
use crate::model::{
    backward, forward, init_params, logits_to_mask, save_checkpoint, FUNetConfig, LayerGrads,
    ModelParams,
};
use crate::motionmask::{align_sequence, fuse, threshold_mask, MotionMask};
use crate::rng::Lcg64;
use crate::tensorops::{sigmoid_scalar, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub rms_smoothing: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub split_fractions: (f64, f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-8,
            momentum: 0.9,
            rms_smoothing: 0.99,
            epsilon: 1e-8,
            epochs: 10,
            batch_size: 1,
            seed: 0,
            split_fractions: (0.6, 0.2, 0.2),
        }
    }
}

/// Numerically stable binary cross-entropy on pre-sigmoid scores.
/// Returns the mean loss and its gradient w.r.t. the logits.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape != targets.shape {
        return Err(Error::shape(format!(
            "logits shape {:?} != targets shape {:?}",
            logits.shape, targets.shape
        )));
    }
    if let Some(t) = targets.data.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid(format!("non-binary target value {t}")));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&logits.shape);
    for (i, (&z, &y)) in logits.data.iter().zip(&targets.data).enumerate() {
        // max(z,0) - z*y + ln(1 + exp(-|z|))
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad.data[i] = (sigmoid_scalar(z) - y) / n;
    }
    Ok((loss / n, grad))
}

/// Per-parameter optimizer state; shapes mirror the parameter list.
#[derive(Debug, Clone)]
pub struct OptState {
    pub square_avg: Vec<Tensor>,
    pub momentum_buf: Vec<Tensor>,
    pub step: usize,
}

impl OptState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(&t.shape)).collect();
        OptState { square_avg: zeros.clone(), momentum_buf: zeros, step: 0 }
    }
}

/// One RMSProp update on a flat parameter slice:
///   g   <- grad + wd * theta
///   sq  <- rho * sq + (1 - rho) * g^2
///   buf <- mu * buf + g / (sqrt(sq) + eps)
///   theta <- theta - lr * buf
pub fn rmsprop_update(
    theta: &mut [f64],
    grad: &[f64],
    square_avg: &mut [f64],
    momentum_buf: &mut [f64],
    config: &TrainConfig,
) {
    let rho = config.rms_smoothing;
    let mu = config.momentum;
    for i in 0..theta.len() {
        let g = grad[i] + config.weight_decay * theta[i];
        square_avg[i] = rho * square_avg[i] + (1.0 - rho) * g * g;
        momentum_buf[i] = mu * momentum_buf[i] + g / (square_avg[i].sqrt() + config.epsilon);
        theta[i] -= config.learning_rate * momentum_buf[i];
    }
}

/// Apply one optimizer step to every parameter tensor.
pub fn rmsprop_step(
    params: &mut ModelParams,
    grads: &[LayerGrads],
    state: &mut OptState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.layers.len() {
        return Err(Error::shape("gradient list does not match layer list".to_string()));
    }
    let grad_tensors: Vec<&Tensor> = grads.iter().flat_map(|g| [&g.weight, &g.bias]).collect();
    let mut param_tensors = params.tensors_mut();
    for (i, theta) in param_tensors.iter_mut().enumerate() {
        if grad_tensors[i].shape != theta.shape {
            return Err(Error::shape(format!(
                "gradient shape {:?} != parameter shape {:?}",
                grad_tensors[i].shape, theta.shape
            )));
        }
        rmsprop_update(
            &mut theta.data,
            &grad_tensors[i].data,
            &mut state.square_avg[i].data,
            &mut state.momentum_buf[i].data,
            config,
        );
    }
    state.step += 1;
    Ok(())
}

/// Assign train/val/test tags at the sequence level, deterministically
/// under the seed. Frame order within sequences is untouched.
pub fn split_manifest(
    manifest: &mut DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<()> {
    let (ft, fv, fs_) = fractions;
    if ft < 0.0 || fv < 0.0 || fs_ < 0.0 || (ft + fv + fs_ - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must sum to 1")));
    }
    let n = manifest.sequences.len();
    let n_train = (ft * n as f64).floor() as usize;
    let n_val = (fv * n as f64).floor() as usize;
    let n_test = n - n_train - n_val;
    for (count, fraction) in [(n_train, ft), (n_val, fv), (n_test, fs_)] {
        if fraction > 0.0 && count == 0 {
            return Err(Error::invalid(format!(
                "{n} sequences cannot fill a split with fraction {fraction}"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Lcg64::new(seed);
    rng.shuffle(&mut order);
    for (rank, &idx) in order.iter().enumerate() {
        let split = if rank < n_train {
            SPLIT_TRAIN
        } else if rank < n_train + n_val {
            SPLIT_VAL
        } else {
            SPLIT_TEST
        };
        manifest.sequences[idx].split = split.to_string();
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_dice: Option<f64>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub params: ModelParams,
}

pub struct TrainOptions {
    pub model: FUNetConfig,
    pub train: TrainConfig,
    pub hs: HsParams,
    /// Motion-mask threshold, pixels/frame.
    pub alpha: f64,
    /// Binarization threshold for validation Dice.
    pub threshold: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            model: FUNetConfig::default(),
            train: TrainConfig::default(),
            hs: HsParams::default(),
            alpha: 0.4,
            threshold: 0.5,
        }
    }
}

struct Sample {
    input: Tensor,  // [1, 4, H, W]
    target: Tensor, // [1, 1, H, W]
    gt: MaskImage,
}

fn frame_to_rgb(path: &Path) -> Result<Frame> {
    let f = load_frame(path)?;
    match f.channels {
        3 => Ok(f),
        4 => {
            let data = f.data.chunks_exact(4).flat_map(|px| [px[0], px[1], px[2]]).collect();
            Frame::new(f.width, f.height, 3, data)
        }
        c => Err(Error::format(path, format!("expected a color frame, got {c} channels"))),
    }
}

/// Flow fields are computed once per frame pair and cached as
/// `<cache>/<seq_id>/frame_%06d.flo`; reruns reuse the bytes on disk.
fn sequence_motion_masks(
    seq_id: &str,
    frames: &[Frame],
    cache_dir: &Path,
    hs: &HsParams,
    alpha: f64,
) -> Result<Vec<MotionMask>> {
    let seq_cache = cache_dir.join(seq_id);
    fs::create_dir_all(&seq_cache).map_err(|e| Error::io(&seq_cache, e))?;
    let mut masks = Vec::with_capacity(frames.len() - 1);
    for (i, pair) in frames.windows(2).enumerate() {
        let flo_path = seq_cache.join(format!("frame_{i:06}.flo"));
        let flow = if flo_path.exists() {
            read_flo(&flo_path)?
        } else {
            let flow = estimate_flow(&pair[0], &pair[1], hs)?;
            write_flo(&flow, &flo_path)?;
            flow
        };
        masks.push(threshold_mask(&flow_magnitude(&flow), alpha)?);
    }
    align_sequence(&masks, frames.len())
}

fn build_samples(
    manifest: &DatasetManifest,
    opts: &TrainOptions,
    flow_cache: &Path,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut extents: Option<(usize, usize)> = None;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for seq in &manifest.sequences {
        if seq.split == SPLIT_TEST {
            continue;
        }
        if seq.frames.len() < 2 {
            return Err(Error::invalid(format!("sequence {} has fewer than 2 frames", seq.id)));
        }
        let frames: Result<Vec<Frame>> =
            seq.frames.iter().map(|r| frame_to_rgb(&r.image)).collect();
        let frames = frames?;
        for f in &frames {
            if f.width % 4 != 0 || f.height % 4 != 0 {
                return Err(Error::invalid(format!(
                    "sequence {}: extents {}x{} not divisible by 4",
                    seq.id, f.width, f.height
                )));
            }
            match extents {
                None => extents = Some((f.width, f.height)),
                Some(e) => {
                    if e != (f.width, f.height) {
                        return Err(Error::invalid(format!(
                            "sequence {}: extents {}x{} differ from {}x{}",
                            seq.id, f.width, f.height, e.0, e.1
                        )));
                    }
                }
            }
        }
        let motion = sequence_motion_masks(&seq.id, &frames, flow_cache, &opts.hs, opts.alpha)?;
        let bucket = if seq.split == SPLIT_VAL { &mut val } else { &mut train };
        for ((frame, mask), record) in frames.iter().zip(&motion).zip(&seq.frames) {
            let gt = load_mask(&record.mask)?;
            if gt.width != frame.width || gt.height != frame.height {
                return Err(Error::invalid(format!(
                    "sequence {}: mask extents differ from frame",
                    seq.id
                )));
            }
            let fused = fuse(frame, mask)?;
            let mut input = Tensor::zeros(&[1, 4, frame.height, frame.width]);
            input.data.copy_from_slice(&fused.data);
            let mut target = Tensor::zeros(&[1, 1, frame.height, frame.width]);
            for (t, &g) in target.data.iter_mut().zip(&gt.data) {
                *t = g as f64;
            }
            bucket.push(Sample { input, target, gt });
        }
    }
    if train.is_empty() {
        return Err(Error::invalid("no training samples (is the manifest split?)"));
    }
    Ok((train, val))
}

fn validation_dice(params: &ModelParams, val: &[Sample], threshold: f64) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for sample in val {
        let (logits, _) = forward(params, &sample.input)?;
        let pred = logits_to_mask(&logits, threshold)?;
        sum += dice(&pred, &sample.gt)?;
    }
    Ok(Some(sum / val.len() as f64))
}

/// Train on the manifest's train split, validating on the val split
/// each epoch. Writes the best-validation checkpoint to
/// `checkpoint_path` and one JSON object per epoch to `metrics_path`.
pub fn train(
    manifest: &DatasetManifest,
    opts: &TrainOptions,
    flow_cache: &Path,
    checkpoint_path: &Path,
    metrics_path: &Path,
) -> Result<TrainReport> {
    let (train_samples, val_samples) = build_samples(manifest, opts, flow_cache)?;
    let mut params = init_params(&opts.model, opts.train.seed);
    let mut state = OptState::new(&params);
    let mut rng = Lcg64::new(opts.train.seed.wrapping_add(1));

    let mut metrics_lines = String::new();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    for epoch in 1..=opts.train.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for &idx in &order {
            let sample = &train_samples[idx];
            let (logits, cache) = forward(&params, &sample.input)?;
            let (loss, grad_logits) = bce_with_logits(&logits, &sample.target)?;
            loss_sum += loss;
            let grads = backward(&params, &cache, &grad_logits)?;
            rmsprop_step(&mut params, &grads, &mut state, &opts.train)?;
        }
        let mean_train_loss = loss_sum / order.len() as f64;
        let val_dice = validation_dice(&params, &val_samples, opts.threshold)?;
        if let Some(d) = val_dice {
            if best.as_ref().map_or(true, |(_, bd, _)| d > *bd) {
                best = Some((epoch, d, params.clone()));
            }
        }
        let entry = EpochMetrics { epoch, mean_train_loss, val_dice };
        metrics_lines.push_str(&serde_json::to_string(&entry).unwrap());
        metrics_lines.push('\n');
        epochs.push(entry);
    }

    let (best_epoch, best_val_dice, best_params) = match best {
        Some((e, d, p)) => (Some(e), Some(d), p),
        None => (None, None, params),
    };
    save_checkpoint(&best_params, checkpoint_path)?;
    fs::write(metrics_path, metrics_lines).map_err(|e| Error::io(metrics_path, e))?;
    Ok(TrainReport { epochs, best_epoch, best_val_dice, params: best_params })
}
