//! `funet`: the pipeline stages as subcommands. Exit codes: 0 success,
//! 1 domain error, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use funet_core::dataset::{
    chroma_key, composite, synth_dataset, ChromaKeyParams, DatasetManifest, FrameRecord,
    SequenceRecord, SPLIT_TRAIN,
};
use funet_core::evaluation::{dice, load_frame_dir, load_mask_dir, EvalReport};
use funet_core::flow::{estimate_flow, flow_magnitude, read_flo, write_flo, HsParams};
use funet_core::imageio::{list_frames, load_frame, save_frame, save_mask, Frame};
use funet_core::model::load_checkpoint;
use funet_core::motionmask::threshold_mask;
use funet_core::training::{split_manifest, train, TrainConfig, TrainOptions};
use funet_core::{Error, Result};

#[derive(Parser)]
#[command(name = "funet", version, about = "Flow-based video segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone)]
struct Size {
    width: usize,
    height: usize,
}

fn parse_size(s: &str) -> std::result::Result<Size, String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let width = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    let height = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    Ok(Size { width, height })
}

fn parse_key(s: &str) -> std::result::Result<[u8; 3], String> {
    if s.len() != 6 || !s.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(format!("expected RRGGBB hex, got {s:?}"));
    }
    let byte = |i| u8::from_str_radix(&s[i..i + 2], 16).unwrap();
    Ok([byte(0), byte(2), byte(4)])
}

#[derive(Args)]
struct FlowFlags {
    /// Pyramid levels
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Smoothness weight
    #[arg(long, default_value_t = 15.0)]
    lambda: f32,
    /// Jacobi iterations per warp
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Warp passes per level
    #[arg(long, default_value_t = 2)]
    warps: usize,
}

impl FlowFlags {
    fn params(&self) -> HsParams {
        HsParams {
            lambda: self.lambda,
            iterations: self.iters,
            levels: self.levels,
            warps: self.warps,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic labeled dataset
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Frames per sequence
        #[arg(long, default_value_t = 20)]
        frames: usize,
        /// Frame extents as WxH, both divisible by 4
        #[arg(long, value_parser = parse_size, default_value = "64x64")]
        size: Size,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of sequences
        #[arg(long, default_value_t = 1)]
        sequences: usize,
    },
    /// Chroma-key foreground frames and composite them over backgrounds
    Compose {
        /// Directory of green-screen foreground frames
        #[arg(long)]
        fg: PathBuf,
        /// Directory of background frames (cycled)
        #[arg(long)]
        bg: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Key color as RRGGBB hex
        #[arg(long, value_parser = parse_key, default_value = "00ff00")]
        key: [u8; 3],
        /// Euclidean RGB distance threshold in [0,1]
        #[arg(long, default_value_t = 0.25)]
        tolerance: f64,
    },
    /// Estimate flow for consecutive frame pairs in a directory
    Flow {
        /// Directory of input frames
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for .flo fields and magnitude images
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flow: FlowFlags,
    },
    /// Threshold cached flow fields into binary motion masks
    Mask {
        /// Directory of .flo files
        #[arg(long)]
        flows: PathBuf,
        /// Magnitude threshold, pixels/frame
        #[arg(long, default_value_t = 0.4)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmentation network on a manifest
    Train {
        /// Path to manifest.json
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// Motion-mask threshold, pixels/frame
        #[arg(long, default_value_t = 0.4)]
        alpha: f64,
        /// Flow cache directory (defaults to `flows` beside the manifest)
        #[arg(long)]
        flow_cache: Option<PathBuf>,
        #[command(flatten)]
        flow: FlowFlags,
    },
    /// Predict masks for a frame directory with a trained checkpoint
    Predict {
        /// Checkpoint path
        #[arg(long)]
        model: PathBuf,
        /// Directory of input frames
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for predicted masks
        #[arg(long)]
        out: PathBuf,
        /// Motion-mask threshold, pixels/frame
        #[arg(long, default_value_t = 0.4)]
        alpha: f64,
        /// Probability threshold for binarization
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[command(flatten)]
        flow: FlowFlags,
    },
    /// Compare predicted masks against ground truth
    Eval {
        /// Directory of predicted masks
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth masks
        #[arg(long)]
        gt: PathBuf,
        /// Where to write the JSON report
        #[arg(long, default_value = "eval_report.json")]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, result) = match cli.command {
        Command::Synth { out, frames, size, seed, sequences } => {
            if size.width % 4 != 0 || size.height % 4 != 0 {
                eprintln!(
                    "error: synth: size {}x{} must be divisible by 4",
                    size.width, size.height
                );
                return ExitCode::from(2);
            }
            ("synth", cmd_synth(&out, sequences, frames, &size, seed))
        }
        Command::Compose { fg, bg, out, key, tolerance } => {
            ("compose", cmd_compose(&fg, &bg, &out, key, tolerance))
        }
        Command::Flow { input, out, flow } => ("flow", cmd_flow(&input, &out, &flow.params())),
        Command::Mask { flows, alpha, out } => ("mask", cmd_mask(&flows, alpha, &out)),
        Command::Train { data, epochs, lr, seed, out, alpha, flow_cache, flow } => (
            "train",
            cmd_train(&data, epochs, lr, seed, &out, alpha, flow_cache, &flow.params()),
        ),
        Command::Predict { model, input, out, alpha, threshold, flow } => (
            "predict",
            cmd_predict(&model, &input, &out, alpha, threshold, &flow.params()),
        ),
        Command::Eval { pred, gt, report } => ("eval", cmd_eval(&pred, &gt, &report)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {stage}: {e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_synth(out: &Path, sequences: usize, frames: usize, size: &Size, seed: u64) -> Result<()> {
    synth_dataset(out, sequences, frames, size.width, size.height, seed)?;
    println!("{}", out.join("manifest.json").display());
    Ok(())
}

fn cmd_compose(fg: &Path, bg: &Path, out: &Path, key: [u8; 3], tolerance: f64) -> Result<()> {
    let fg_paths = list_frames(fg)?;
    if fg_paths.is_empty() {
        return Err(Error::invalid(format!("no foreground frames in {}", fg.display())));
    }
    let bg_paths = list_frames(bg)?;
    if bg_paths.is_empty() {
        return Err(Error::invalid(format!("no background frames in {}", bg.display())));
    }
    let params = ChromaKeyParams { key, tolerance };
    let frames_dir = out.join("seq_000").join("frames");
    let masks_dir = out.join("seq_000").join("masks");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    let mut records = Vec::with_capacity(fg_paths.len());
    for (i, fg_path) in fg_paths.iter().enumerate() {
        let fg_frame = rgb(load_frame(fg_path)?, fg_path)?;
        let bg_frame = rgb(load_frame(&bg_paths[i % bg_paths.len()])?, &bg_paths[i % bg_paths.len()])?;
        let mask = chroma_key(&fg_frame, &params)?;
        let composed = composite(&fg_frame, &mask, &bg_frame)?;
        let image = frames_dir.join(format!("frame_{i:06}.png"));
        let mask_path = masks_dir.join(format!("frame_{i:06}.pgm"));
        save_frame(&composed, &image)?;
        save_mask(&mask, &mask_path)?;
        records.push(FrameRecord { image, mask: mask_path });
    }
    let manifest = DatasetManifest {
        sequences: vec![SequenceRecord {
            id: "seq_000".to_string(),
            split: SPLIT_TRAIN.to_string(),
            frames: records,
        }],
    };
    let manifest_path = out.join("manifest.json");
    manifest.save(&manifest_path)?;
    println!("{}", manifest_path.display());
    Ok(())
}

fn rgb(f: Frame, path: &Path) -> Result<Frame> {
    match f.channels {
        3 => Ok(f),
        4 => {
            let data = f.data.chunks_exact(4).flat_map(|px| [px[0], px[1], px[2]]).collect();
            Frame::new(f.width, f.height, 3, data)
        }
        c => Err(Error::format(path, format!("expected a color frame, got {c} channels"))),
    }
}

fn cmd_flow(input: &Path, out: &Path, params: &HsParams) -> Result<()> {
    let frames = load_frame_dir(input)?;
    if frames.len() < 2 {
        return Err(Error::invalid(format!("{} holds fewer than 2 frames", input.display())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (i, pair) in frames.windows(2).enumerate() {
        let flow = estimate_flow(&pair[0], &pair[1], params)?;
        write_flo(&flow, out.join(format!("frame_{i:06}.flo")))?;
        let mag = flow_magnitude(&flow);
        let peak = mag.data.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
        let img = Frame {
            width: flow.width,
            height: flow.height,
            channels: 1,
            data: mag.data.iter().map(|&m| (m / peak) as f32).collect(),
        };
        save_frame(&img, out.join(format!("frame_{i:06}_mag.pgm")))?;
    }
    println!("{} flow fields written to {}", frames.len() - 1, out.display());
    Ok(())
}

fn cmd_mask(flows: &Path, alpha: f64, out: &Path) -> Result<()> {
    let entries = fs::read_dir(flows).map_err(|e| Error::io(flows, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("flo")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no .flo files in {}", flows.display())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for path in &paths {
        let flow = read_flo(path)?;
        let mask = threshold_mask(&flow_magnitude(&flow), alpha)?;
        let name = path.file_stem().unwrap().to_string_lossy();
        save_mask(&mask.as_mask_image(), out.join(format!("{name}.pgm")))?;
    }
    println!("{} masks written to {}", paths.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    epochs: usize,
    lr: f64,
    seed: u64,
    out: &Path,
    alpha: f64,
    flow_cache: Option<PathBuf>,
    hs: &HsParams,
) -> Result<()> {
    let mut manifest = DatasetManifest::load(data)?;
    manifest.validate()?;
    // Manifests straight out of `synth` carry a single split tag; assign
    // train/val/test deterministically in that case.
    let first = manifest.sequences.first().map(|s| s.split.clone());
    if manifest.sequences.iter().all(|s| Some(&s.split) == first.as_ref()) {
        split_manifest(&mut manifest, (0.6, 0.2, 0.2), seed)?;
    }
    let opts = TrainOptions {
        train: TrainConfig { learning_rate: lr, epochs, seed, ..Default::default() },
        hs: hs.clone(),
        alpha,
        ..Default::default()
    };
    let cache = flow_cache
        .unwrap_or_else(|| data.parent().unwrap_or(Path::new(".")).join("flows"));
    let metrics = out.with_extension("metrics.jsonl");
    let report = train(&manifest, &opts, &cache, out, &metrics)?;
    println!("checkpoint {}", out.display());
    if let (Some(e), Some(d)) = (report.best_epoch, report.best_val_dice) {
        println!("best_epoch={e} best_val_dice={d}");
    }
    Ok(())
}

fn cmd_predict(
    model: &Path,
    input: &Path,
    out: &Path,
    alpha: f64,
    threshold: f64,
    hs: &HsParams,
) -> Result<()> {
    let params = load_checkpoint(model)?;
    let frames = load_frame_dir(input)?;
    let masks = funet_core::evaluation::predict_sequence(&params, &frames, alpha, threshold, hs)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (i, mask) in masks.iter().enumerate() {
        save_mask(mask, out.join(format!("frame_{i:06}.pgm")))?;
    }
    println!("{} masks written to {}", masks.len(), out.display());
    Ok(())
}

fn cmd_eval(pred: &Path, gt: &Path, report_path: &Path) -> Result<()> {
    let preds = load_mask_dir(pred)?;
    let gts = load_mask_dir(gt)?;
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions but {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let per_frame: Result<Vec<f64>> =
        preds.iter().zip(&gts).map(|(p, g)| dice(p, g)).collect();
    let report = EvalReport::from_per_frame(per_frame?, 0.5);
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::invalid(format!("report serialization failed: {e}")))?;
    fs::write(report_path, json).map_err(|e| Error::io(report_path, e))?;
    println!("mean_dice={}", report.mean_dice);
    Ok(())
}
