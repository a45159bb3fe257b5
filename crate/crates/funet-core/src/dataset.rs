//! Dataset construction: manifest schema, chroma-key ground-truth
//! extraction, virtual-background compositing, and fully synthetic
//! labeled sequences for deterministic desk-scale runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_frame, save_frame, save_mask, Frame, MaskImage};
use crate::rng::Lcg64;

pub const SPLIT_TRAIN: &str = "train";
pub const SPLIT_VAL: &str = "val";
pub const SPLIT_TEST: &str = "test";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FrameRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SequenceRecord {
    pub id: String,
    pub split: String,
    pub frames: Vec<FrameRecord>,
}

/// Ordered corpus description. Paths are stored relative to the
/// manifest file's directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub sequences: Vec<SequenceRecord>,
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("manifest serialization failed: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Load a manifest and resolve its relative paths against the
    /// manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, format!("invalid manifest JSON: {e}")))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for seq in &mut manifest.sequences {
            for frame in &mut seq.frames {
                if frame.image.is_relative() {
                    frame.image = base.join(&frame.image);
                }
                if frame.mask.is_relative() {
                    frame.mask = base.join(&frame.mask);
                }
            }
        }
        Ok(manifest)
    }

    /// Check that every referenced file exists and each sequence's
    /// frames share extents.
    pub fn validate(&self) -> Result<()> {
        for seq in &self.sequences {
            if seq.frames.is_empty() {
                return Err(Error::invalid(format!("sequence {} has no frames", seq.id)));
            }
            let mut extents = None;
            for record in &seq.frames {
                for p in [&record.image, &record.mask] {
                    if !p.exists() {
                        return Err(Error::invalid(format!(
                            "sequence {}: dangling path {}",
                            seq.id,
                            p.display()
                        )));
                    }
                }
                let frame = load_frame(&record.image)?;
                match extents {
                    None => extents = Some((frame.width, frame.height)),
                    Some(e) => {
                        if e != (frame.width, frame.height) {
                            return Err(Error::invalid(format!(
                                "sequence {}: inconsistent extents {}x{} vs {}x{}",
                                seq.id, frame.width, frame.height, e.0, e.1
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ChromaKeyParams {
    /// Key color as 8-bit RGB.
    pub key: [u8; 3],
    /// Euclidean RGB distance threshold in [0,1] units.
    pub tolerance: f64,
}

impl Default for ChromaKeyParams {
    fn default() -> Self {
        ChromaKeyParams { key: [0, 255, 0], tolerance: 0.25 }
    }
}

/// Classify each pixel as background (0) when its Euclidean RGB
/// distance to the key color is within tolerance, else foreground (1).
pub fn chroma_key(frame: &Frame, params: &ChromaKeyParams) -> Result<MaskImage> {
    if frame.channels != 3 {
        return Err(Error::invalid(format!(
            "chroma key needs a 3-channel frame, got {}",
            frame.channels
        )));
    }
    let key = [
        params.key[0] as f64 / 255.0,
        params.key[1] as f64 / 255.0,
        params.key[2] as f64 / 255.0,
    ];
    let data = frame
        .data
        .chunks_exact(3)
        .map(|px| {
            let d2 = (0..3).map(|c| (px[c] as f64 - key[c]).powi(2)).sum::<f64>();
            u8::from(d2.sqrt() > params.tolerance)
        })
        .collect();
    MaskImage::new(frame.width, frame.height, data)
}

/// Hard binary compositing: foreground where the mask is 1, background
/// elsewhere. No mixed pixels.
pub fn composite(fg: &Frame, mask: &MaskImage, bg: &Frame) -> Result<Frame> {
    if fg.width != bg.width || fg.height != bg.height || fg.channels != bg.channels {
        return Err(Error::shape("foreground/background extents differ".to_string()));
    }
    if fg.width != mask.width || fg.height != mask.height {
        return Err(Error::shape("mask extents differ from frames".to_string()));
    }
    let mut out = fg.clone();
    for (i, &m) in mask.data.iter().enumerate() {
        if m == 0 {
            for c in 0..fg.channels {
                out.data[i * fg.channels + c] = bg.data[i * fg.channels + c];
            }
        }
    }
    Ok(out)
}

/// Head-and-shoulders silhouette: an ellipse atop a trapezoid, sized
/// relative to the frame.
fn blob_coverage(x: f64, y: f64, cx: f64, cy: f64, m: f64) -> bool {
    // Head.
    let hx = (x - cx) / (0.10 * m);
    let hy = (y - (cy - 0.18 * m)) / (0.13 * m);
    if hx * hx + hy * hy <= 1.0 {
        return true;
    }
    // Shoulders: half-width grows linearly downward.
    let top = cy - 0.05 * m;
    let bottom = cy + 0.25 * m;
    if y >= top && y <= bottom {
        let t = (y - top) / (bottom - top);
        let half_width = (0.08 + t * 0.14) * m;
        if (x - cx).abs() <= half_width {
            return true;
        }
    }
    false
}

fn smooth_texture(width: usize, height: usize, rng: &mut Lcg64) -> Vec<f32> {
    // Coarse grid bilinearly upsampled: a smooth, low-frequency field.
    let cell = 8usize;
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let grid: Vec<f64> = (0..gw * gh * 3).map(|_| 0.2 + 0.6 * rng.next_f64()).collect();
    let mut out = vec![0.0f32; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            for c in 0..3 {
                let g = |gx: usize, gy: usize| grid[(gy * gw + gx) * 3 + c];
                let top = g(x0, y0) * (1.0 - tx) + g(x0 + 1, y0) * tx;
                let bot = g(x0, y0 + 1) * (1.0 - tx) + g(x0 + 1, y0 + 1) * tx;
                out[(y * width + x) * 3 + c] = (top * (1.0 - ty) + bot * ty) as f32;
            }
        }
    }
    out
}

fn noise_texture(width: usize, height: usize, rng: &mut Lcg64) -> Vec<f32> {
    (0..width * height * 3).map(|_| (0.1 + 0.8 * rng.next_f64()) as f32).collect()
}

/// Generate one synthetic labeled sequence: a textured head-and-shoulders
/// blob translating over a distinct textured background by at most 2
/// pixels per frame. Emits `frames/frame_%06d.png`,
/// `masks/frame_%06d.pgm`, and a manifest.
pub fn synth_sequence(
    out_dir: impl AsRef<Path>,
    frames: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let record = synth_sequence_record(out_dir, "seq_000", frames, width, height, seed)?;
    let manifest = DatasetManifest { sequences: vec![record] };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Generate `sequences` independent sequences under one manifest.
pub fn synth_dataset(
    out_dir: impl AsRef<Path>,
    sequences: usize,
    frames: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let mut manifest = DatasetManifest::default();
    for s in 0..sequences {
        let id = format!("seq_{s:03}");
        // Distinct derived seed per sequence.
        let seq_seed = seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(s as u64 + 1));
        manifest.sequences.push(synth_sequence_record(out_dir, &id, frames, width, height, seq_seed)?);
    }
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn synth_sequence_record(
    out_dir: &Path,
    id: &str,
    frames: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<SequenceRecord> {
    if frames < 2 {
        return Err(Error::invalid("a sequence needs at least 2 frames"));
    }
    if width % 4 != 0 || height % 4 != 0 {
        return Err(Error::invalid(format!("extents {width}x{height} must be divisible by 4")));
    }
    let frames_dir = out_dir.join(id).join("frames");
    let masks_dir = out_dir.join(id).join("masks");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let mut rng = Lcg64::new(seed);
    let bg = smooth_texture(width, height, &mut rng);
    let fg = noise_texture(width, height, &mut rng);
    let m = width.min(height) as f64;

    let mut cx = (0.35 + 0.3 * rng.next_f64()) * width as f64;
    let mut cy = (0.4 + 0.2 * rng.next_f64()) * height as f64;
    // Anchor for the foreground texture so it translates with the blob.
    let (ax0, ay0) = (cx, cy);

    let mut records = Vec::with_capacity(frames);
    for f in 0..frames {
        if f > 0 {
            // Seeded random walk, step magnitude in [0.8, 2.0] px.
            let angle = rng.next_f64() * std::f64::consts::TAU;
            let step = 0.8 + 1.2 * rng.next_f64();
            let (mut dx, mut dy) = (step * angle.cos(), step * angle.sin());
            // Reflect off a central box so the blob stays in frame.
            if !(0.3 * width as f64..=0.7 * width as f64).contains(&(cx + dx)) {
                dx = -dx;
            }
            if !(0.35 * height as f64..=0.65 * height as f64).contains(&(cy + dy)) {
                dy = -dy;
            }
            cx += dx;
            cy += dy;
        }
        let shift_x = (cx - ax0).round() as isize;
        let shift_y = (cy - ay0).round() as isize;

        let mut frame = Frame::zeros(width, height, 3);
        let mut mask = MaskImage::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let inside = blob_coverage(x as f64, y as f64, cx, cy, m);
                let i = (y * width + x) * 3;
                if inside {
                    let tx = (x as isize - shift_x).rem_euclid(width as isize) as usize;
                    let ty = (y as isize - shift_y).rem_euclid(height as isize) as usize;
                    let t = (ty * width + tx) * 3;
                    frame.data[i..i + 3].copy_from_slice(&fg[t..t + 3]);
                    mask.data[y * width + x] = 1;
                } else {
                    frame.data[i..i + 3].copy_from_slice(&bg[i..i + 3]);
                }
            }
        }
        let image_rel = PathBuf::from(id).join("frames").join(format!("frame_{f:06}.png"));
        let mask_rel = PathBuf::from(id).join("masks").join(format!("frame_{f:06}.pgm"));
        save_frame(&frame, out_dir.join(&image_rel))?;
        save_mask(&mask, out_dir.join(&mask_rel))?;
        records.push(FrameRecord { image: image_rel, mask: mask_rel });
    }
    Ok(SequenceRecord { id: id.to_string(), split: SPLIT_TRAIN.to_string(), frames: records })
}
