//! Dense optical flow: coarse-to-fine Horn-Schunck with layer-wise
//! warping over a fixed Gaussian image pyramid, a correlation
//! cost-volume diagnostic, and Middlebury `.flo` I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::{to_grayscale, Frame};
use crate::tensorops::Tensor;

pub const FLO_MAGIC: f32 = 202021.25;

/// Per-pixel displacement field, pixels/frame. `u` is horizontal,
/// `v` vertical; positive u points right, positive v points down.
/// The convention is I1(x) ~= I2(x + w(x)).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField { width, height, u: vec![0.0; width * height], v: vec![0.0; width * height] }
    }
}

#[derive(Debug, Clone)]
pub struct HsParams {
    /// Smoothness weight.
    pub lambda: f32,
    /// Jacobi iterations per warp.
    pub iterations: usize,
    /// Pyramid levels.
    pub levels: usize,
    /// Warp/solve passes per level.
    pub warps: usize,
}

impl Default for HsParams {
    fn default() -> Self {
        HsParams { lambda: 15.0, iterations: 100, levels: 3, warps: 2 }
    }
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    /// 0 is full resolution; each level halves both extents (floor).
    pub level: usize,
    pub image: Frame,
}

/// 5-tap Gaussian, sigma 1, normalized.
fn gaussian5() -> [f32; 5] {
    let mut k = [0.0f32; 5];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f32 - 2.0;
        *v = (-d * d / 2.0).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable 5x5 Gaussian blur with replicated borders.
fn blur5(img: &Frame) -> Frame {
    let k = gaussian5();
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let sx = clamp_idx(x as isize + t as isize - 2, w);
                acc += kv * img.data[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let sy = clamp_idx(y as isize + t as isize - 2, h);
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc.clamp(0.0, 1.0);
        }
    }
    Frame { width: w, height: h, channels: 1, data: out }
}

/// Blur-then-subsample image pyramid. Level l+1 halves both extents.
pub fn build_pyramid(img: &Frame, levels: usize) -> Result<Vec<PyramidLevel>> {
    if img.channels != 1 {
        return Err(Error::invalid("pyramid input must be single-channel"));
    }
    if levels < 1 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    let min_extent = 8usize << (levels - 1);
    if img.width < min_extent || img.height < min_extent {
        return Err(Error::invalid(format!(
            "image {}x{} too small for {levels} pyramid levels (needs >= {min_extent})",
            img.width, img.height
        )));
    }
    let mut out = vec![PyramidLevel { level: 0, image: img.clone() }];
    for l in 1..levels {
        let prev = &out[l - 1].image;
        let blurred = blur5(prev);
        let (w, h) = (prev.width / 2, prev.height / 2);
        let mut data = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = blurred.data[(2 * y) * blurred.width + 2 * x];
            }
        }
        out.push(PyramidLevel { level: l, image: Frame { width: w, height: h, channels: 1, data } });
    }
    Ok(out)
}

/// Sample `img` at (x+u, y+v) with bilinear interpolation; out-of-bounds
/// coordinates clamp to the border.
pub fn warp_bilinear(img: &Frame, flow: &FlowField) -> Result<Frame> {
    if img.channels != 1 {
        return Err(Error::invalid("warp input must be single-channel"));
    }
    if img.width != flow.width || img.height != flow.height {
        return Err(Error::shape(format!(
            "warp extents {}x{} != flow extents {}x{}",
            img.width, img.height, flow.width, flow.height
        )));
    }
    let (w, h) = (img.width, img.height);
    let mut data = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (x as f32 + flow.u[i]).clamp(0.0, w as f32 - 1.0);
            let sy = (y as f32 + flow.v[i]).clamp(0.0, h as f32 - 1.0);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f32;
            let fy = sy - y0 as f32;
            let top = img.data[y0 * w + x0] * (1.0 - fx) + img.data[y0 * w + x1] * fx;
            let bot = img.data[y1 * w + x0] * (1.0 - fx) + img.data[y1 * w + x1] * fx;
            data[i] = top * (1.0 - fy) + bot * fy;
        }
    }
    Ok(Frame { width: w, height: h, channels: 1, data })
}

/// Derivatives are computed on intensities rescaled to 0..255 so the
/// default smoothness weight keeps its classic magnitude; the solve is
/// equivalent to using lambda/255 on unit-range data.
const INTENSITY_SCALE: f32 = 255.0;

/// Central differences with replicated borders, averaged over the two
/// frames; temporal difference is warped-I2 minus I1.
fn derivatives(i1: &Frame, i2w: &Frame) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (w, h) = (i1.width, i1.height);
    let mut ix = vec![0.0f32; w * h];
    let mut iy = vec![0.0f32; w * h];
    let mut it = vec![0.0f32; w * h];
    let dx = |img: &Frame, x: usize, y: usize| {
        let xm = clamp_idx(x as isize - 1, w);
        let xp = clamp_idx(x as isize + 1, w);
        (img.data[y * w + xp] - img.data[y * w + xm]) / 2.0
    };
    let dy = |img: &Frame, x: usize, y: usize| {
        let ym = clamp_idx(y as isize - 1, h);
        let yp = clamp_idx(y as isize + 1, h);
        (img.data[yp * w + x] - img.data[ym * w + x]) / 2.0
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            ix[i] = INTENSITY_SCALE * (dx(i1, x, y) + dx(i2w, x, y)) / 2.0;
            iy[i] = INTENSITY_SCALE * (dy(i1, x, y) + dy(i2w, x, y)) / 2.0;
            it[i] = INTENSITY_SCALE * (i2w.data[i] - i1.data[i]);
        }
    }
    (ix, iy, it)
}

/// 4-neighbor average with replicated borders.
fn neighbor_avg(field: &[f32], w: usize, h: usize, out: &mut [f32]) {
    for y in 0..h {
        let ym = clamp_idx(y as isize - 1, h);
        let yp = clamp_idx(y as isize + 1, h);
        for x in 0..w {
            let xm = clamp_idx(x as isize - 1, w);
            let xp = clamp_idx(x as isize + 1, w);
            out[y * w + x] =
                (field[y * w + xm] + field[y * w + xp] + field[ym * w + x] + field[yp * w + x]) / 4.0;
        }
    }
}

/// One warp pass of Horn-Schunck: warp I2 along `init`, run K Jacobi
/// iterations for the residual flow, return init plus residual.
pub fn hs_iterate(i1: &Frame, i2: &Frame, init: &FlowField, params: &HsParams) -> Result<FlowField> {
    if i1.width != i2.width || i1.height != i2.height {
        return Err(Error::shape("frame extents differ".to_string()));
    }
    let (w, h) = (i1.width, i1.height);
    let i2w = warp_bilinear(i2, init)?;
    let (ix, iy, it) = derivatives(i1, &i2w);
    let lambda2 = params.lambda * params.lambda;

    let mut u = vec![0.0f32; w * h];
    let mut v = vec![0.0f32; w * h];
    let mut ubar = vec![0.0f32; w * h];
    let mut vbar = vec![0.0f32; w * h];
    for _ in 0..params.iterations {
        neighbor_avg(&u, w, h, &mut ubar);
        neighbor_avg(&v, w, h, &mut vbar);
        for i in 0..w * h {
            let denom = lambda2 + ix[i] * ix[i] + iy[i] * iy[i];
            let t = (ix[i] * ubar[i] + iy[i] * vbar[i] + it[i]) / denom;
            u[i] = ubar[i] - ix[i] * t;
            v[i] = vbar[i] - iy[i] * t;
        }
    }
    let mut out = init.clone();
    for i in 0..w * h {
        out.u[i] += u[i];
        out.v[i] += v[i];
    }
    Ok(out)
}

/// Bilinear-resize a flow field to new extents, scaling the vectors by
/// the extent ratio.
fn upsample_flow(flow: &FlowField, new_w: usize, new_h: usize) -> FlowField {
    let sx = flow.width as f32 / new_w as f32;
    let sy = flow.height as f32 / new_h as f32;
    let scale_u = new_w as f32 / flow.width as f32;
    let scale_v = new_h as f32 / flow.height as f32;
    let mut out = FlowField::zeros(new_w, new_h);
    for y in 0..new_h {
        for x in 0..new_w {
            let cx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, flow.width as f32 - 1.0);
            let cy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, flow.height as f32 - 1.0);
            let x0 = cx.floor() as usize;
            let y0 = cy.floor() as usize;
            let x1 = (x0 + 1).min(flow.width - 1);
            let y1 = (y0 + 1).min(flow.height - 1);
            let fx = cx - x0 as f32;
            let fy = cy - y0 as f32;
            let bilerp = |p: &[f32]| {
                let top = p[y0 * flow.width + x0] * (1.0 - fx) + p[y0 * flow.width + x1] * fx;
                let bot = p[y1 * flow.width + x0] * (1.0 - fx) + p[y1 * flow.width + x1] * fx;
                top * (1.0 - fy) + bot * fy
            };
            out.u[y * new_w + x] = bilerp(&flow.u) * scale_u;
            out.v[y * new_w + x] = bilerp(&flow.v) * scale_v;
        }
    }
    out
}

/// Coarse-to-fine flow between two frames. Converts to grayscale
/// internally; at each level the accumulated flow warps the second
/// image and a residual is solved for.
pub fn estimate_flow(i1: &Frame, i2: &Frame, params: &HsParams) -> Result<FlowField> {
    if i1.width != i2.width || i1.height != i2.height {
        return Err(Error::shape(format!(
            "frame extents differ: {}x{} vs {}x{}",
            i1.width, i1.height, i2.width, i2.height
        )));
    }
    let g1 = to_grayscale(i1);
    let g2 = to_grayscale(i2);
    let p1 = build_pyramid(&g1, params.levels)?;
    let p2 = build_pyramid(&g2, params.levels)?;

    let coarsest = &p1[params.levels - 1].image;
    let mut flow = FlowField::zeros(coarsest.width, coarsest.height);
    for l in (0..params.levels).rev() {
        let l1 = &p1[l].image;
        let l2 = &p2[l].image;
        for _ in 0..params.warps.max(1) {
            flow = hs_iterate(l1, l2, &flow, params)?;
        }
        if l > 0 {
            flow = upsample_flow(&flow, p1[l - 1].image.width, p1[l - 1].image.height);
        }
    }
    Ok(flow)
}

/// Correlation cost volume: for each pixel and each displacement with
/// Chebyshev norm at most `radius`, the feature inner product divided
/// by the channel count. Out-of-bounds correspondences contribute 0.
pub fn cost_volume(f1: &Tensor, fw: &Tensor, radius: usize) -> Result<Tensor> {
    let [c, h, w] = match f1.shape.as_slice() {
        &[c, h, w] => [c, h, w],
        s => return Err(Error::shape(format!("cost_volume expects [C,H,W], got {s:?}"))),
    };
    if fw.shape != f1.shape {
        return Err(Error::shape(format!(
            "cost_volume feature shapes differ: {:?} vs {:?}",
            f1.shape, fw.shape
        )));
    }
    let side = 2 * radius + 1;
    let r = radius as isize;
    let mut out = Tensor::zeros(&[side * side, h, w]);
    for dy in -r..=r {
        for dx in -r..=r {
            let di = ((dy + r) as usize * side + (dx + r) as usize) * h * w;
            for y in 0..h {
                let y2 = y as isize + dy;
                if y2 < 0 || y2 >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let x2 = x as isize + dx;
                    if x2 < 0 || x2 >= w as isize {
                        continue;
                    }
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += f1.data[(ch * h + y) * w + x]
                            * fw.data[(ch * h + y2 as usize) * w + x2 as usize];
                    }
                    out.data[di + y * w + x] = acc / c as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Per-pixel Euclidean magnitude sqrt(u^2 + v^2), pixels/frame.
pub fn flow_magnitude(flow: &FlowField) -> Tensor {
    let data = flow
        .u
        .iter()
        .zip(&flow.v)
        .map(|(&u, &v)| ((u as f64) * (u as f64) + (v as f64) * (v as f64)).sqrt())
        .collect();
    Tensor { shape: vec![flow.height, flow.width], data }
}

/// Middlebury `.flo` writer: magic float, i32 width, i32 height, then
/// interleaved (u,v) f32 pairs, row-major, all little-endian.
pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(12 + 8 * flow.u.len());
    bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(flow.width as i32).to_le_bytes());
    bytes.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for i in 0..flow.u.len() {
        bytes.extend_from_slice(&flow.u[i].to_le_bytes());
        bytes.extend_from_slice(&flow.v[i].to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated header"));
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic} (want {FLO_MAGIC})")));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(Error::format(path, format!("bad extents {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let expect = 12 + width * height * 8;
    if bytes.len() != expect {
        return Err(Error::format(
            path,
            format!("payload length {} != expected {expect}", bytes.len()),
        ));
    }
    let mut flow = FlowField::zeros(width, height);
    for i in 0..width * height {
        let off = 12 + i * 8;
        flow.u[i] = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        flow.v[i] = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
    }
    Ok(flow)
}
