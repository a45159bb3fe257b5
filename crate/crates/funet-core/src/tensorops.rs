//! Dense N-D tensors and the differentiable primitives the network
//! needs. Every forward has an explicit backward; all of them are
//! deterministic scalar code, so identical inputs give bit-identical
//! outputs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(format!(
                "data length {} != shape {:?} ({expect})",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret as [N, C, H, W].
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::shape(format!("expected 4-d tensor, got {s:?}"))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Per-side spatial padding for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad {
    pub fn uniform(p: usize) -> Self {
        Pad { top: p, bottom: p, left: p, right: p }
    }

    /// Pad only below and to the right; keeps even-kernel convs
    /// shape-preserving.
    pub fn bottom_right(p: usize) -> Self {
        Pad { top: 0, bottom: p, left: 0, right: p }
    }
}

/// Gradients produced by one layer's backward pass.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

fn conv_out_extent(extent: usize, before: usize, after: usize, k: usize, stride: usize) -> Result<usize> {
    let padded = extent + before + after;
    if padded < k {
        return Err(Error::shape(format!("padded extent {padded} smaller than kernel {k}")));
    }
    Ok((padded - k) / stride + 1)
}

fn check_conv_shapes(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<()> {
    let (_, cin, _, _) = input.dims4()?;
    let (_cout, wcin, _, _) = weight.dims4()?;
    if cin != wcin {
        return Err(Error::shape(format!(
            "input channels {cin} != kernel input channels {wcin}"
        )));
    }
    if let Some(b) = bias {
        if b.shape != [weight.shape[0]] {
            return Err(Error::shape(format!(
                "bias shape {:?} != [{}]",
                b.shape, weight.shape[0]
            )));
        }
    }
    Ok(())
}

/// 2-d convolution with cross-correlation semantics (no kernel flip).
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    pad: Pad,
    stride: usize,
) -> Result<Tensor> {
    check_conv_shapes(input, weight, Some(bias))?;
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let (n, cin, h, w) = input.dims4()?;
    let (cout, _, kh, kw) = weight.dims4()?;
    let hout = conv_out_extent(h, pad.top, pad.bottom, kh, stride)?;
    let wout = conv_out_extent(w, pad.left, pad.right, kw, stride)?;

    let mut out = Tensor::zeros(&[n, cout, hout, wout]);
    for bn in 0..n {
        for co in 0..cout {
            let out_base = (bn * cout + co) * hout * wout;
            out.data[out_base..out_base + hout * wout].fill(bias.data[co]);
            for ci in 0..cin {
                let in_base = (bn * cin + ci) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = weight.data[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..hout {
                            let iy = (oy * stride + ky) as isize - pad.top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * w;
                            let out_row = out_base + oy * wout;
                            if stride == 1 {
                                // ix = ox + kx - left must land in [0, w)
                                let ox0 = pad.left.saturating_sub(kx);
                                let ox1 = (w + pad.left - kx).min(wout);
                                if ox0 >= ox1 {
                                    continue;
                                }
                                let shift = ox0 + kx - pad.left;
                                let src = &input.data[in_row + shift..in_row + shift + (ox1 - ox0)];
                                let dst = &mut out.data[out_row + ox0..out_row + ox1];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in 0..wout {
                                    let ix = (ox * stride + kx) as isize - pad.left as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    out.data[out_row + ox] +=
                                        wv * input.data[in_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of the convolution w.r.t. weight, bias, and input.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    pad: Pad,
    stride: usize,
) -> Result<ConvGrads> {
    check_conv_shapes(input, weight, None)?;
    let (n, cin, h, w) = input.dims4()?;
    let (cout, _, kh, kw) = weight.dims4()?;
    let (gn, gc, hout, wout) = grad_out.dims4()?;
    let expect_h = conv_out_extent(h, pad.top, pad.bottom, kh, stride)?;
    let expect_w = conv_out_extent(w, pad.left, pad.right, kw, stride)?;
    if (gn, gc, hout, wout) != (n, cout, expect_h, expect_w) {
        return Err(Error::shape(format!(
            "grad_out shape {:?} != expected [{n}, {cout}, {expect_h}, {expect_w}]",
            grad_out.shape
        )));
    }

    let mut gw = Tensor::zeros(&weight.shape);
    let mut gb = Tensor::zeros(&[cout]);
    let mut gi = Tensor::zeros(&input.shape);

    for bn in 0..n {
        for co in 0..cout {
            let go_base = (bn * cout + co) * hout * wout;
            let mut bias_sum = 0.0;
            for v in &grad_out.data[go_base..go_base + hout * wout] {
                bias_sum += v;
            }
            gb.data[co] += bias_sum;
            for ci in 0..cin {
                let in_base = (bn * cin + ci) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let wv = weight.data[widx];
                        let mut wsum = 0.0;
                        for oy in 0..hout {
                            let iy = (oy * stride + ky) as isize - pad.top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * w;
                            let go_row = go_base + oy * wout;
                            if stride == 1 {
                                let ox0 = pad.left.saturating_sub(kx);
                                let ox1 = (w + pad.left - kx).min(wout);
                                if ox0 >= ox1 {
                                    continue;
                                }
                                let shift = ox0 + kx - pad.left;
                                let go_slice = &grad_out.data[go_row + ox0..go_row + ox1];
                                let in_slice =
                                    &input.data[in_row + shift..in_row + shift + (ox1 - ox0)];
                                for (g, s) in go_slice.iter().zip(in_slice) {
                                    wsum += g * s;
                                }
                                let gi_slice = &mut gi.data
                                    [in_row + shift..in_row + shift + (ox1 - ox0)];
                                for (d, g) in gi_slice.iter_mut().zip(go_slice) {
                                    *d += wv * g;
                                }
                            } else {
                                for ox in 0..wout {
                                    let ix = (ox * stride + kx) as isize - pad.left as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let g = grad_out.data[go_row + ox];
                                    wsum += g * input.data[in_row + ix as usize];
                                    gi.data[in_row + ix as usize] += wv * g;
                                }
                            }
                        }
                        gw.data[widx] += wsum;
                    }
                }
            }
        }
    }
    Ok(ConvGrads { weight: gw, bias: gb, input: gi })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Pass gradient where the pre-activation was strictly positive;
/// subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    debug_assert_eq!(x.shape, grad_out.shape);
    let data = x
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor { shape: x.shape.clone(), data }
}

/// Flat input indices of each pooling window's winner; ties go to the
/// first element in row-major window order (backward routing depends on
/// this).
#[derive(Debug, Clone)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub indices: Vec<usize>,
}

pub fn maxpool2x2_forward(x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("maxpool2x2 needs even extents, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut indices = vec![0usize; out.len()];
    for nc in 0..n * c {
        let in_base = nc * h * w;
        let out_base = nc * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let i00 = in_base + (2 * oy) * w + 2 * ox;
                let window = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = window[0];
                for &i in &window[1..] {
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                out.data[out_base + oy * wo + ox] = x.data[best];
                indices[out_base + oy * wo + ox] = best;
            }
        }
    }
    Ok((out, PoolIndices { input_shape: x.shape.clone(), indices }))
}

pub fn maxpool2x2_backward(record: &PoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    if record.indices.len() != grad_out.len() {
        return Err(Error::shape("pool record does not match grad_out".to_string()));
    }
    let mut gi = Tensor::zeros(&record.input_shape);
    for (&idx, &g) in record.indices.iter().zip(&grad_out.data) {
        gi.data[idx] += g;
    }
    Ok(gi)
}

/// Each value replicated into a 2x2 block.
pub fn upsample2x_nearest(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for nc in 0..n * c {
        let in_base = nc * h * w;
        let out_base = nc * 4 * h * w;
        for y in 0..h {
            for x_ in 0..w {
                let v = x.data[in_base + y * w + x_];
                let o = out_base + (2 * y) * (2 * w) + 2 * x_;
                out.data[o] = v;
                out.data[o + 1] = v;
                out.data[o + 2 * w] = v;
                out.data[o + 2 * w + 1] = v;
            }
        }
    }
    Ok(out)
}

/// Sum the four replicated gradients back onto the source cell.
pub fn upsample2x_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, h2, w2) = grad_out.dims4()?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::shape("upsample backward needs even extents".to_string()));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gi = Tensor::zeros(&[n, c, h, w]);
    for nc in 0..n * c {
        let go_base = nc * h2 * w2;
        let gi_base = nc * h * w;
        for y in 0..h {
            for x_ in 0..w {
                let o = go_base + (2 * y) * w2 + 2 * x_;
                gi.data[gi_base + y * w + x_] =
                    grad_out.data[o] + grad_out.data[o + 1] + grad_out.data[o + w2] + grad_out.data[o + w2 + 1];
            }
        }
    }
    Ok(gi)
}

/// Channels of `a` first, then `b`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat spatial mismatch: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor::zeros(&[na, ca + cb, ha, wa]);
    let plane = ha * wa;
    for n in 0..na {
        let oa = n * (ca + cb) * plane;
        out.data[oa..oa + ca * plane].copy_from_slice(&a.data[n * ca * plane..(n + 1) * ca * plane]);
        out.data[oa + ca * plane..oa + (ca + cb) * plane]
            .copy_from_slice(&b.data[n * cb * plane..(n + 1) * cb * plane]);
    }
    Ok(out)
}

/// Inverse of `concat_channels`: split off the first `ca` channels.
pub fn split_channels(x: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    if ca > c {
        return Err(Error::shape(format!("cannot split {ca} channels out of {c}")));
    }
    let cb = c - ca;
    let plane = h * w;
    let mut a = Tensor::zeros(&[n, ca, h, w]);
    let mut b = Tensor::zeros(&[n, cb, h, w]);
    for bn in 0..n {
        let base = bn * c * plane;
        a.data[bn * ca * plane..(bn + 1) * ca * plane]
            .copy_from_slice(&x.data[base..base + ca * plane]);
        b.data[bn * cb * plane..(bn + 1) * cb * plane]
            .copy_from_slice(&x.data[base + ca * plane..base + c * plane]);
    }
    Ok((a, b))
}

/// Overflow-safe logistic function; output strictly inside (0, 1).
pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}
