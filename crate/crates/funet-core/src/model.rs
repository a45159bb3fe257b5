//! The segmentation network: a two-stage encoder-decoder over 4-channel
//! motion+appearance input, with deterministic initialization, explicit
//! backward pass, and bit-exact checkpoint serialization.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::MaskImage;
use crate::rng::Lcg64;
use crate::tensorops::{
    concat_channels, conv2d_backward, conv2d_forward, maxpool2x2_backward, maxpool2x2_forward,
    relu_backward, relu_forward, sigmoid, split_channels, upsample2x_backward, upsample2x_nearest,
    Pad, PoolIndices, Tensor,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FUNT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Network widths. Input spatial extents must be divisible by 4
/// (two pooling stages).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FUNetConfig {
    pub in_channels: usize,
    pub enc1: usize,
    pub enc2: usize,
    pub bottleneck: usize,
    pub out_channels: usize,
}

impl Default for FUNetConfig {
    fn default() -> Self {
        FUNetConfig { in_channels: 4, enc1: 16, enc2: 32, bottleneck: 64, out_channels: 1 }
    }
}

impl FUNetConfig {
    /// Small widths for gradient-check tests.
    pub fn tiny() -> Self {
        FUNetConfig { in_channels: 4, enc1: 2, enc2: 3, bottleneck: 4, out_channels: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients for one conv layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

pub const LAYER_NAMES: [&str; 13] = [
    "enc1.conv1",
    "enc1.conv2",
    "enc2.conv1",
    "enc2.conv2",
    "bottleneck.conv1",
    "bottleneck.conv2",
    "up2.conv",
    "dec2.conv1",
    "dec2.conv2",
    "up1.conv",
    "dec1.conv1",
    "dec1.conv2",
    "out.conv",
];

// Layer indices, in LAYER_NAMES order.
const L_ENC1A: usize = 0;
const L_ENC1B: usize = 1;
const L_ENC2A: usize = 2;
const L_ENC2B: usize = 3;
const L_BOTA: usize = 4;
const L_BOTB: usize = 5;
const L_UP2: usize = 6;
const L_DEC2A: usize = 7;
const L_DEC2B: usize = 8;
const L_UP1: usize = 9;
const L_DEC1A: usize = 10;
const L_DEC1B: usize = 11;
const L_OUT: usize = 12;

/// Weight shapes [Cout, Cin, kh, kw] for every layer, in order.
pub fn layer_shapes(c: &FUNetConfig) -> [[usize; 4]; 13] {
    [
        [c.enc1, c.in_channels, 3, 3],
        [c.enc1, c.enc1, 3, 3],
        [c.enc2, c.enc1, 3, 3],
        [c.enc2, c.enc2, 3, 3],
        [c.bottleneck, c.enc2, 3, 3],
        [c.bottleneck, c.bottleneck, 3, 3],
        [c.enc2, c.bottleneck, 2, 2],
        [c.enc2, 2 * c.enc2, 3, 3],
        [c.enc2, c.enc2, 3, 3],
        [c.enc1, c.enc2, 2, 2],
        [c.enc1, 2 * c.enc1, 3, 3],
        [c.enc1, c.enc1, 3, 3],
        [c.out_channels, c.enc1, 1, 1],
    ]
}

pub fn param_count(c: &FUNetConfig) -> usize {
    layer_shapes(c).iter().map(|s| s.iter().product::<usize>() + s[0]).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: FUNetConfig,
    /// One entry per LAYER_NAMES slot.
    pub layers: Vec<ConvLayer>,
}

impl ModelParams {
    /// Flat view of all parameter tensors, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(26);
        for (name, layer) in LAYER_NAMES.iter().zip(&self.layers) {
            out.push((format!("{name}.weight"), &layer.weight));
            out.push((format!("{name}.bias"), &layer.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }
}

/// He-uniform initialization, bound sqrt(6 / fan_in), biases zero.
/// Values are quantized to f32 so checkpoints round-trip exactly, and
/// the generator is the crate LCG so identical seeds give identical
/// parameters on every platform.
pub fn init_params(config: &FUNetConfig, seed: u64) -> ModelParams {
    let mut rng = Lcg64::new(seed);
    let mut layers = Vec::with_capacity(13);
    for shape in layer_shapes(config) {
        let fan_in = shape[1] * shape[2] * shape[3];
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.uniform(bound) as f32 as f64)
            .collect();
        layers.push(ConvLayer {
            weight: Tensor::from_vec(&shape, data).unwrap(),
            bias: Tensor::zeros(&[shape[0]]),
        });
    }
    ModelParams { config: *config, layers }
}

#[derive(Debug, Clone)]
struct DoubleConvCache {
    input: Tensor,
    z1: Tensor,
    a1: Tensor,
    z2: Tensor,
}

/// Activations recorded during forward, consumed by backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    enc1: DoubleConvCache,
    pool1: PoolIndices,
    enc2: DoubleConvCache,
    pool2: PoolIndices,
    bottleneck: DoubleConvCache,
    up2_in: Tensor,
    up2_z: Tensor,
    dec2: DoubleConvCache,
    up1_in: Tensor,
    up1_z: Tensor,
    dec1: DoubleConvCache,
    dec1_out: Tensor,
    logits_shape: Vec<usize>,
}

fn double_conv_forward(x: &Tensor, a: &ConvLayer, b: &ConvLayer) -> Result<(Tensor, DoubleConvCache)> {
    let z1 = conv2d_forward(x, &a.weight, &a.bias, Pad::uniform(1), 1)?;
    let a1 = relu_forward(&z1);
    let z2 = conv2d_forward(&a1, &b.weight, &b.bias, Pad::uniform(1), 1)?;
    let out = relu_forward(&z2);
    Ok((out, DoubleConvCache { input: x.clone(), z1, a1, z2 }))
}

fn double_conv_backward(
    cache: &DoubleConvCache,
    a: &ConvLayer,
    b: &ConvLayer,
    grad_out: &Tensor,
) -> Result<(LayerGrads, LayerGrads, Tensor)> {
    let gz2 = relu_backward(&cache.z2, grad_out);
    let g2 = conv2d_backward(&cache.a1, &b.weight, &gz2, Pad::uniform(1), 1)?;
    let gz1 = relu_backward(&cache.z1, &g2.input);
    let g1 = conv2d_backward(&cache.input, &a.weight, &gz1, Pad::uniform(1), 1)?;
    Ok((
        LayerGrads { weight: g1.weight, bias: g1.bias },
        LayerGrads { weight: g2.weight, bias: g2.bias },
        g1.input,
    ))
}

/// Upsample then a 2x2 conv padded bottom/right so spatial extents are
/// preserved, then ReLU.
fn up_block_forward(x: &Tensor, l: &ConvLayer) -> Result<(Tensor, Tensor, Tensor)> {
    let up = upsample2x_nearest(x)?;
    let z = conv2d_forward(&up, &l.weight, &l.bias, Pad::bottom_right(1), 1)?;
    let a = relu_forward(&z);
    Ok((a, up, z))
}

/// Full forward pass: encoder, bottleneck, decoder with skip
/// concatenations, 1x1 projection to logits (no final activation).
pub fn forward(params: &ModelParams, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
    let (_, c, h, w) = x.dims4()?;
    if c != params.config.in_channels {
        return Err(Error::shape(format!(
            "input has {c} channels, model expects {}",
            params.config.in_channels
        )));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(format!("input extents {h}x{w} must be divisible by 4")));
    }
    let l = &params.layers;

    let (e1, c_e1) = double_conv_forward(x, &l[L_ENC1A], &l[L_ENC1B])?;
    let (p1, i1) = maxpool2x2_forward(&e1)?;
    let (e2, c_e2) = double_conv_forward(&p1, &l[L_ENC2A], &l[L_ENC2B])?;
    let (p2, i2) = maxpool2x2_forward(&e2)?;
    let (bo, c_bot) = double_conv_forward(&p2, &l[L_BOTA], &l[L_BOTB])?;

    let (a_up2, up2_in, up2_z) = up_block_forward(&bo, &l[L_UP2])?;
    let cat2 = concat_channels(&e2, &a_up2)?;
    let (d2, c_d2) = double_conv_forward(&cat2, &l[L_DEC2A], &l[L_DEC2B])?;

    let (a_up1, up1_in, up1_z) = up_block_forward(&d2, &l[L_UP1])?;
    let cat1 = concat_channels(&e1, &a_up1)?;
    let (d1, c_d1) = double_conv_forward(&cat1, &l[L_DEC1A], &l[L_DEC1B])?;

    let logits = conv2d_forward(&d1, &l[L_OUT].weight, &l[L_OUT].bias, Pad::uniform(0), 1)?;
    let cache = ForwardCache {
        enc1: c_e1,
        pool1: i1,
        enc2: c_e2,
        pool2: i2,
        bottleneck: c_bot,
        up2_in,
        up2_z,
        dec2: c_d2,
        up1_in,
        up1_z,
        dec1: c_d1,
        dec1_out: d1,
        logits_shape: logits.shape.clone(),
    };
    Ok((logits, cache))
}

fn add_into(target: &mut Tensor, other: &Tensor) {
    for (t, o) in target.data.iter_mut().zip(&other.data) {
        *t += o;
    }
}

/// Chain rule through the exact layer list of `forward`. Returns one
/// LayerGrads per layer, in LAYER_NAMES order.
pub fn backward(params: &ModelParams, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Vec<LayerGrads>> {
    if grad_logits.shape != cache.logits_shape {
        return Err(Error::shape(format!(
            "grad_logits shape {:?} does not match cached logits shape {:?}",
            grad_logits.shape, cache.logits_shape
        )));
    }
    let l = &params.layers;
    let mut grads: Vec<Option<LayerGrads>> = vec![None; 13];

    let g_out = conv2d_backward(&cache.dec1_out, &l[L_OUT].weight, grad_logits, Pad::uniform(0), 1)?;
    grads[L_OUT] = Some(LayerGrads { weight: g_out.weight, bias: g_out.bias });

    let (g10, g11, g_cat1) = double_conv_backward(&cache.dec1, &l[L_DEC1A], &l[L_DEC1B], &g_out.input)?;
    grads[L_DEC1A] = Some(g10);
    grads[L_DEC1B] = Some(g11);
    let (g_skip1, g_aup1) = split_channels(&g_cat1, params.config.enc1)?;

    let g_zup1 = relu_backward(&cache.up1_z, &g_aup1);
    let g_up1 = conv2d_backward(&cache.up1_in, &l[L_UP1].weight, &g_zup1, Pad::bottom_right(1), 1)?;
    grads[L_UP1] = Some(LayerGrads { weight: g_up1.weight, bias: g_up1.bias });
    let g_d2 = upsample2x_backward(&g_up1.input)?;

    let (g7, g8, g_cat2) = double_conv_backward(&cache.dec2, &l[L_DEC2A], &l[L_DEC2B], &g_d2)?;
    grads[L_DEC2A] = Some(g7);
    grads[L_DEC2B] = Some(g8);
    let (g_skip2, g_aup2) = split_channels(&g_cat2, params.config.enc2)?;

    let g_zup2 = relu_backward(&cache.up2_z, &g_aup2);
    let g_up2 = conv2d_backward(&cache.up2_in, &l[L_UP2].weight, &g_zup2, Pad::bottom_right(1), 1)?;
    grads[L_UP2] = Some(LayerGrads { weight: g_up2.weight, bias: g_up2.bias });
    let g_bo = upsample2x_backward(&g_up2.input)?;

    let (g4, g5, g_p2) = double_conv_backward(&cache.bottleneck, &l[L_BOTA], &l[L_BOTB], &g_bo)?;
    grads[L_BOTA] = Some(g4);
    grads[L_BOTB] = Some(g5);

    let mut g_e2 = maxpool2x2_backward(&cache.pool2, &g_p2)?;
    add_into(&mut g_e2, &g_skip2);
    let (g2, g3, g_p1) = double_conv_backward(&cache.enc2, &l[L_ENC2A], &l[L_ENC2B], &g_e2)?;
    grads[L_ENC2A] = Some(g2);
    grads[L_ENC2B] = Some(g3);

    let mut g_e1 = maxpool2x2_backward(&cache.pool1, &g_p1)?;
    add_into(&mut g_e1, &g_skip1);
    let (g0, g1, _g_input) = double_conv_backward(&cache.enc1, &l[L_ENC1A], &l[L_ENC1B], &g_e1)?;
    grads[L_ENC1A] = Some(g0);
    grads[L_ENC1B] = Some(g1);

    Ok(grads.into_iter().map(|g| g.unwrap()).collect())
}

/// Binarize sigmoid(logits) at `threshold` into a mask. Expects
/// [1, 1, H, W] logits.
pub fn logits_to_mask(logits: &Tensor, threshold: f64) -> Result<MaskImage> {
    let (n, c, h, w) = logits.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::shape(format!("expected [1,1,H,W] logits, got {:?}", logits.shape)));
    }
    let probs = sigmoid(logits);
    let data = probs.data.iter().map(|&p| u8::from(p >= threshold)).collect();
    MaskImage::new(w, h, data)
}

fn push_tensor(bytes: &mut Vec<u8>, name: &str, t: &Tensor) {
    bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
    bytes.extend_from_slice(name.as_bytes());
    bytes.push(t.shape.len() as u8);
    for &e in &t.shape {
        bytes.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in &t.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serialize raw named tensors in the checkpoint container format.
pub fn write_checkpoint_raw(tensors: &[(String, &Tensor)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        push_tensor(&mut bytes, name, t);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parse the checkpoint container into named tensors.
pub fn read_checkpoint_raw(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: String| Error::format(path, reason);
    if bytes.len() < 12 {
        return Err(fail("truncated header".into()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail(format!("bad magic {:?} (want {:?})", &bytes[0..4], CHECKPOINT_MAGIC)));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version} (want {CHECKPOINT_VERSION})")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut off = 12;
    let mut out = Vec::with_capacity(count);
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::format(path, format!("truncated at offset {}", *off)));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| fail("tensor name is not UTF-8".into()))?;
        let rank = take(&mut off, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut off, 4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if off != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - off)));
    }
    Ok(out)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_checkpoint_raw(&params.named_tensors(), path)?;
    // Plain-text sidecar describing the widths.
    let c = &params.config;
    let sidecar = format!(
        "in_channels={}\nenc1={}\nenc2={}\nbottleneck={}\nout_channels={}\ndepth=2\n",
        c.in_channels, c.enc1, c.enc2, c.bottleneck, c.out_channels
    );
    let sidecar_path = path.with_extension("config");
    fs::write(&sidecar_path, sidecar).map_err(|e| Error::io(sidecar_path, e))
}

/// Load and validate a checkpoint. The widths are inferred from the
/// stored shapes, then every tensor is checked against the layer list.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let tensors = read_checkpoint_raw(path)?;
    let find = |name: &str| -> Result<&Tensor> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))
    };
    let e1w = find("enc1.conv1.weight")?;
    if e1w.shape.len() != 4 {
        return Err(Error::format(path, "enc1.conv1.weight is not 4-d"));
    }
    let config = FUNetConfig {
        in_channels: e1w.shape[1],
        enc1: e1w.shape[0],
        enc2: find("enc2.conv1.weight")?.shape[0],
        bottleneck: find("bottleneck.conv1.weight")?.shape[0],
        out_channels: find("out.conv.weight")?.shape[0],
    };
    let shapes = layer_shapes(&config);
    let mut layers = Vec::with_capacity(13);
    for (name, shape) in LAYER_NAMES.iter().zip(shapes) {
        let weight = find(&format!("{name}.weight"))?;
        if weight.shape != shape {
            return Err(Error::format(
                path,
                format!("{name}.weight shape {:?} != expected {:?}", weight.shape, shape),
            ));
        }
        let bias = find(&format!("{name}.bias"))?;
        if bias.shape != [shape[0]] {
            return Err(Error::format(
                path,
                format!("{name}.bias shape {:?} != expected [{}]", bias.shape, shape[0]),
            ));
        }
        layers.push(ConvLayer { weight: weight.clone(), bias: bias.clone() });
    }
    if tensors.len() != 26 {
        return Err(Error::format(path, format!("expected 26 tensors, found {}", tensors.len())));
    }
    Ok(ModelParams { config, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Lcg64;

    fn random_input(rng: &mut Lcg64, shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, (0..shape.iter().product::<usize>()).map(|_| rng.uniform(1.0)).collect())
            .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&FUNetConfig::default(), 42);
        let b = init_params(&FUNetConfig::default(), 42);
        assert_eq!(a, b);
        let c = init_params(&FUNetConfig::default(), 43);
        assert_ne!(a, c);
    }

    #[test]
    fn init_biases_zero_and_weights_bounded() {
        let p = init_params(&FUNetConfig::default(), 1);
        for layer in &p.layers {
            assert!(layer.bias.data.iter().all(|&b| b == 0.0));
        }
        // 3x3 conv with Cin=4: bound sqrt(6/36).
        let bound = (6.0f64 / 36.0).sqrt();
        for &w in &p.layers[0].weight.data {
            assert!(w.abs() <= bound, "{w} outside +-{bound}");
        }
    }

    #[test]
    fn param_count_matches_hand_tally() {
        // Independent layer-by-layer arithmetic for the default config
        // (enc 16/32, bottleneck 64, 4 in, 1 out).
        let tally = (16 * 4 * 9 + 16)
            + (16 * 16 * 9 + 16)
            + (32 * 16 * 9 + 32)
            + (32 * 32 * 9 + 32)
            + (64 * 32 * 9 + 64)
            + (64 * 64 * 9 + 64)
            + (32 * 64 * 4 + 32)
            + (32 * 64 * 9 + 32)
            + (32 * 32 * 9 + 32)
            + (16 * 32 * 4 + 16)
            + (16 * 32 * 9 + 16)
            + (16 * 16 * 9 + 16)
            + (1 * 16 * 1 + 1);
        assert_eq!(param_count(&FUNetConfig::default()), tally);
        let p = init_params(&FUNetConfig::default(), 0);
        let total: usize = p.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(total, tally);
    }

    #[test]
    fn forward_preserves_spatial_shape() {
        let p = init_params(&FUNetConfig::tiny(), 5);
        let mut rng = Lcg64::new(6);
        let x = random_input(&mut rng, &[1, 4, 16, 12]);
        let (logits, _) = forward(&p, &x).unwrap();
        assert_eq!(logits.shape, vec![1, 1, 16, 12]);
    }

    #[test]
    fn forward_rejects_indivisible_extents() {
        let p = init_params(&FUNetConfig::tiny(), 5);
        let x = Tensor::zeros(&[1, 4, 10, 8]);
        assert!(forward(&p, &x).is_err());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let config = FUNetConfig::tiny();
        let mut p = init_params(&config, 0);
        for t in p.tensors_mut() {
            t.data.fill(0.0);
        }
        let x = Tensor::zeros(&[1, 4, 8, 8]);
        let (logits, _) = forward(&p, &x).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_equals_individual_runs() {
        let p = init_params(&FUNetConfig::tiny(), 7);
        let mut rng = Lcg64::new(8);
        let a = random_input(&mut rng, &[1, 4, 8, 8]);
        let b = random_input(&mut rng, &[1, 4, 8, 8]);
        let mut batch = Tensor::zeros(&[2, 4, 8, 8]);
        batch.data[..a.len()].copy_from_slice(&a.data);
        batch.data[a.len()..].copy_from_slice(&b.data);
        let (la, _) = forward(&p, &a).unwrap();
        let (lb, _) = forward(&p, &b).unwrap();
        let (lab, _) = forward(&p, &batch).unwrap();
        for (i, &v) in la.data.iter().enumerate() {
            assert!((lab.data[i] - v).abs() < 1e-6);
        }
        for (i, &v) in lb.data.iter().enumerate() {
            assert!((lab.data[la.len() + i] - v).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_zero_grad_gives_zero() {
        let p = init_params(&FUNetConfig::tiny(), 9);
        let mut rng = Lcg64::new(10);
        let x = random_input(&mut rng, &[1, 4, 8, 8]);
        let (logits, cache) = forward(&p, &x).unwrap();
        let grads = backward(&p, &cache, &Tensor::zeros(&logits.shape)).unwrap();
        for g in grads {
            assert!(g.weight.data.iter().all(|&v| v == 0.0));
            assert!(g.bias.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let p = init_params(&FUNetConfig::tiny(), 11);
        let mut rng = Lcg64::new(12);
        let x = random_input(&mut rng, &[1, 4, 8, 8]);
        let probe = random_input(&mut rng, &[1, 1, 8, 8]);
        let (_, cache) = forward(&p, &x).unwrap();
        let g1 = backward(&p, &cache, &probe).unwrap();
        let g2 = backward(&p, &cache, &probe).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.weight.data, b.weight.data);
            assert_eq!(a.bias.data, b.bias.data);
        }
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let p = init_params(&FUNetConfig::tiny(), 13);
        let x = Tensor::zeros(&[1, 4, 8, 8]);
        let (_, cache) = forward(&p, &x).unwrap();
        let bad = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(backward(&p, &cache, &bad).is_err());
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        let config = FUNetConfig::tiny();
        let mut params = init_params(&config, 14);
        let mut rng = Lcg64::new(15);
        // Zero biases leave some pre-activations exactly on the ReLU
        // kink (wherever an upsampled patch is all zero), where central
        // differences and the subgradient legitimately disagree. Check
        // at a differentiable point instead.
        for layer in &mut params.layers {
            for b in &mut layer.bias.data {
                *b = rng.uniform(0.1);
            }
        }
        let x = random_input(&mut rng, &[1, 4, 8, 8]);
        let probe = random_input(&mut rng, &[1, 1, 8, 8]);
        let loss = |p: &ModelParams| -> f64 {
            let (logits, _) = forward(p, &x).unwrap();
            logits.data.iter().zip(&probe.data).map(|(l, pr)| l * pr).sum()
        };
        let (_, cache) = forward(&params, &x).unwrap();
        let grads = backward(&params, &cache, &probe).unwrap();
        let h = 1e-4;
        // Check a deterministic sample of entries in every layer plus
        // every bias; the full sweep is exercised in the acceptance
        // suite.
        for (li, layer) in params.layers.iter().enumerate() {
            let n = layer.weight.len();
            let step = (n / 12).max(1);
            for idx in (0..n).step_by(step) {
                let mut pp = params.clone();
                pp.layers[li].weight.data[idx] += h;
                let fp = loss(&pp);
                pp.layers[li].weight.data[idx] -= 2.0 * h;
                let fm = loss(&pp);
                let num = (fp - fm) / (2.0 * h);
                let ana = grads[li].weight.data[idx];
                let denom = num.abs().max(ana.abs()).max(1e-4);
                assert!(
                    (num - ana).abs() / denom < 1e-3,
                    "layer {li} weight[{idx}]: analytic {ana} vs numeric {num}"
                );
            }
            for idx in 0..layer.bias.len() {
                let mut pp = params.clone();
                pp.layers[li].bias.data[idx] += h;
                let fp = loss(&pp);
                pp.layers[li].bias.data[idx] -= 2.0 * h;
                let fm = loss(&pp);
                let num = (fp - fm) / (2.0 * h);
                let ana = grads[li].bias.data[idx];
                let denom = num.abs().max(ana.abs()).max(1e-4);
                assert!(
                    (num - ana).abs() / denom < 1e-3,
                    "layer {li} bias[{idx}]: analytic {ana} vs numeric {num}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = init_params(&FUNetConfig::tiny(), 16);
        save_checkpoint(&p, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, p);
        // Byte-identical on re-save.
        let first = fs::read(&path).unwrap();
        save_checkpoint(&loaded, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        // Sidecar exists and names the widths.
        let sidecar = fs::read_to_string(path.with_extension("config")).unwrap();
        assert!(sidecar.contains("enc1=2"));
    }

    #[test]
    fn checkpoint_bad_magic_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn checkpoint_bad_version_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.ckpt");
        let mut bytes = CHECKPOINT_MAGIC.to_vec();
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn hand_assembled_minimal_checkpoint_parses() {
        // One 1x1x1x1 tensor named "w" with value 0.5, bytes laid out
        // by hand.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mini.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FUNT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(b"w");
        bytes.push(4);
        for _ in 0..4 {
            bytes.extend_from_slice(&1u32.to_le_bytes());
        }
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let tensors = read_checkpoint_raw(&path).unwrap();
        assert_eq!(tensors.len(), 1);
        assert_eq!(tensors[0].0, "w");
        assert_eq!(tensors[0].1.shape, vec![1, 1, 1, 1]);
        assert_eq!(tensors[0].1.data, vec![0.5]);
    }

    #[test]
    fn checkpoint_truncation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let p = init_params(&FUNetConfig::tiny(), 17);
        save_checkpoint(&p, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn logits_to_mask_thresholds_at_half() {
        let logits = Tensor::from_vec(&[1, 1, 1, 4], vec![-1.0, 0.0, 0.1, 5.0]).unwrap();
        let mask = logits_to_mask(&logits, 0.5).unwrap();
        // sigmoid(0) = 0.5 is inclusive.
        assert_eq!(mask.data, vec![0, 1, 1, 1]);
    }
}
