//! Reference embedding network: `conv3x3 -> ReLU -> conv3x3 -> L2 normalize`,
//! with zero ("same") padding and hand-written reverse mode.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{normalize_backward, normalize_in_place, EmbeddingMap, TensorData};

const TAPS: usize = 9;

/// Weights of the two-layer network. Also used to hold gradients and Adam
/// moments, which share its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNetParams {
    width: usize,
    embed_dim: usize,
    /// `C x 1 x 3 x 3`
    pub conv1_weight: Vec<f64>,
    pub conv1_bias: Vec<f64>,
    /// `D x C x 3 x 3`
    pub conv2_weight: Vec<f64>,
    pub conv2_bias: Vec<f64>,
}

impl ConvNetParams {
    pub fn zeros(width: usize, embed_dim: usize) -> Self {
        assert!(width > 0 && embed_dim > 0, "network width and embedding dim must be positive");
        Self {
            width,
            embed_dim,
            conv1_weight: vec![0.0; width * TAPS],
            conv1_bias: vec![0.0; width],
            conv2_weight: vec![0.0; embed_dim * width * TAPS],
            conv2_bias: vec![0.0; embed_dim],
        }
    }

    /// He-normal weights; biases uniform in `+-1/sqrt(fan_in)`.
    pub fn init(width: usize, embed_dim: usize, seed: u64) -> Self {
        let mut params = Self::zeros(width, embed_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fan1, fan2) = (TAPS as f64, (TAPS * width) as f64);
        let n1 = Normal::new(0.0, (2.0 / fan1).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (2.0 / fan2).sqrt()).unwrap();
        params.conv1_weight.iter_mut().for_each(|w| *w = n1.sample(&mut rng));
        params.conv2_weight.iter_mut().for_each(|w| *w = n2.sample(&mut rng));
        let (b1, b2) = (fan1.sqrt().recip(), fan2.sqrt().recip());
        params.conv1_bias.iter_mut().for_each(|b| *b = rng.random_range(-b1..b1));
        params.conv2_bias.iter_mut().for_each(|b| *b = rng.random_range(-b2..b2));
        params
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.conv1_weight, &self.conv1_bias, &self.conv2_weight, &self.conv2_bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.conv1_weight,
            &mut self.conv1_bias,
            &mut self.conv2_weight,
            &mut self.conv2_bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.width, self.embed_dim)
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        assert_eq!((self.width, self.embed_dim), (other.width, other.embed_dim));
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += alpha * b);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.tensors().iter().flat_map(|t| t.iter()) {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    fn named_tensors(&self) -> Vec<(&'static str, TensorData)> {
        let (c, d) = (self.width as u32, self.embed_dim as u32);
        let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        vec![
            ("conv1.weight", TensorData::F32 { dims: vec![c, 3, 3], values: f32s(&self.conv1_weight) }),
            ("conv1.bias", TensorData::F32 { dims: vec![c], values: f32s(&self.conv1_bias) }),
            ("conv2.weight", TensorData::F32 { dims: vec![d, c, 9], values: f32s(&self.conv2_weight) }),
            ("conv2.bias", TensorData::F32 { dims: vec![d], values: f32s(&self.conv2_bias) }),
        ]
    }

    /// Checkpoint container: `u32` entry count, then per entry a `u32` name
    /// length, the UTF-8 name, and one tensor record. Values are stored as f32.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let entries = self.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, tensor) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            tensor.encode_into(&mut out);
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            let b = bytes
                .get(*pos..*pos + 4)
                .ok_or_else(|| fmt_err(*pos, "truncated checkpoint header"))?;
            *pos += 4;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let count = read_u32(&mut pos)?;
        let mut found: Vec<(String, TensorData)> = Vec::new();
        for _ in 0..count {
            let len = read_u32(&mut pos)? as usize;
            let name = bytes
                .get(pos..pos + len)
                .ok_or_else(|| fmt_err(pos, "truncated tensor name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| fmt_err(pos, "name is not UTF-8"))?;
            pos += len;
            let (tensor, used) = TensorData::decode_prefix(&bytes[pos..]).map_err(|e| match e {
                Error::Format { offset, message } => fmt_err(pos + offset, message),
                other => other,
            })?;
            pos += used;
            found.push((name, tensor));
        }
        if pos != bytes.len() {
            return Err(fmt_err(pos, "trailing bytes after checkpoint"));
        }
        let take = |name: &str| -> Result<(Vec<u32>, Vec<f64>)> {
            match found.iter().find(|(n, _)| n == name) {
                Some((_, TensorData::F32 { dims, values })) => {
                    Ok((dims.clone(), values.iter().map(|&v| f64::from(v)).collect()))
                }
                Some(_) => dim_err(format!("checkpoint tensor {name} is not f32")),
                None => dim_err(format!("checkpoint is missing {name}")),
            }
        };
        let (w1_dims, w1) = take("conv1.weight")?;
        let (_, b1) = take("conv1.bias")?;
        let (w2_dims, w2) = take("conv2.weight")?;
        let (_, b2) = take("conv2.bias")?;
        let (width, embed_dim) = (w1_dims[0] as usize, w2_dims[0] as usize);
        let mut params = Self::zeros(width, embed_dim);
        for (dst, src) in params.tensors_mut().into_iter().zip([&w1, &b1, &w2, &b2]) {
            if dst.len() != src.len() {
                return dim_err("checkpoint tensor sizes are inconsistent");
            }
            dst.copy_from_slice(src);
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&fs::read(path)?)
    }
}

fn fmt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    hidden: Vec<f64>,
    raw: Vec<f64>,
}

/// Column range of output pixels whose input tap `kx` stays in bounds.
#[inline]
fn col_range(kx: usize, w: usize) -> (usize, usize) {
    (usize::from(kx == 0), if kx == 2 { w - 1 } else { w })
}

fn conv3x3(
    input: &[f64],
    in_ch: usize,
    weight: &[f64],
    bias: &[f64],
    h: usize,
    w: usize,
    out: &mut [f64],
) {
    let plane = h * w;
    for (o, &b) in bias.iter().enumerate() {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b);
        for i in 0..in_ch {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[(o * in_ch + i) * TAPS + ky * 3 + kx];
                    let (x0, x1) = col_range(kx, w);
                    for y in 0..h {
                        let yy = y + ky;
                        if yy == 0 || yy > h {
                            continue;
                        }
                        let yy = yy - 1;
                        let d = &mut dst[y * w + x0..y * w + x1];
                        let s = &src[yy * w + x0 + kx - 1..yy * w + x1 + kx - 1];
                        d.iter_mut().zip(s).for_each(|(a, b)| *a += wv * b);
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients, and input gradients when `grad_in` is given.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    in_ch: usize,
    weight: &[f64],
    grad_out: &[f64],
    out_ch: usize,
    h: usize,
    w: usize,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let plane = h * w;
    for o in 0..out_ch {
        let g = &grad_out[o * plane..(o + 1) * plane];
        grad_bias[o] += g.iter().sum::<f64>();
        for i in 0..in_ch {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = (o * in_ch + i) * TAPS + ky * 3 + kx;
                    let wv = weight[widx];
                    let (x0, x1) = col_range(kx, w);
                    let mut acc = 0.0;
                    for y in 0..h {
                        let yy = y + ky;
                        if yy == 0 || yy > h {
                            continue;
                        }
                        let yy = yy - 1;
                        let gr = &g[y * w + x0..y * w + x1];
                        let sr = yy * w + x0 + kx - 1..yy * w + x1 + kx - 1;
                        acc += gr.iter().zip(&src[sr.clone()]).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let dst = &mut gi[i * plane..(i + 1) * plane][sr];
                            dst.iter_mut().zip(gr).for_each(|(a, b)| *a += wv * b);
                        }
                    }
                    grad_weight[widx] += acc;
                }
            }
        }
    }
}

fn check_image(params: &ConvNetParams, image: &EmbeddingMap) -> Result<()> {
    if image.channels() != 1 {
        return dim_err(format!("network input must have 1 channel, got {}", image.channels()));
    }
    if image.height() < 3 || image.width() < 3 {
        return dim_err("network input must be at least 3x3");
    }
    debug_assert!(params.width > 0);
    Ok(())
}

/// Embedding map `D x H x W` for a `1 x H x W` image, plus the cache needed
/// by [`backward_cached`].
pub fn forward_cached(params: &ConvNetParams, image: &EmbeddingMap) -> Result<(EmbeddingMap, ForwardCache)> {
    check_image(params, image)?;
    let (h, w) = (image.height(), image.width());
    let plane = h * w;
    let (c, d) = (params.width, params.embed_dim);
    let mut hidden = vec![0.0; c * plane];
    conv3x3(image.data(), 1, &params.conv1_weight, &params.conv1_bias, h, w, &mut hidden);
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut raw = vec![0.0; d * plane];
    conv3x3(&hidden, c, &params.conv2_weight, &params.conv2_bias, h, w, &mut raw);

    let mut out = vec![0.0; d * plane];
    let mut px = vec![0.0; d];
    for p in 0..plane {
        for k in 0..d {
            px[k] = raw[k * plane + p];
        }
        normalize_in_place(&mut px);
        for k in 0..d {
            out[k * plane + p] = px[k];
        }
    }
    let map = EmbeddingMap::new(d, h, w, out)?;
    Ok((map, ForwardCache { hidden, raw }))
}

pub fn forward(params: &ConvNetParams, image: &EmbeddingMap) -> Result<EmbeddingMap> {
    forward_cached(params, image).map(|(m, _)| m)
}

/// Parameter gradients given `dL/dE` for the normalized output.
pub fn backward_cached(
    params: &ConvNetParams,
    image: &EmbeddingMap,
    cache: &ForwardCache,
    grad_out: &EmbeddingMap,
) -> Result<ConvNetParams> {
    let (h, w) = (image.height(), image.width());
    let (c, d) = (params.width, params.embed_dim);
    if grad_out.dims() != (d, h, w) {
        return dim_err(format!("output gradient has shape {:?}, expected {:?}", grad_out.dims(), (d, h, w)));
    }
    let plane = h * w;
    let mut grad_raw = vec![0.0; d * plane];
    let (mut x, mut g, mut gx) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let go = grad_out.data();
    for p in 0..plane {
        for k in 0..d {
            x[k] = cache.raw[k * plane + p];
            g[k] = go[k * plane + p];
            gx[k] = 0.0;
        }
        normalize_backward(&x, &g, &mut gx);
        for k in 0..d {
            grad_raw[k * plane + p] = gx[k];
        }
    }

    let mut grads = params.zeros_like();
    let mut grad_hidden = vec![0.0; c * plane];
    conv3x3_backward(
        &cache.hidden,
        c,
        &params.conv2_weight,
        &grad_raw,
        d,
        h,
        w,
        &mut grads.conv2_weight,
        &mut grads.conv2_bias,
        Some(&mut grad_hidden),
    );
    for (gh, &a) in grad_hidden.iter_mut().zip(&cache.hidden) {
        if a <= 0.0 {
            *gh = 0.0;
        }
    }
    conv3x3_backward(
        image.data(),
        1,
        &params.conv1_weight,
        &grad_hidden,
        c,
        h,
        w,
        &mut grads.conv1_weight,
        &mut grads.conv1_bias,
        None,
    );
    Ok(grads)
}

pub fn backward(params: &ConvNetParams, image: &EmbeddingMap, grad_out: &EmbeddingMap) -> Result<ConvNetParams> {
    let (_, cache) = forward_cached(params, image)?;
    backward_cached(params, image, &cache, grad_out)
}
