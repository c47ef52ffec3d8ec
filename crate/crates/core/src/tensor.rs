//! Dense containers for embedding maps and label masks, the small amount of
//! vector math the losses are built from, and the `GRDT` binary tensor format.
//!
//! Tensors are stored in memory as `f64` so that losses and gradients can be
//! checked against finite differences; on disk real tensors are `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{dim_err, Error, Result};

/// Norms below this are treated as zero: cosine similarity against such a
/// vector is 0 and normalization maps it to the zero vector.
pub const NORM_EPS: f64 = 1e-12;

/// A `D x H x W` real tensor, row-major with the channel axis slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl EmbeddingMap {
    /// Builds a map from raw data, rejecting empty shapes and non-finite values.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return dim_err(format!("empty shape {channels}x{height}x{width}"));
        }
        if data.len() != channels * height * width {
            return dim_err(format!(
                "data length {} does not match shape {channels}x{height}x{width}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty shape");
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    /// A map whose every pixel carries the same channel vector.
    pub fn constant(pixel: &[f64], height: usize, width: usize) -> Result<Self> {
        let plane = height * width;
        let mut data = Vec::with_capacity(pixel.len() * plane);
        for &v in pixel {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Self::new(pixel.len(), height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of pixels, `H * W`.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        self.data[(channel * self.height + row) * self.width + col] = value;
    }

    /// Channel plane `c` as a flat `H * W` slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Copies the channel vector of flat pixel index `p` into `out`.
    pub fn pixel_into(&self, p: usize, out: &mut [f64]) {
        let plane = self.plane();
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.data[c * plane + p];
        }
    }

    pub fn pixel(&self, at: PixelIndex) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.pixel_into(at.row * self.width + at.col, &mut out);
        out
    }

    /// Pixel-major copy: `out[p * D + c]`. Most loss kernels iterate per pixel.
    pub fn to_pixel_major(&self) -> Vec<f64> {
        let plane = self.plane();
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for p in 0..plane {
                out[p * self.channels + c] = self.data[c * plane + p];
            }
        }
        out
    }

    /// Inverse of [`EmbeddingMap::to_pixel_major`]; no finiteness check.
    pub(crate) fn from_pixel_major(
        channels: usize,
        height: usize,
        width: usize,
        values: &[f64],
    ) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; values.len()];
        for p in 0..plane {
            for c in 0..channels {
                data[c * plane + p] = values[p * channels + c];
            }
        }
        Self { channels, height, width, data }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        assert!(self.same_shape(other), "shape mismatch in add_scaled");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_tensor(&self) -> TensorData {
        TensorData::F32 {
            dims: vec![self.channels as u32, self.height as u32, self.width as u32],
            values: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_tensor(tensor: &TensorData) -> Result<Self> {
        match tensor {
            TensorData::F32 { dims, values } if dims.len() == 3 => Self::new(
                dims[0] as usize,
                dims[1] as usize,
                dims[2] as usize,
                values.iter().map(|&v| f64::from(v)).collect(),
            ),
            other => dim_err(format!(
                "expected rank-3 f32 tensor, got {} rank {}",
                other.dtype_name(),
                other.dims().len()
            )),
        }
    }
}

/// An `H x W` grid of instance ids. Id 0 means unlabeled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return dim_err(format!("empty mask shape {height}x{width}"));
        }
        if labels.len() != height * width {
            return dim_err(format!(
                "label count {} does not match shape {height}x{width}",
                labels.len()
            ));
        }
        Ok(Self { height, width, labels })
    }

    /// Builds a mask from nested rows, mostly for fixtures.
    pub fn from_rows<R: AsRef<[u32]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != width) {
            return dim_err("ragged label rows");
        }
        let labels = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), width, labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// The instance set: distinct ids greater than zero, ascending.
    pub fn instance_ids(&self) -> Vec<u32> {
        self.pixel_sets().into_keys().collect()
    }

    /// Flat pixel indices of every instance id (> 0).
    pub fn pixel_sets(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut sets: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (p, &id) in self.labels.iter().enumerate() {
            if id > 0 {
                sets.entry(id).or_default().push(p);
            }
        }
        sets
    }

    pub fn to_tensor(&self) -> TensorData {
        TensorData::U32 {
            dims: vec![self.height as u32, self.width as u32],
            values: self.labels.clone(),
        }
    }

    pub fn from_tensor(tensor: &TensorData) -> Result<Self> {
        match tensor {
            TensorData::U32 { dims, values } if dims.len() == 2 => {
                Self::new(dims[0] as usize, dims[1] as usize, values.clone())
            }
            other => dim_err(format!(
                "expected rank-2 u32 tensor, got {} rank {}",
                other.dtype_name(),
                other.dims().len()
            )),
        }
    }
}

/// A `(row, col)` location inside a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelIndex {
    pub row: usize,
    pub col: usize,
}

impl PixelIndex {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn flat(self, width: usize) -> usize {
        self.row * width + self.col
    }

    /// Shifts by a signed offset, returning `None` outside `height x width`.
    pub fn offset(self, drow: i32, dcol: i32, height: usize, width: usize) -> Option<Self> {
        let r = self.row as i64 + i64::from(drow);
        let c = self.col as i64 + i64::from(dcol);
        (r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width)
            .then(|| Self::new(r as usize, c as usize))
    }
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity without the length check. Zero if either norm is
/// below [`NORM_EPS`].
pub(crate) fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let nu = norm(u);
    let nv = norm(v);
    if nu < NORM_EPS || nv < NORM_EPS {
        return 0.0;
    }
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// Accumulates `upstream * d cos(u, v)` into `grad_u` and `grad_v`.
pub(crate) fn cosine_backward(
    u: &[f64],
    v: &[f64],
    upstream: f64,
    grad_u: &mut [f64],
    grad_v: &mut [f64],
) {
    let nu = norm(u);
    let nv = norm(v);
    if nu < NORM_EPS || nv < NORM_EPS || upstream == 0.0 {
        return;
    }
    let inv = 1.0 / (nu * nv);
    let cos = dot(u, v) * inv;
    let su = cos / (nu * nu);
    let sv = cos / (nv * nv);
    for k in 0..u.len() {
        grad_u[k] += upstream * (v[k] * inv - su * u[k]);
        grad_v[k] += upstream * (u[k] * inv - sv * v[k]);
    }
}

/// Normalizes `x` in place; returns the original norm.
pub(crate) fn normalize_in_place(x: &mut [f64]) -> f64 {
    let n = norm(x);
    if n < NORM_EPS {
        x.iter_mut().for_each(|v| *v = 0.0);
    } else {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Pulls a gradient with respect to `x / |x|` back to `x`, accumulating into `grad_x`.
pub(crate) fn normalize_backward(x: &[f64], grad_unit: &[f64], grad_x: &mut [f64]) {
    let n = norm(x);
    if n < NORM_EPS {
        return;
    }
    let proj = dot(x, grad_unit) / (n * n);
    for k in 0..x.len() {
        grad_x[k] += (grad_unit[k] - proj * x[k]) / n;
    }
}

/// Cosine similarity `u.v / (|u||v|)`; exactly 0 when either norm is below
/// [`NORM_EPS`].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return dim_err(format!("vector lengths differ: {} vs {}", u.len(), v.len()));
    }
    if u.is_empty() {
        return dim_err("cosine of empty vectors");
    }
    Ok(cosine(u, v))
}

/// Scales every pixel's channel vector to unit length (zero vectors stay zero).
pub fn l2_normalize_map(map: &EmbeddingMap) -> EmbeddingMap {
    let (d, h, w) = map.dims();
    let mut pixels = map.to_pixel_major();
    for px in pixels.chunks_mut(d) {
        normalize_in_place(px);
    }
    EmbeddingMap::from_pixel_major(d, h, w, &pixels)
}

const MAGIC: &[u8; 4] = b"GRDT";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_U32: u8 = 1;
const MAX_RANK: u8 = 3;

/// A tensor as it exists on disk.
///
/// Layout: magic `GRDT`, version `u8 = 1`, dtype `u8` (0 = f32, 1 = u32),
/// rank `u8`, `rank` little-endian `u32` dims, then the little-endian payload.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32 { dims: Vec<u32>, values: Vec<f32> },
    U32 { dims: Vec<u32>, values: Vec<u32> },
}

impl TensorData {
    pub fn dims(&self) -> &[u32] {
        match self {
            TensorData::F32 { dims, .. } | TensorData::U32 { dims, .. } => dims,
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32 { .. } => "f32",
            TensorData::U32 { .. } => "u32",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let dims = self.dims();
        out.push(match self {
            TensorData::F32 { .. } => DTYPE_F32,
            TensorData::U32 { .. } => DTYPE_U32,
        });
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match self {
            TensorData::F32 { values, .. } => {
                values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
            }
            TensorData::U32 { values, .. } => {
                values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
            }
        }
    }

    /// Decodes a buffer holding exactly one tensor.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (tensor, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(format_err(used, "trailing bytes after tensor payload"));
        }
        Ok(tensor)
    }

    /// Decodes one tensor from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(format_err(0, "bad magic"));
        }
        let version = cur.u8()?;
        if version != VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 && dtype != DTYPE_U32 {
            return Err(format_err(5, format!("unknown dtype code {dtype}")));
        }
        let rank = cur.u8()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(format_err(6, format!("unsupported rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(cur.u32()?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| format_err(7, "element count overflows"))?;
        let payload_start = cur.pos;
        let payload_len = count
            .checked_mul(4)
            .ok_or_else(|| format_err(payload_start, "payload size overflows"))?;
        let payload = cur.take(payload_len)?;
        let words = payload.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let tensor = if dtype == DTYPE_F32 {
            TensorData::F32 { dims, values: words.map(f32::from_le_bytes).collect() }
        } else {
            TensorData::U32 { dims, values: words.map(u32::from_le_bytes).collect() }
        };
        Ok((tensor, cur.pos))
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(format_err(
                self.bytes.len(),
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            )),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &TensorData) -> Result<()> {
    fs::write(path, tensor.encode())?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorData> {
    TensorData::decode(&fs::read(path)?)
}
