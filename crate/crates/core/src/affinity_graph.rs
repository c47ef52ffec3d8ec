//! Pixel affinity graphs.
//!
//! Intra-image affinities compare each pixel with its neighbours at a fixed
//! set of offsets; entries whose neighbour falls outside the image are marked
//! invalid and excluded from every mean. Inter-image affinities compare every
//! pixel of one image with every pixel of another.
//!
//! Training never materializes the `(HW) x (HW)` inter-image matrix. Because
//! the student and teacher matrices are both taken against the same bank map
//! `B`, their difference is `(S - T) B^T`, and its squared Frobenius norm is
//! `sum_i d_i^T (B^T B) d_i`. [`BankGram`] evaluates the loss that way in
//! `O(HW * D^2)` and is checked against the explicit route in tests.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::{
    cosine, cosine_backward, dot, normalize_backward, EmbeddingMap, LabelMask, TensorData,
};

/// An ordered list of distinct, non-zero `(drow, dcol)` pixel offsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffsetSet(Vec<(i32, i32)>);

impl OffsetSet {
    pub fn new(offsets: Vec<(i32, i32)>) -> Result<Self> {
        if offsets.is_empty() {
            return contract_err("offset set is empty");
        }
        for (k, off) in offsets.iter().enumerate() {
            if *off == (0, 0) {
                return contract_err("offset (0,0) is not allowed");
            }
            if offsets[..k].contains(off) {
                return contract_err(format!("duplicate offset {}:{}", off.0, off.1));
            }
        }
        Ok(Self(offsets))
    }

    /// `(0,d), (d,0), (d,d), (-d,d)` for `d` in 1, 3, 9: twelve offsets.
    pub fn default_2d() -> Self {
        let offsets = [1, 3, 9]
            .into_iter()
            .flat_map(|d| [(0, d), (d, 0), (d, d), (-d, d)])
            .collect();
        Self(offsets)
    }

    pub fn as_slice(&self) -> &[(i32, i32)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Indices of offsets with max-norm 1.
    pub fn stride_one(&self) -> Vec<usize> {
        (0..self.0.len())
            .filter(|&k| {
                let (dr, dc) = self.0[k];
                dr.abs().max(dc.abs()) == 1
            })
            .collect()
    }
}

impl Default for OffsetSet {
    fn default() -> Self {
        Self::default_2d()
    }
}

impl fmt::Display for OffsetSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, (dr, dc)) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{dr}:{dc}")?;
        }
        Ok(())
    }
}

impl FromStr for OffsetSet {
    type Err = Error;

    /// Parses comma-separated `dr:dc` pairs, e.g. `0:1,1:0`.
    fn from_str(s: &str) -> Result<Self> {
        let offsets = s
            .split(',')
            .map(|pair| {
                let (dr, dc) = pair
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::Contract(format!("offset `{pair}` is not dr:dc")))?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<i32>()
                        .map_err(|e| Error::Contract(format!("offset `{pair}`: {e}")))
                };
                Ok((parse(dr)?, parse(dc)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(offsets)
    }
}

/// Flat neighbour index of pixel `(r, c)` at offset `(dr, dc)`, if in bounds.
#[inline]
fn neighbour(r: usize, c: usize, (dr, dc): (i32, i32), h: usize, w: usize) -> Option<usize> {
    let rr = r as i64 + i64::from(dr);
    let cc = c as i64 + i64::from(dc);
    (rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w)
        .then(|| rr as usize * w + cc as usize)
}

/// An `N x H x W` stack of affinities with a validity flag per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMap {
    count: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl AffinityMap {
    pub fn new(
        count: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = count * height * width;
        if n == 0 || values.len() != n || valid.len() != n {
            return dim_err(format!("affinity buffers do not match {count}x{height}x{width}"));
        }
        Ok(Self { count, height, width, values, valid })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.count, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, n: usize, row: usize, col: usize) -> Option<f64> {
        let k = (n * self.height + row) * self.width + col;
        self.valid[k].then_some(self.values[k])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Values as an f32 tensor plus the validity mask as a parallel u32 tensor.
    pub fn to_tensors(&self) -> (TensorData, TensorData) {
        let dims = vec![self.count as u32, self.height as u32, self.width as u32];
        (
            TensorData::F32 {
                dims: dims.clone(),
                values: self.values.iter().map(|&v| v as f32).collect(),
            },
            TensorData::U32 { dims, values: self.valid.iter().map(|&v| u32::from(v)).collect() },
        )
    }

    pub fn from_tensors(values: &TensorData, valid: &TensorData) -> Result<Self> {
        match (values, valid) {
            (
                TensorData::F32 { dims, values },
                TensorData::U32 { dims: vdims, values: flags },
            ) if dims.len() == 3 && dims == vdims => Self::new(
                dims[0] as usize,
                dims[1] as usize,
                dims[2] as usize,
                values.iter().map(|&v| f64::from(v)).collect(),
                flags.iter().map(|&f| f != 0).collect(),
            ),
            _ => dim_err("affinity tensors must be a rank-3 f32/u32 pair of equal shape"),
        }
    }
}

/// `a[n, p] = cos(e_p, e_{p + offset_n})` for every in-bounds neighbour.
pub fn compute_intra_affinity(map: &EmbeddingMap, offsets: &OffsetSet) -> AffinityMap {
    let (d, h, w) = map.dims();
    let pixels = map.to_pixel_major();
    let plane = h * w;
    let mut values = vec![0.0; offsets.len() * plane];
    let mut valid = vec![false; offsets.len() * plane];
    for (n, &off) in offsets.as_slice().iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                if let Some(q) = neighbour(r, c, off, h, w) {
                    let p = r * w + c;
                    let k = n * plane + p;
                    values[k] = cosine(&pixels[p * d..(p + 1) * d], &pixels[q * d..(q + 1) * d]);
                    valid[k] = true;
                }
            }
        }
    }
    AffinityMap { count: offsets.len(), height: h, width: w, values, valid }
}

/// Ground-truth affinities: 1 where both pixels carry the same label, else 0.
/// Label 0 is treated as an ordinary segment here.
pub fn gt_affinity(mask: &LabelMask, offsets: &OffsetSet) -> AffinityMap {
    let (h, w) = (mask.height(), mask.width());
    let labels = mask.labels();
    let plane = h * w;
    let mut values = vec![0.0; offsets.len() * plane];
    let mut valid = vec![false; offsets.len() * plane];
    for (n, &off) in offsets.as_slice().iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                if let Some(q) = neighbour(r, c, off, h, w) {
                    let p = r * w + c;
                    values[n * plane + p] = f64::from(u8::from(labels[p] == labels[q]));
                    valid[n * plane + p] = true;
                }
            }
        }
    }
    AffinityMap { count: offsets.len(), height: h, width: w, values, valid }
}

fn check_pair(a: &AffinityMap, b: &AffinityMap) -> Result<()> {
    if a.dims() != b.dims() {
        return contract_err(format!("affinity dims {:?} vs {:?}", a.dims(), b.dims()));
    }
    if a.valid != b.valid {
        return contract_err("affinity validity masks differ");
    }
    Ok(())
}

/// Mean squared difference over valid entries (0 when nothing is valid).
pub fn agd_intra_loss(student: &AffinityMap, target: &AffinityMap) -> Result<f64> {
    check_pair(student, target)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for k in 0..student.values.len() {
        if student.valid[k] {
            sum += (student.values[k] - target.values[k]).powi(2);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Supervision of predicted affinities by ground truth; same contract as
/// [`agd_intra_loss`].
pub fn affinity_supervision_loss(student: &AffinityMap, truth: &AffinityMap) -> Result<f64> {
    agd_intra_loss(student, truth)
}

/// Pulls `upstream` (shaped like the affinity map, invalid entries ignored)
/// back through the cosine affinities to the embedding map.
pub fn intra_affinity_backward(
    map: &EmbeddingMap,
    offsets: &OffsetSet,
    upstream: &[f64],
) -> EmbeddingMap {
    let (d, h, w) = map.dims();
    let plane = h * w;
    assert_eq!(upstream.len(), offsets.len() * plane, "upstream gradient shape");
    let pixels = map.to_pixel_major();
    let mut grad = vec![0.0; pixels.len()];
    let (mut gp, mut gq) = (vec![0.0; d], vec![0.0; d]);
    for (n, &off) in offsets.as_slice().iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                let u = upstream[n * plane + p];
                if u == 0.0 {
                    continue;
                }
                if let Some(q) = neighbour(r, c, off, h, w) {
                    gp.iter_mut().for_each(|x| *x = 0.0);
                    gq.iter_mut().for_each(|x| *x = 0.0);
                    cosine_backward(
                        &pixels[p * d..(p + 1) * d],
                        &pixels[q * d..(q + 1) * d],
                        u,
                        &mut gp,
                        &mut gq,
                    );
                    for k in 0..d {
                        grad[p * d + k] += gp[k];
                        grad[q * d + k] += gq[k];
                    }
                }
            }
        }
    }
    EmbeddingMap::from_pixel_major(d, h, w, &grad)
}

fn mse_backward(map: &EmbeddingMap, offsets: &OffsetSet, target: &AffinityMap) -> Result<EmbeddingMap> {
    if target.dims() != (offsets.len(), map.height(), map.width()) {
        return contract_err("target affinity shape does not match map and offsets");
    }
    let student = compute_intra_affinity(map, offsets);
    check_pair(&student, target)?;
    let count = student.valid_count();
    if count == 0 {
        let (d, h, w) = map.dims();
        return Ok(EmbeddingMap::zeros(d, h, w));
    }
    let scale = 2.0 / count as f64;
    let upstream: Vec<f64> = (0..student.values.len())
        .map(|k| {
            if student.valid[k] {
                scale * (student.values[k] - target.values[k])
            } else {
                0.0
            }
        })
        .collect();
    Ok(intra_affinity_backward(map, offsets, &upstream))
}

/// Gradient of `agd_intra_loss(A(student), teacher_affinity)` w.r.t. `student`.
pub fn agd_intra_backward(
    student: &EmbeddingMap,
    offsets: &OffsetSet,
    teacher_affinity: &AffinityMap,
) -> Result<EmbeddingMap> {
    mse_backward(student, offsets, teacher_affinity)
}

/// Gradient of `affinity_supervision_loss(A(student), truth)` w.r.t. `student`.
pub fn affinity_supervision_backward(
    student: &EmbeddingMap,
    offsets: &OffsetSet,
    truth: &AffinityMap,
) -> Result<EmbeddingMap> {
    mse_backward(student, offsets, truth)
}

/// Dense `(H_m W_m) x (H_l W_l)` cosine table between two images, row-major
/// over the pixels of the first.
#[derive(Clone, Debug, PartialEq)]
pub struct InterAffinityMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl InterAffinityMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

fn unit_pixels(map: &EmbeddingMap) -> Vec<f64> {
    let d = map.channels();
    let mut pixels = map.to_pixel_major();
    for px in pixels.chunks_mut(d) {
        crate::tensor::normalize_in_place(px);
    }
    pixels
}

fn check_same_shape(a: &EmbeddingMap, b: &EmbeddingMap) -> Result<()> {
    if !a.same_shape(b) {
        return contract_err(format!("map shapes {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// `A[i][j] = e_i^m . e_j^l` after normalizing every pixel to unit length.
pub fn compute_inter_affinity(source: &EmbeddingMap, bank: &EmbeddingMap) -> Result<InterAffinityMap> {
    check_same_shape(source, bank)?;
    let d = source.channels();
    let s = unit_pixels(source);
    let b = unit_pixels(bank);
    let (rows, cols) = (source.plane(), bank.plane());
    let mut values = Vec::with_capacity(rows * cols);
    for si in s.chunks(d) {
        for bj in b.chunks(d) {
            values.push(dot(si, bj));
        }
    }
    Ok(InterAffinityMap { rows, cols, values })
}

/// Mean squared entry difference over all `L * (HW)^2` entries.
pub fn agd_inter_loss(student: &[InterAffinityMap], teacher: &[InterAffinityMap]) -> Result<f64> {
    if student.len() != teacher.len() {
        return contract_err(format!("{} vs {} inter affinity maps", student.len(), teacher.len()));
    }
    if student.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        if s.dims() != t.dims() {
            return contract_err("inter affinity maps differ in shape");
        }
        let sum: f64 = s.values.iter().zip(&t.values).map(|(a, b)| (a - b).powi(2)).sum();
        total += sum / s.values.len() as f64;
    }
    Ok(total / student.len() as f64)
}

/// Gradient of [`agd_inter_loss`] w.r.t. the source student map, computed
/// through the explicit inter-affinity matrices. Bank maps are constant.
pub fn agd_inter_backward(
    student: &EmbeddingMap,
    bank: &[&EmbeddingMap],
    teacher: &[InterAffinityMap],
) -> Result<EmbeddingMap> {
    if bank.len() != teacher.len() {
        return contract_err("bank map count differs from teacher inter affinity count");
    }
    let (d, h, w) = student.dims();
    let s = unit_pixels(student);
    let mut grad_unit = vec![0.0; s.len()];
    for (bank_map, target) in bank.iter().zip(teacher) {
        check_same_shape(student, bank_map)?;
        if target.dims() != (student.plane(), bank_map.plane()) {
            return contract_err("teacher inter affinity shape mismatch");
        }
        let b = unit_pixels(bank_map);
        let scale = 2.0 / (bank.len() * target.values.len()) as f64;
        for (i, si) in s.chunks(d).enumerate() {
            let gi = &mut grad_unit[i * d..(i + 1) * d];
            for (j, bj) in b.chunks(d).enumerate() {
                let r = scale * (dot(si, bj) - target.get(i, j));
                for k in 0..d {
                    gi[k] += r * bj[k];
                }
            }
        }
    }
    Ok(unit_backward(student, &grad_unit, d, h, w))
}

fn unit_backward(map: &EmbeddingMap, grad_unit: &[f64], d: usize, h: usize, w: usize) -> EmbeddingMap {
    let raw = map.to_pixel_major();
    let mut grad = vec![0.0; raw.len()];
    for p in 0..h * w {
        let range = p * d..(p + 1) * d;
        normalize_backward(&raw[range.clone()], &grad_unit[range.clone()], &mut grad[range]);
    }
    EmbeddingMap::from_pixel_major(d, h, w, &grad)
}

/// Weighted second-moment matrix of a set of bank maps,
/// `G = (1/L) sum_l (1/N_l) sum_j b_j b_j^T` over unit-normalized pixels.
///
/// With it, the inter-image affinity loss between a student map `S` and a
/// teacher map `T` of the same image is `(1/N) sum_i d_i^T G d_i` where
/// `d_i = s_i - t_i`, identical to [`agd_inter_loss`] over the explicit maps.
#[derive(Clone, Debug, PartialEq)]
pub struct BankGram {
    dim: usize,
    gram: Vec<f64>,
    shape: (usize, usize, usize),
}

impl BankGram {
    pub fn new(bank: &[&EmbeddingMap]) -> Result<Option<Self>> {
        let Some(first) = bank.first() else {
            return Ok(None);
        };
        let shape = first.dims();
        let d = first.channels();
        let mut gram = vec![0.0; d * d];
        for map in bank {
            check_same_shape(first, map)?;
            let b = unit_pixels(map);
            let weight = 1.0 / (bank.len() * map.plane()) as f64;
            for bj in b.chunks(d) {
                for r in 0..d {
                    let br = weight * bj[r];
                    for c in 0..d {
                        gram[r * d + c] += br * bj[c];
                    }
                }
            }
        }
        Ok(Some(Self { dim: d, gram, shape }))
    }

    fn check(&self, student: &EmbeddingMap, teacher: &EmbeddingMap) -> Result<()> {
        check_same_shape(student, teacher)?;
        if student.dims() != self.shape {
            return Err(Error::Contract("student map shape differs from bank maps".into()));
        }
        Ok(())
    }

    fn differences(student: &EmbeddingMap, teacher: &EmbeddingMap) -> Vec<f64> {
        let mut s = unit_pixels(student);
        let t = unit_pixels(teacher);
        s.iter_mut().zip(&t).for_each(|(a, b)| *a -= b);
        s
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for r in 0..d {
            out[r] = dot(&self.gram[r * d..(r + 1) * d], x);
        }
    }

    pub fn loss(&self, student: &EmbeddingMap, teacher: &EmbeddingMap) -> Result<f64> {
        self.check(student, teacher)?;
        let diff = Self::differences(student, teacher);
        let mut gd = vec![0.0; self.dim];
        let sum: f64 = diff
            .chunks(self.dim)
            .map(|di| {
                self.apply(di, &mut gd);
                dot(di, &gd)
            })
            .sum();
        Ok(sum / student.plane() as f64)
    }

    pub fn backward(&self, student: &EmbeddingMap, teacher: &EmbeddingMap) -> Result<EmbeddingMap> {
        self.check(student, teacher)?;
        let (d, h, w) = student.dims();
        let diff = Self::differences(student, teacher);
        let scale = 2.0 / student.plane() as f64;
        let mut grad_unit = vec![0.0; diff.len()];
        for (di, gi) in diff.chunks(d).zip(grad_unit.chunks_mut(d)) {
            self.apply(di, gi);
            gi.iter_mut().for_each(|g| *g *= scale);
        }
        Ok(unit_backward(student, &grad_unit, d, h, w))
    }
}
