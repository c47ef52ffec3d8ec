//! Affinity clustering and instance-segmentation metrics.
//!
//! Conventions:
//! - Instances are ids > 0. Id 0 (background) is ignored by the
//!   instance-level metrics (SBD, |DiC|, AJI, F1, PQ), is the complement of
//!   the foreground for pixel Dice, and is an ordinary segment for VOI and
//!   ARAND.
//! - VOI is reported in bits. ARAND is `1 - F` over unordered pairs of
//!   distinct pixels.
//! - Matching ties (AJI) are broken by the raster position of the first pixel
//!   of each segment, which keeps every metric invariant under relabeling.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::affinity_graph::{AffinityMap, OffsetSet};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::{EmbeddingMap, LabelMask};

/// A full partition of the image: every pixel carries an id >= 1.
pub type Segmentation = LabelMask;

/// Joint pixel counts of two labelings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    /// `(pred id, gt id) -> pixel count`
    pub counts: BTreeMap<(u32, u32), u64>,
    pub pred_sizes: BTreeMap<u32, u64>,
    pub gt_sizes: BTreeMap<u32, u64>,
    /// Raster index of the first pixel of every segment.
    pub pred_first: BTreeMap<u32, usize>,
    pub gt_first: BTreeMap<u32, usize>,
    pub total: u64,
}

impl ContingencyTable {
    pub fn new(pred: &LabelMask, gt: &LabelMask) -> Result<Self> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return dim_err(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ));
        }
        let mut t = Self {
            counts: BTreeMap::new(),
            pred_sizes: BTreeMap::new(),
            gt_sizes: BTreeMap::new(),
            pred_first: BTreeMap::new(),
            gt_first: BTreeMap::new(),
            total: 0,
        };
        for (p, (&a, &b)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            *t.counts.entry((a, b)).or_default() += 1;
            *t.pred_sizes.entry(a).or_default() += 1;
            *t.gt_sizes.entry(b).or_default() += 1;
            t.pred_first.entry(a).or_insert(p);
            t.gt_first.entry(b).or_insert(p);
            t.total += 1;
        }
        Ok(t)
    }

    fn pred_instances(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.pred_sizes.iter().filter(|(&id, _)| id > 0).map(|(&id, &n)| (id, n))
    }

    fn gt_instances(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.gt_sizes.iter().filter(|(&id, _)| id > 0).map(|(&id, &n)| (id, n))
    }

    /// Overlaps between instances (both ids > 0), keyed by gt id.
    fn overlaps_by_gt(&self) -> BTreeMap<u32, Vec<(u32, u64)>> {
        let mut out: BTreeMap<u32, Vec<(u32, u64)>> = BTreeMap::new();
        for (&(p, g), &n) in &self.counts {
            if p > 0 && g > 0 {
                out.entry(g).or_default().push((p, n));
            }
        }
        out
    }

    fn overlaps_by_pred(&self) -> BTreeMap<u32, Vec<(u32, u64)>> {
        let mut out: BTreeMap<u32, Vec<(u32, u64)>> = BTreeMap::new();
        for (&(p, g), &n) in &self.counts {
            if p > 0 && g > 0 {
                out.entry(p).or_default().push((g, n));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sbd: f64,
    pub dic_abs: f64,
    pub aji: f64,
    pub dice: f64,
    pub f1_obj: f64,
    pub pq: f64,
    pub voi_split: f64,
    pub voi_merge: f64,
    pub voi_total: f64,
    pub arand: f64,
}

impl MetricReport {
    const KEYS: [&'static str; 10] = [
        "sbd", "dic_abs", "aji", "dice", "f1_obj", "pq", "voi_split", "voi_merge", "voi_total",
        "arand",
    ];

    fn values(&self) -> [f64; 10] {
        [
            self.sbd,
            self.dic_abs,
            self.aji,
            self.dice,
            self.f1_obj,
            self.pq,
            self.voi_split,
            self.voi_merge,
            self.voi_total,
            self.arand,
        ]
    }

    /// Field-wise mean. `dic_abs` becomes a mean count.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricReport {
            sbd: avg(|r| r.sbd),
            dic_abs: avg(|r| r.dic_abs),
            aji: avg(|r| r.aji),
            dice: avg(|r| r.dice),
            f1_obj: avg(|r| r.f1_obj),
            pq: avg(|r| r.pq),
            voi_split: avg(|r| r.voi_split),
            voi_merge: avg(|r| r.voi_merge),
            voi_total: avg(|r| r.voi_total),
            arand: avg(|r| r.arand),
        }
    }

    /// One `key: value` line per metric.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k}: {v:.6}\n"))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }
}

fn dice_of(inter: u64, a: u64, b: u64) -> f64 {
    2.0 * inter as f64 / (a + b) as f64
}

fn best_dice(
    from: impl Iterator<Item = (u32, u64)>,
    overlaps: &BTreeMap<u32, Vec<(u32, u64)>>,
    other_sizes: &BTreeMap<u32, u64>,
) -> f64 {
    let mut count = 0usize;
    let mut sum = 0.0;
    for (id, size) in from {
        count += 1;
        sum += overlaps.get(&id).map_or(0.0, |ov| {
            ov.iter()
                .map(|&(o, n)| dice_of(n, size, other_sizes[&o]))
                .fold(0.0, f64::max)
        });
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Symmetric best Dice: the smaller of the two directed best-Dice means.
/// Zero when either side has no instances.
pub fn sbd(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    let t = ContingencyTable::new(pred, gt)?;
    if t.pred_instances().next().is_none() || t.gt_instances().next().is_none() {
        return Ok(0.0);
    }
    let pred_to_gt = best_dice(t.pred_instances(), &t.overlaps_by_pred(), &t.gt_sizes);
    let gt_to_pred = best_dice(t.gt_instances(), &t.overlaps_by_gt(), &t.pred_sizes);
    Ok(pred_to_gt.min(gt_to_pred))
}

/// Absolute difference of instance counts.
pub fn dic_abs(pred: &LabelMask, gt: &LabelMask) -> Result<usize> {
    let t = ContingencyTable::new(pred, gt)?;
    Ok(t.pred_instances().count().abs_diff(t.gt_instances().count()))
}

/// Compares `a_inter / a_union` with `b_inter / b_union` exactly.
fn cmp_ratio(a: (u64, u64), b: (u64, u64)) -> Ordering {
    (u128::from(a.0) * u128::from(b.1)).cmp(&(u128::from(b.0) * u128::from(a.1)))
}

/// Aggregated Jaccard index. Each ground-truth instance is paired with its
/// best-IoU prediction (predictions may be reused); every prediction never
/// paired adds its size to the denominator.
pub fn aji(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    let t = ContingencyTable::new(pred, gt)?;
    if t.gt_instances().next().is_none() {
        return Err(Error::Domain("AJI needs at least one ground-truth instance".into()));
    }
    let overlaps = t.overlaps_by_gt();
    let (mut inter_sum, mut union_sum) = (0u64, 0u64);
    let mut used = std::collections::BTreeSet::new();
    for (g, gsize) in t.gt_instances() {
        // (pred id, intersection, union)
        let best = overlaps.get(&g).and_then(|ov| {
            ov.iter()
                .map(|&(p, n)| (p, n, gsize + t.pred_sizes[&p] - n))
                .max_by(|a, b| {
                    cmp_ratio((a.1, a.2), (b.1, b.2))
                        .then_with(|| t.pred_first[&b.0].cmp(&t.pred_first[&a.0]))
                })
        });
        match best {
            Some((p, n, u)) => {
                inter_sum += n;
                union_sum += u;
                used.insert(p);
            }
            None => union_sum += gsize,
        }
    }
    union_sum += t.pred_instances().filter(|(p, _)| !used.contains(p)).map(|(_, n)| n).sum::<u64>();
    Ok(inter_sum as f64 / union_sum as f64)
}

/// Dice of the binary foreground masks (`id > 0`); 1 when both are empty.
pub fn dice_pixel(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    let t = ContingencyTable::new(pred, gt)?;
    let fg = |sizes: &BTreeMap<u32, u64>| sizes.iter().filter(|(&k, _)| k > 0).map(|(_, &n)| n).sum::<u64>();
    let (a, b) = (fg(&t.pred_sizes), fg(&t.gt_sizes));
    let both: u64 = t.counts.iter().filter(|(&(p, g), _)| p > 0 && g > 0).map(|(_, &n)| n).sum();
    Ok(if a + b == 0 { 1.0 } else { dice_of(both, a, b) })
}

struct Matching {
    tp: usize,
    fp: usize,
    fn_: usize,
    iou_sum: f64,
}

/// Greedy one-to-one matching by descending IoU, keeping pairs with
/// IoU strictly above `threshold`.
fn match_instances(t: &ContingencyTable, threshold: f64) -> Matching {
    let mut pairs: Vec<(u32, u32, u64, u64)> = t
        .counts
        .iter()
        .filter(|(&(p, g), _)| p > 0 && g > 0)
        .map(|(&(p, g), &n)| (p, g, n, t.pred_sizes[&p] + t.gt_sizes[&g] - n))
        .filter(|&(_, _, n, u)| n as f64 / u as f64 > threshold)
        .collect();
    pairs.sort_by(|a, b| {
        cmp_ratio((b.2, b.3), (a.2, a.3))
            .then_with(|| t.gt_first[&a.1].cmp(&t.gt_first[&b.1]))
            .then_with(|| t.pred_first[&a.0].cmp(&t.pred_first[&b.0]))
    });
    let mut used_p = std::collections::BTreeSet::new();
    let mut used_g = std::collections::BTreeSet::new();
    let mut iou_sum = 0.0;
    for (p, g, n, u) in pairs {
        if !used_p.contains(&p) && !used_g.contains(&g) {
            used_p.insert(p);
            used_g.insert(g);
            iou_sum += n as f64 / u as f64;
        }
    }
    let tp = used_p.len();
    Matching {
        tp,
        fp: t.pred_instances().count() - tp,
        fn_: t.gt_instances().count() - tp,
        iou_sum,
    }
}

/// Object-level F1 with IoU matching; 1 when neither side has instances.
pub fn f1_obj(pred: &LabelMask, gt: &LabelMask, iou_threshold: f64) -> Result<f64> {
    let m = match_instances(&ContingencyTable::new(pred, gt)?, iou_threshold);
    let denom = 2 * m.tp + m.fp + m.fn_;
    Ok(if denom == 0 { 1.0 } else { 2.0 * m.tp as f64 / denom as f64 })
}

/// Panoptic quality for a single class; 1 when neither side has instances.
pub fn pq(pred: &LabelMask, gt: &LabelMask, iou_threshold: f64) -> Result<f64> {
    let m = match_instances(&ContingencyTable::new(pred, gt)?, iou_threshold);
    let denom = m.tp as f64 + 0.5 * (m.fp + m.fn_) as f64;
    Ok(if denom == 0.0 { 1.0 } else { m.iou_sum / denom })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Voi {
    /// `H(pred | gt)`: over-segmentation.
    pub split: f64,
    /// `H(gt | pred)`: under-segmentation.
    pub merge: f64,
    pub total: f64,
}

/// Variation of information in bits.
pub fn voi(pred: &LabelMask, gt: &LabelMask) -> Result<Voi> {
    let t = ContingencyTable::new(pred, gt)?;
    let n = t.total as f64;
    let (mut split, mut merge) = (0.0, 0.0);
    for (&(p, g), &c) in &t.counts {
        let pij = c as f64 / n;
        split += pij * (t.gt_sizes[&g] as f64 / c as f64).log2();
        merge += pij * (t.pred_sizes[&p] as f64 / c as f64).log2();
    }
    // tiny negative values from rounding are clamped
    let (split, merge) = (split.max(0.0), merge.max(0.0));
    Ok(Voi { split, merge, total: split + merge })
}

fn pairs(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Adapted Rand error: `1 - F` of the pair precision and recall. Precision
/// (recall) is 1 when the prediction (ground truth) has no same-segment pair.
pub fn arand(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    let t = ContingencyTable::new(pred, gt)?;
    let both: f64 = t.counts.values().map(|&c| pairs(c)).sum();
    let in_pred: f64 = t.pred_sizes.values().map(|&c| pairs(c)).sum();
    let in_gt: f64 = t.gt_sizes.values().map(|&c| pairs(c)).sum();
    let precision = if in_pred == 0.0 { 1.0 } else { both / in_pred };
    let recall = if in_gt == 0.0 { 1.0 } else { both / in_gt };
    let f = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok((1.0 - f).clamp(0.0, 1.0))
}

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Every metric for one prediction. AJI is 0 when `gt` has no instances.
pub fn evaluate(pred: &LabelMask, gt: &LabelMask) -> Result<MetricReport> {
    let v = voi(pred, gt)?;
    Ok(MetricReport {
        sbd: sbd(pred, gt)?,
        dic_abs: dic_abs(pred, gt)? as f64,
        aji: match aji(pred, gt) {
            Err(Error::Domain(_)) => 0.0,
            other => other?,
        },
        dice: dice_pixel(pred, gt)?,
        f1_obj: f1_obj(pred, gt, DEFAULT_IOU_THRESHOLD)?,
        pq: pq(pred, gt, DEFAULT_IOU_THRESHOLD)?,
        voi_split: v.split,
        voi_merge: v.merge,
        voi_total: v.total,
        arand: arand(pred, gt)?,
    })
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Connected components of the graph joining `p` and `p + n` whenever `n`
/// has max-norm 1 and `a[n, p] > threshold`. Ids are assigned 1, 2, ... in
/// raster order of each component's first pixel.
pub fn affinity_cluster(
    affinity: &AffinityMap,
    offsets: &OffsetSet,
    threshold: f64,
) -> Result<Segmentation> {
    let (count, h, w) = affinity.dims();
    if count != offsets.len() {
        return contract_err("affinity map and offset set differ in length");
    }
    if !(threshold > -1.0 && threshold < 1.0) {
        return contract_err("threshold must lie in (-1, 1)");
    }
    let local = offsets.stride_one();
    if local.is_empty() {
        return contract_err("clustering needs at least one stride-1 offset");
    }
    let plane = h * w;
    let mut uf = UnionFind::<usize>::new(plane);
    for &n in &local {
        let (dr, dc) = offsets.as_slice()[n];
        for r in 0..h {
            for c in 0..w {
                let k = n * plane + r * w + c;
                if affinity.valid()[k] && affinity.values()[k] > threshold {
                    let q = (r as i64 + i64::from(dr)) as usize * w + (c as i64 + i64::from(dc)) as usize;
                    uf.union(r * w + c, q);
                }
            }
        }
    }
    let mut ids: BTreeMap<usize, u32> = BTreeMap::new();
    let labels = (0..plane)
        .map(|p| {
            let root = uf.find_mut(p);
            let next = ids.len() as u32 + 1;
            *ids.entry(root).or_insert(next)
        })
        .collect();
    LabelMask::new(h, w, labels)
}

/// An 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let k = 3 * (row * self.width + col);
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    /// Binary PPM (`P6`).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}

/// Projects pixel embeddings on their top three principal components and
/// min-max scales each to `0..=255`. Channels with no spread, or missing
/// because `D < 3`, are filled with 128.
pub fn pca_rgb(map: &EmbeddingMap) -> RgbImage {
    let (d, h, w) = map.dims();
    let plane = h * w;
    let pixels = map.to_pixel_major();
    let mut mean = vec![0.0; d];
    for px in pixels.chunks(d) {
        mean.iter_mut().zip(px).for_each(|(m, v)| *m += v / plane as f64);
    }
    let centered = DMatrix::from_fn(plane, d, |p, k| pixels[p * d + k] - mean[k]);
    let cov = centered.transpose() * &centered / plane as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut channels: Vec<Option<Vec<f64>>> = vec![None; 3];
    for (slot, &k) in order.iter().take(3).enumerate() {
        let mut axis: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        // deterministic sign: largest-magnitude component positive
        let lead = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        let proj: Vec<f64> = (0..plane)
            .map(|p| (0..d).map(|j| centered[(p, j)] * axis[j]).sum())
            .collect();
        channels[slot] = Some(proj);
    }
    let spread = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi - lo)
    };
    let scale = channels
        .iter()
        .flatten()
        .map(|c| spread(c).1)
        .fold(0.0, f64::max)
        .max(1.0);
    let mut data = vec![128u8; plane * 3];
    for (slot, ch) in channels.iter().enumerate() {
        let Some(ch) = ch else { continue };
        let (lo, range) = spread(ch);
        if range <= 1e-9 * scale {
            continue;
        }
        for p in 0..plane {
            data[3 * p + slot] = (255.0 * (ch[p] - lo) / range).round() as u8;
        }
    }
    RgbImage { height: h, width: w, data }
}
