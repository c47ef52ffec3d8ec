//! Brute-force reference implementations shared by the integration tests.
//! They work on plain nested loops and `f64` sets and never call into the
//! crate's own graph, affinity or metric code.

#![allow(dead_code)]

pub mod bank_model;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use grd::{EmbeddingMap, LabelMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> EmbeddingMap {
    EmbeddingMap::new(d, h, w, (0..d * h * w).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Random labels in `0..=max_id` with at least one instance.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, max_id: u32) -> LabelMask {
    loop {
        let mask = LabelMask::new(h, w, (0..h * w).map(|_| rng.random_range(0..=max_id)).collect()).unwrap();
        if !mask.instance_ids().is_empty() {
            return mask;
        }
    }
}

fn vec_at(map: &EmbeddingMap, r: usize, c: usize) -> Vec<f64> {
    (0..map.channels()).map(|k| map.get(k, r, c)).collect()
}

pub fn cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// Per-instance mean embeddings over ids > 0.
pub fn nodes(map: &EmbeddingMap, mask: &LabelMask) -> BTreeMap<u32, Vec<f64>> {
    let mut sums: BTreeMap<u32, (Vec<f64>, f64)> = BTreeMap::new();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            let id = mask.get(r, c);
            if id == 0 {
                continue;
            }
            let e = sums.entry(id).or_insert((vec![0.0; map.channels()], 0.0));
            for (k, v) in vec_at(map, r, c).into_iter().enumerate() {
                e.0[k] += v;
            }
            e.1 += 1.0;
        }
    }
    sums.into_iter().map(|(id, (s, n))| (id, s.into_iter().map(|v| v / n).collect())).collect()
}

pub fn edges(nodes: &BTreeMap<u32, Vec<f64>>) -> BTreeMap<(u32, u32), f64> {
    let mut out = BTreeMap::new();
    for (&i, u) in nodes {
        for (&j, v) in nodes {
            if i != j {
                out.insert((i, j), cos(u, v));
            }
        }
    }
    out
}

/// `(value, valid)` for every `(offset, row, col)`.
pub fn intra_affinity(map: &EmbeddingMap, offsets: &[(i32, i32)]) -> Vec<(f64, bool)> {
    let (_, h, w) = map.dims();
    let mut out = Vec::new();
    for &(dr, dc) in offsets {
        for r in 0..h as i32 {
            for c in 0..w as i32 {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= h as i32 || cc >= w as i32 {
                    out.push((0.0, false));
                } else {
                    let u = vec_at(map, r as usize, c as usize);
                    let v = vec_at(map, rr as usize, cc as usize);
                    out.push((cos(&u, &v), true));
                }
            }
        }
    }
    out
}

pub fn gt_affinity(mask: &LabelMask, offsets: &[(i32, i32)]) -> Vec<(f64, bool)> {
    let (h, w) = (mask.height() as i32, mask.width() as i32);
    let mut out = Vec::new();
    for &(dr, dc) in offsets {
        for r in 0..h {
            for c in 0..w {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= h || cc >= w {
                    out.push((0.0, false));
                } else {
                    let same = mask.get(r as usize, c as usize) == mask.get(rr as usize, cc as usize);
                    out.push((if same { 1.0 } else { 0.0 }, true));
                }
            }
        }
    }
    out
}

/// Row-major over source pixels: `cos` of every source/bank pixel pair.
pub fn inter_affinity(source: &EmbeddingMap, bank: &EmbeddingMap) -> Vec<f64> {
    let (_, h, w) = source.dims();
    let mut out = Vec::new();
    for p in 0..h * w {
        for q in 0..h * w {
            out.push(cos(&vec_at(source, p / w, p % w), &vec_at(bank, q / w, q % w)));
        }
    }
    out
}

/// Breadth-first connected components over stride-1 offsets with affinity
/// above `threshold`; components numbered by first pixel in raster order.
pub fn flood_fill(values: &[(f64, bool)], offsets: &[(i32, i32)], h: usize, w: usize, threshold: f64) -> Vec<u32> {
    let plane = h * w;
    let mut adj = vec![Vec::new(); plane];
    for (n, &(dr, dc)) in offsets.iter().enumerate() {
        if dr.abs().max(dc.abs()) != 1 {
            continue;
        }
        for p in 0..plane {
            let (a, ok) = values[n * plane + p];
            if ok && a > threshold {
                let q = ((p / w) as i32 + dr) as usize * w + ((p % w) as i32 + dc) as usize;
                adj[p].push(q);
                adj[q].push(p);
            }
        }
    }
    let mut label = vec![0u32; plane];
    let mut next = 0;
    for start in 0..plane {
        if label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &adj[p] {
                if label[q] == 0 {
                    label[q] = next;
                    queue.push_back(q);
                }
            }
        }
    }
    label
}

/// Pixel sets of every id > 0.
pub fn segments(labels: &[u32]) -> BTreeMap<u32, BTreeSet<usize>> {
    let mut out: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for (p, &l) in labels.iter().enumerate() {
        if l > 0 {
            out.entry(l).or_default().insert(p);
        }
    }
    out
}

fn inter(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    a.intersection(b).count() as f64
}

fn dice(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    2.0 * inter(a, b) / (a.len() + b.len()) as f64
}

fn iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    inter(a, b) / a.union(b).count() as f64
}

fn best_dice(from: &BTreeMap<u32, BTreeSet<usize>>, to: &BTreeMap<u32, BTreeSet<usize>>) -> f64 {
    from.values().map(|a| to.values().map(|b| dice(a, b)).fold(0.0, f64::max)).sum::<f64>() / from.len() as f64
}

pub fn sbd(pred: &[u32], gt: &[u32]) -> f64 {
    let (p, g) = (segments(pred), segments(gt));
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    best_dice(&p, &g).min(best_dice(&g, &p))
}

pub fn dic(pred: &[u32], gt: &[u32]) -> usize {
    segments(pred).len().abs_diff(segments(gt).len())
}

/// `None` when the ground truth has no instances.
pub fn aji(pred: &[u32], gt: &[u32]) -> Option<f64> {
    let (p, g) = (segments(pred), segments(gt));
    if g.is_empty() {
        return None;
    }
    let (mut num, mut den) = (0.0, 0.0);
    let mut used = BTreeSet::new();
    for gs in g.values() {
        // highest IoU; ties to the segment whose first pixel comes first
        let mut best: Option<(f64, usize, u32)> = None;
        for (&pid, ps) in &p {
            let v = iou(gs, ps);
            let first = *ps.iter().next().unwrap();
            if v > 0.0 && best.is_none_or(|(bv, bf, _)| v > bv || (v == bv && first < bf)) {
                best = Some((v, first, pid));
            }
        }
        match best {
            Some((_, _, pid)) => {
                num += inter(gs, &p[&pid]);
                den += gs.union(&p[&pid]).count() as f64;
                used.insert(pid);
            }
            None => den += gs.len() as f64,
        }
    }
    for (pid, ps) in &p {
        if !used.contains(pid) {
            den += ps.len() as f64;
        }
    }
    Some(num / den)
}

pub fn dice_pixel(pred: &[u32], gt: &[u32]) -> f64 {
    let a: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] > 0).collect();
    let b: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] > 0).collect();
    if a.is_empty() && b.is_empty() {
        1.0
    } else {
        dice(&a, &b)
    }
}

/// `(tp, fp, fn, sum of matched IoU)` with IoU > 0.5 matching.
fn matches(pred: &[u32], gt: &[u32]) -> (usize, usize, usize, f64) {
    let (p, g) = (segments(pred), segments(gt));
    let mut tp = 0;
    let mut sum = 0.0;
    for gs in g.values() {
        for ps in p.values() {
            let v = iou(gs, ps);
            if v > 0.5 {
                tp += 1;
                sum += v;
            }
        }
    }
    (tp, p.len() - tp, g.len() - tp, sum)
}

pub fn f1(pred: &[u32], gt: &[u32]) -> f64 {
    let (tp, fp, fn_, _) = matches(pred, gt);
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

pub fn pq(pred: &[u32], gt: &[u32]) -> f64 {
    let (tp, fp, fn_, sum) = matches(pred, gt);
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        sum / (tp as f64 + 0.5 * (fp + fn_) as f64)
    }
}

fn entropy<K: Ord>(counts: &BTreeMap<K, f64>, n: f64) -> f64 {
    counts.values().map(|&c| -(c / n) * (c / n).log2()).sum()
}

/// `(split, merge)` in bits: `H(pred|gt)` and `H(gt|pred)`.
pub fn voi(pred: &[u32], gt: &[u32]) -> (f64, f64) {
    let n = pred.len() as f64;
    let mut joint: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut pm: BTreeMap<u32, f64> = BTreeMap::new();
    let mut gm: BTreeMap<u32, f64> = BTreeMap::new();
    for (&a, &b) in pred.iter().zip(gt) {
        *joint.entry((a, b)).or_default() += 1.0;
        *pm.entry(a).or_default() += 1.0;
        *gm.entry(b).or_default() += 1.0;
    }
    let hj = entropy(&joint, n);
    (hj - entropy(&gm, n), hj - entropy(&pm, n))
}

/// Adapted Rand error by enumerating unordered pixel pairs.
pub fn arand(pred: &[u32], gt: &[u32]) -> f64 {
    let (mut both, mut in_p, mut in_g) = (0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let sp = pred[i] == pred[j];
            let sg = gt[i] == gt[j];
            if sp {
                in_p += 1.0;
            }
            if sg {
                in_g += 1.0;
            }
            if sp && sg {
                both += 1.0;
            }
        }
    }
    let precision = if in_p == 0.0 { 1.0 } else { both / in_p };
    let recall = if in_g == 0.0 { 1.0 } else { both / in_g };
    if precision + recall == 0.0 {
        1.0
    } else {
        1.0 - 2.0 * precision * recall / (precision + recall)
    }
}

/// Every labeling of `n` pixels over `0..k`, in counting order.
pub fn all_labelings(n: usize, k: u32) -> Vec<Vec<u32>> {
    let total = (k as usize).pow(n as u32);
    (0..total)
        .map(|mut x| {
            (0..n)
                .map(|_| {
                    let d = (x % k as usize) as u32;
                    x /= k as usize;
                    d
                })
                .collect()
        })
        .collect()
}

/// Compares every metric against the brute-force references; returns the
/// first mismatch.
pub fn check_metrics(pred: &LabelMask, gt: &LabelMask) -> Result<(), String> {
    use grd::metrics;
    let (p, g) = (pred.labels(), gt.labels());
    let close = |name: &str, a: f64, b: f64| {
        if (a - b).abs() <= 1e-12 {
            Ok(())
        } else {
            Err(format!("{name}: {a} vs oracle {b} for pred {p:?} gt {g:?}"))
        }
    };
    close("sbd", metrics::sbd(pred, gt).unwrap(), sbd(p, g))?;
    close("dic", metrics::dic_abs(pred, gt).unwrap() as f64, dic(p, g) as f64)?;
    match (metrics::aji(pred, gt), aji(p, g)) {
        (Ok(a), Some(b)) => close("aji", a, b)?,
        (Err(_), None) => {}
        (a, b) => return Err(format!("aji: {a:?} vs oracle {b:?} for pred {p:?} gt {g:?}")),
    }
    close("dice", metrics::dice_pixel(pred, gt).unwrap(), dice_pixel(p, g))?;
    close("f1", metrics::f1_obj(pred, gt, 0.5).unwrap(), f1(p, g))?;
    close("pq", metrics::pq(pred, gt, 0.5).unwrap(), pq(p, g))?;
    let v = metrics::voi(pred, gt).unwrap();
    let (split, merge) = voi(p, g);
    close("voi_split", v.split, split)?;
    close("voi_merge", v.merge, merge)?;
    close("arand", metrics::arand(pred, gt).unwrap(), arand(p, g))?;
    Ok(())
}

/// Checks graphs, affinities and the clusterer against the references on
/// one seeded `h x w` fixture.
pub fn check_fixture(seed: u64, h: usize, w: usize) -> Result<(), String> {
    use grd::affinity_graph::{self as ag, OffsetSet};
    use grd::instance_graph::{compute_cross_edges, InstanceGraph};
    use grd::metrics::affinity_cluster;

    let mut rng = rng(seed);
    let d = 1 + seed as usize % 4;
    let map = random_map(&mut rng, d, h, w);
    let other = random_map(&mut rng, d, h, w);
    let mask = random_mask(&mut rng, h, w, 3);
    let other_mask = random_mask(&mut rng, h, w, 4);
    let offsets = OffsetSet::default_2d();
    let offs = offsets.as_slice();
    let err = |what: &str| Err(format!("{what} differs on seed {seed}, {h}x{w}"));
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;

    let graph = InstanceGraph::build(&map, &mask).map_err(|e| e.to_string())?;
    let want = nodes(&map, &mask);
    if graph.nodes.len() != want.len()
        || graph.nodes.iter().zip(&want).any(|((a, u), (b, v))| a != b || u.iter().zip(v).any(|(x, y)| !close(*x, *y)))
    {
        return err("nodes");
    }
    let want_edges = edges(&want);
    if graph.edges.len() != want_edges.len()
        || graph.edges.iter().zip(&want_edges).any(|((a, x), (b, y))| a != b || !close(*x, *y))
    {
        return err("edges");
    }
    let cross = compute_cross_edges(&map, &mask, &other, &other_mask).map_err(|e| e.to_string())?;
    let other_nodes = nodes(&other, &other_mask);
    for (i, u) in &want {
        for (j, v) in &other_nodes {
            if !cross.edges.get(&(*i, *j)).is_some_and(|&x| close(x, cos(u, v))) {
                return err("cross edges");
            }
        }
    }
    if cross.edges.len() != want.len() * other_nodes.len() {
        return err("cross edge count");
    }

    let aff = ag::compute_intra_affinity(&map, &offsets);
    let want_aff = intra_affinity(&map, offs);
    let same = |a: &ag::AffinityMap, b: &[(f64, bool)]| {
        a.valid().len() == b.len()
            && a.values().iter().zip(a.valid()).zip(b).all(|((&x, &ok), &(y, ok2))| ok == ok2 && (!ok || close(x, y)))
    };
    if !same(&aff, &want_aff) {
        return err("intra affinity");
    }
    if !same(&ag::gt_affinity(&mask, &offsets), &gt_affinity(&mask, offs)) {
        return err("ground-truth affinity");
    }
    let inter = ag::compute_inter_affinity(&map, &other).map_err(|e| e.to_string())?;
    if !inter.values().iter().zip(inter_affinity(&map, &other)).all(|(&a, b)| close(a, b)) {
        return err("inter affinity");
    }
    for threshold in [-0.5, 0.0, 0.3, 0.5, 0.8] {
        let seg = affinity_cluster(&aff, &offsets, threshold).map_err(|e| e.to_string())?;
        if seg.labels() != flood_fill(&want_aff, offs, h, w, threshold).as_slice() {
            return err("clustering");
        }
    }
    Ok(())
}
