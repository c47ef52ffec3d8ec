//! Instance graphs: one node per labeled instance (the mean embedding of its
//! pixels) and cosine edges between nodes, within one image or across a pair
//! of images. Loss functions use the squared-error convention throughout.

use std::collections::BTreeMap;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::{cosine, cosine_backward, EmbeddingMap, LabelMask};

/// Instance id to node vector.
pub type NodeMap = BTreeMap<u32, Vec<f64>>;

/// Ordered id pair to edge weight.
pub type EdgeMap = BTreeMap<(u32, u32), f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceGraph {
    pub nodes: NodeMap,
    pub edges: EdgeMap,
}

impl InstanceGraph {
    pub fn build(map: &EmbeddingMap, mask: &LabelMask) -> Result<Self> {
        let nodes = compute_nodes(map, mask)?;
        let edges = compute_edges(&nodes);
        Ok(Self { nodes, edges })
    }

    pub fn ids(&self) -> Vec<u32> {
        self.nodes.keys().copied().collect()
    }
}

/// Edges between the instances of one image (`source`) and those of a bank
/// image, over the complete bipartite set of id pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossEdgeSet {
    pub source_ids: Vec<u32>,
    pub bank_ids: Vec<u32>,
    pub edges: EdgeMap,
}

fn check_shapes(map: &EmbeddingMap, mask: &LabelMask) -> Result<()> {
    if map.height() != mask.height() || map.width() != mask.width() {
        return dim_err(format!(
            "embedding map is {}x{} but mask is {}x{}",
            map.height(),
            map.width(),
            mask.height(),
            mask.width()
        ));
    }
    Ok(())
}

/// Mean embedding of every instance in `mask`.
pub fn compute_nodes(map: &EmbeddingMap, mask: &LabelMask) -> Result<NodeMap> {
    check_shapes(map, mask)?;
    let sets = mask.pixel_sets();
    if sets.is_empty() {
        return Err(Error::Domain("mask has no labeled instances".into()));
    }
    let d = map.channels();
    let nodes = sets
        .into_iter()
        .map(|(id, pixels)| {
            let mut v = vec![0.0; d];
            for (c, slot) in v.iter_mut().enumerate() {
                let plane = map.channel(c);
                *slot = pixels.iter().map(|&p| plane[p]).sum::<f64>() / pixels.len() as f64;
            }
            (id, v)
        })
        .collect();
    Ok(nodes)
}

/// Cosine edges for all ordered pairs `i != j`. A single node yields no edges.
pub fn compute_edges(nodes: &NodeMap) -> EdgeMap {
    let mut edges = EdgeMap::new();
    for (&i, vi) in nodes {
        for (&j, vj) in nodes {
            if i != j {
                edges.insert((i, j), cosine(vi, vj));
            }
        }
    }
    edges
}

/// Returns `(L_node, L_edge)`: mean squared node distance, and squared edge
/// differences summed over ordered pairs divided by `|I|^2`.
pub fn igd_intra_loss(student: &InstanceGraph, teacher: &InstanceGraph) -> Result<(f64, f64)> {
    if !student.nodes.keys().eq(teacher.nodes.keys()) {
        return contract_err("student and teacher graphs have different instance ids");
    }
    let n = student.nodes.len() as f64;
    let node = student
        .nodes
        .values()
        .zip(teacher.nodes.values())
        .map(|(s, t)| s.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    let edge = student
        .edges
        .iter()
        .map(|(k, s)| (s - teacher.edges[k]).powi(2))
        .sum::<f64>()
        / (n * n);
    Ok((node, edge))
}

pub fn cross_edges_from_nodes(source: &NodeMap, bank: &NodeMap) -> CrossEdgeSet {
    let mut edges = EdgeMap::new();
    for (&i, vi) in source {
        for (&j, vj) in bank {
            edges.insert((i, j), cosine(vi, vj));
        }
    }
    CrossEdgeSet {
        source_ids: source.keys().copied().collect(),
        bank_ids: bank.keys().copied().collect(),
        edges,
    }
}

pub fn compute_cross_edges(
    source_map: &EmbeddingMap,
    source_mask: &LabelMask,
    bank_map: &EmbeddingMap,
    bank_mask: &LabelMask,
) -> Result<CrossEdgeSet> {
    if source_map.channels() != bank_map.channels() {
        return dim_err("source and bank embeddings have different channel counts");
    }
    let source = compute_nodes(source_map, source_mask)?;
    let bank = compute_nodes(bank_map, bank_mask)?;
    Ok(cross_edges_from_nodes(&source, &bank))
}

fn check_cross_structure(a: &CrossEdgeSet, b: &CrossEdgeSet) -> Result<()> {
    if a.source_ids != b.source_ids || a.bank_ids != b.bank_ids {
        return contract_err("cross edge sets have different id structure");
    }
    Ok(())
}

/// Mean over bank samples of the per-sample mean squared cross-edge difference.
pub fn igd_inter_loss(student: &[CrossEdgeSet], teacher: &[CrossEdgeSet]) -> Result<f64> {
    if student.len() != teacher.len() {
        return contract_err(format!(
            "{} student cross sets vs {} teacher cross sets",
            student.len(),
            teacher.len()
        ));
    }
    if student.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        check_cross_structure(s, t)?;
        let sum: f64 = s.edges.iter().map(|(k, v)| (v - t.edges[k]).powi(2)).sum();
        total += sum / s.edges.len() as f64;
    }
    Ok(total / student.len() as f64)
}

/// Spreads per-node gradients uniformly over each instance's pixels.
fn scatter_node_grads(
    map: &EmbeddingMap,
    mask: &LabelMask,
    node_grads: &BTreeMap<u32, Vec<f64>>,
) -> EmbeddingMap {
    let (d, h, w) = map.dims();
    let mut grad = EmbeddingMap::zeros(d, h, w);
    let sets = mask.pixel_sets();
    let plane = h * w;
    let data = grad.data_mut();
    for (id, g) in node_grads {
        let pixels = &sets[id];
        let inv = 1.0 / pixels.len() as f64;
        for (c, gc) in g.iter().enumerate() {
            for &p in pixels {
                data[c * plane + p] += gc * inv;
            }
        }
    }
    grad
}

/// Gradient of `node_weight * L_node + edge_weight * L_edge` with respect to
/// the student embedding map; the teacher graph is constant.
pub fn igd_intra_backward(
    student: &EmbeddingMap,
    mask: &LabelMask,
    teacher: &InstanceGraph,
    node_weight: f64,
    edge_weight: f64,
) -> Result<EmbeddingMap> {
    let nodes = compute_nodes(student, mask)?;
    if !nodes.keys().eq(teacher.nodes.keys()) {
        return contract_err("student mask ids differ from teacher graph ids");
    }
    let n = nodes.len() as f64;
    let mut node_grads: BTreeMap<u32, Vec<f64>> =
        nodes.keys().map(|&id| (id, vec![0.0; student.channels()])).collect();

    if node_weight != 0.0 {
        let scale = 2.0 * node_weight / n;
        for (id, v) in &nodes {
            let t = &teacher.nodes[id];
            let g = node_grads.get_mut(id).unwrap();
            for k in 0..v.len() {
                g[k] += scale * (v[k] - t[k]);
            }
        }
    }
    if edge_weight != 0.0 {
        let scale = 2.0 * edge_weight / (n * n);
        let d = student.channels();
        let (mut gi, mut gj) = (vec![0.0; d], vec![0.0; d]);
        for (&i, vi) in &nodes {
            for (&j, vj) in &nodes {
                if i == j {
                    continue;
                }
                let r = cosine(vi, vj) - teacher.edges[&(i, j)];
                gi.iter_mut().for_each(|x| *x = 0.0);
                gj.iter_mut().for_each(|x| *x = 0.0);
                cosine_backward(vi, vj, scale * r, &mut gi, &mut gj);
                node_grads.get_mut(&i).unwrap().iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
                node_grads.get_mut(&j).unwrap().iter_mut().zip(&gj).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(scatter_node_grads(student, mask, &node_grads))
}

/// Gradient of [`igd_inter_loss`] with respect to the source student map.
/// Bank entries are `(embedding, mask)` pairs and are constant.
pub fn igd_inter_backward(
    student: &EmbeddingMap,
    mask: &LabelMask,
    bank: &[(&EmbeddingMap, &LabelMask)],
    teacher_cross: &[CrossEdgeSet],
) -> Result<EmbeddingMap> {
    if bank.len() != teacher_cross.len() {
        return contract_err("bank sample count differs from teacher cross set count");
    }
    let nodes = compute_nodes(student, mask)?;
    let d = student.channels();
    let mut node_grads: BTreeMap<u32, Vec<f64>> =
        nodes.keys().map(|&id| (id, vec![0.0; d])).collect();
    let mut sink = vec![0.0; d];
    for ((bank_map, bank_mask), target) in bank.iter().zip(teacher_cross) {
        if bank_map.channels() != d {
            return dim_err("bank embedding channel count differs from student");
        }
        let bank_nodes = compute_nodes(bank_map, bank_mask)?;
        if !nodes.keys().copied().eq(target.source_ids.iter().copied())
            || !bank_nodes.keys().copied().eq(target.bank_ids.iter().copied())
        {
            return contract_err("teacher cross set ids do not match student/bank masks");
        }
        let scale = 2.0 / (bank.len() * nodes.len() * bank_nodes.len()) as f64;
        for (&i, vi) in &nodes {
            let g = node_grads.get_mut(&i).unwrap();
            for (&j, vj) in &bank_nodes {
                let r = cosine(vi, vj) - target.edges[&(i, j)];
                cosine_backward(vi, vj, scale * r, g, &mut sink);
            }
        }
    }
    Ok(scatter_node_grads(student, mask, &node_grads))
}
