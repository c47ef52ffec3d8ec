//! The composite distillation objective and its gradient with respect to the
//! student embedding map.

use serde::{Deserialize, Serialize};

use crate::affinity_graph::{
    affinity_supervision_backward, affinity_supervision_loss, agd_intra_backward, agd_intra_loss,
    compute_intra_affinity, gt_affinity, BankGram, OffsetSet,
};
use crate::error::{contract_err, Result};
use crate::instance_graph::{
    compute_nodes, cross_edges_from_nodes, igd_inter_backward, igd_inter_loss, igd_intra_backward,
    igd_intra_loss, InstanceGraph,
};
use crate::memory_bank::{BankEntry, DEFAULT_CAPACITY, DEFAULT_SAMPLE};
use crate::tensor::{EmbeddingMap, LabelMask};

use super::adam::AdamConfig;

/// Weights of the five distillation terms, in order: intra node, intra edge,
/// intra affinity, inter edge, inter affinity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub node_intra: f64,
    pub edge_intra: f64,
    pub agd_intra: f64,
    pub edge_inter: f64,
    pub agd_inter: f64,
}

impl LossWeights {
    pub const ZERO: Self =
        Self { node_intra: 0.0, edge_intra: 0.0, agd_intra: 0.0, edge_inter: 0.0, agd_inter: 0.0 };

    pub fn from_array(l: [f64; 5]) -> Self {
        Self { node_intra: l[0], edge_intra: l[1], agd_intra: l[2], edge_inter: l[3], agd_inter: l[4] }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.node_intra, self.edge_intra, self.agd_intra, self.edge_inter, self.agd_inter]
    }

    /// The same weights with both inter-image terms switched off.
    pub fn intra_only(self) -> Self {
        Self { edge_inter: 0.0, agd_inter: 0.0, ..self }
    }

    fn uses_teacher(self) -> bool {
        self.to_array().iter().any(|&l| l != 0.0)
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::from_array([0.1, 0.1, 10.0, 1.0, 1.0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub batch: usize,
    pub iterations: usize,
    pub bank_capacity: usize,
    pub bank_sample: usize,
    #[serde(with = "offsets_serde")]
    pub offsets: OffsetSet,
    pub embed_dim: usize,
    pub teacher_width: usize,
    pub student_width: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            batch: 2,
            iterations: 2000,
            bank_capacity: DEFAULT_CAPACITY,
            bank_sample: DEFAULT_SAMPLE,
            offsets: OffsetSet::default_2d(),
            embed_dim: 8,
            teacher_width: 32,
            student_width: 4,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.to_array().iter().any(|&l| !(l >= 0.0)) {
            return contract_err("loss weights must be non-negative");
        }
        let a = &self.adam;
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0) {
            return contract_err("Adam betas must lie in (0, 1)");
        }
        if !(a.lr > 0.0) || !(a.eps > 0.0) {
            return contract_err("learning rate and Adam epsilon must be positive");
        }
        if self.batch == 0 || self.bank_capacity == 0 || self.bank_sample == 0 {
            return contract_err("batch size and bank sizes must be positive");
        }
        if self.embed_dim == 0 || self.teacher_width == 0 || self.student_width == 0 {
            return contract_err("network sizes must be positive");
        }
        Ok(())
    }

    /// `key: value` lines, used as the provenance sidecar of checkpoints.
    pub fn to_text(&self) -> String {
        let l = self.weights.to_array();
        let mut s = String::new();
        for (k, v) in l.iter().enumerate() {
            s += &format!("lambda{}: {v}\n", k + 1);
        }
        s += &format!(
            "lr: {}\nbeta1: {}\nbeta2: {}\nadam_eps: {}\nbatch: {}\niterations: {}\nbank_k: {}\nbank_l: {}\noffsets: {}\nembed_dim: {}\nteacher_width: {}\nstudent_width: {}\nseed: {}\n",
            self.adam.lr,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.eps,
            self.batch,
            self.iterations,
            self.bank_capacity,
            self.bank_sample,
            self.offsets,
            self.embed_dim,
            self.teacher_width,
            self.student_width,
            self.seed
        );
        s
    }
}

mod offsets_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::affinity_graph::OffsetSet;

    pub fn serialize<S: Serializer>(o: &OffsetSet, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&o.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<OffsetSet, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-term loss values of one iteration (or the mean over a batch).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub aff: f64,
    pub node_intra: f64,
    pub edge_intra: f64,
    pub agd_intra: f64,
    pub edge_inter: f64,
    pub agd_inter: f64,
    pub total: f64,
}

impl LossReport {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.aff
            + w.node_intra * self.node_intra
            + w.edge_intra * self.edge_intra
            + w.agd_intra * self.agd_intra
            + w.edge_inter * self.edge_inter
            + w.agd_inter * self.agd_inter
    }

    pub fn terms(&self) -> [f64; 6] {
        [self.aff, self.node_intra, self.edge_intra, self.agd_intra, self.edge_inter, self.agd_inter]
    }

    /// Term-wise mean of several reports, total recomputed from the weights.
    pub fn mean(reports: &[LossReport], w: &LossWeights, iteration: usize) -> LossReport {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mut r = LossReport {
            iteration,
            aff: sum(|r| r.aff),
            node_intra: sum(|r| r.node_intra),
            edge_intra: sum(|r| r.edge_intra),
            agd_intra: sum(|r| r.agd_intra),
            edge_inter: sum(|r| r.edge_inter),
            agd_inter: sum(|r| r.agd_inter),
            total: 0.0,
        };
        r.total = r.weighted_total(w);
        r
    }
}

/// Loss terms and `dL/dE_S` for one student map. Terms with zero weight are
/// neither computed nor reported; without a teacher only the supervision
/// term is evaluated.
pub(crate) fn objective(
    student: &EmbeddingMap,
    teacher: Option<&EmbeddingMap>,
    mask: &LabelMask,
    bank: &[&BankEntry],
    weights: &LossWeights,
    offsets: &OffsetSet,
) -> Result<(LossReport, EmbeddingMap)> {
    let mut report = LossReport::default();
    let truth = gt_affinity(mask, offsets);
    let predicted = compute_intra_affinity(student, offsets);
    report.aff = affinity_supervision_loss(&predicted, &truth)?;
    let mut grad = affinity_supervision_backward(student, offsets, &truth)?;

    let Some(teacher) = teacher.filter(|_| weights.uses_teacher()) else {
        report.total = report.weighted_total(weights);
        return Ok((report, grad));
    };
    if !student.same_shape(teacher) {
        return contract_err("student and teacher maps differ in shape");
    }

    if weights.node_intra != 0.0 || weights.edge_intra != 0.0 {
        let gs = InstanceGraph::build(student, mask)?;
        let gt = InstanceGraph::build(teacher, mask)?;
        let (node, edge) = igd_intra_loss(&gs, &gt)?;
        if weights.node_intra != 0.0 {
            report.node_intra = node;
        }
        if weights.edge_intra != 0.0 {
            report.edge_intra = edge;
        }
        let g = igd_intra_backward(student, mask, &gt, weights.node_intra, weights.edge_intra)?;
        grad.add_scaled(1.0, &g);
    }
    if weights.agd_intra != 0.0 {
        let target = compute_intra_affinity(teacher, offsets);
        report.agd_intra = agd_intra_loss(&predicted, &target)?;
        grad.add_scaled(weights.agd_intra, &agd_intra_backward(student, offsets, &target)?);
    }
    if !bank.is_empty() && weights.edge_inter != 0.0 {
        let student_nodes = compute_nodes(student, mask)?;
        let teacher_nodes = compute_nodes(teacher, mask)?;
        let mut cross_s = Vec::with_capacity(bank.len());
        let mut cross_t = Vec::with_capacity(bank.len());
        for entry in bank {
            let bank_nodes = compute_nodes(&entry.embedding, &entry.mask)?;
            cross_s.push(cross_edges_from_nodes(&student_nodes, &bank_nodes));
            cross_t.push(cross_edges_from_nodes(&teacher_nodes, &bank_nodes));
        }
        report.edge_inter = igd_inter_loss(&cross_s, &cross_t)?;
        let pairs: Vec<_> = bank.iter().map(|e| e.as_pair()).collect();
        grad.add_scaled(weights.edge_inter, &igd_inter_backward(student, mask, &pairs, &cross_t)?);
    }
    if !bank.is_empty() && weights.agd_inter != 0.0 {
        let maps: Vec<&EmbeddingMap> = bank.iter().map(|e| &e.embedding).collect();
        let gram = BankGram::new(&maps)?.expect("non-empty bank");
        report.agd_inter = gram.loss(student, teacher)?;
        grad.add_scaled(weights.agd_inter, &gram.backward(student, teacher)?);
    }
    report.total = report.weighted_total(weights);
    Ok((report, grad))
}

/// The full weighted objective for one image: supervision of the student's
/// affinities plus the five distillation terms. An empty bank contributes
/// zero to both inter-image terms.
pub fn total_loss(
    student: &EmbeddingMap,
    teacher: &EmbeddingMap,
    mask: &LabelMask,
    bank: &[&BankEntry],
    config: &TrainerConfig,
) -> Result<(LossReport, EmbeddingMap)> {
    objective(student, Some(teacher), mask, bank, &config.weights, &config.offsets)
}
