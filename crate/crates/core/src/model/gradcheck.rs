//! Central finite-difference checks of every analytic gradient.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::affinity_graph::{
    affinity_supervision_backward, affinity_supervision_loss, agd_inter_backward, agd_inter_loss,
    agd_intra_backward, agd_intra_loss, compute_inter_affinity, compute_intra_affinity,
    gt_affinity, InterAffinityMap, OffsetSet,
};
use crate::error::{contract_err, Error, Result};
use crate::instance_graph::{
    compute_cross_edges, igd_inter_backward, igd_inter_loss, igd_intra_backward, igd_intra_loss,
    InstanceGraph,
};
use crate::memory_bank::BankEntry;
use crate::tensor::{dot, EmbeddingMap, LabelMask};

use super::network::{backward, forward, ConvNetParams};
use super::objective::{objective, LossWeights};

pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossSelector {
    NodeIntra,
    EdgeIntra,
    AgdIntra,
    Aff,
    EdgeInter,
    AgdInter,
    Total,
    Model,
}

impl LossSelector {
    pub const ALL: [LossSelector; 8] = [
        Self::NodeIntra,
        Self::EdgeIntra,
        Self::AgdIntra,
        Self::Aff,
        Self::EdgeInter,
        Self::AgdInter,
        Self::Total,
        Self::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::NodeIntra => "node_intra",
            Self::EdgeIntra => "edge_intra",
            Self::AgdIntra => "agd_intra",
            Self::Aff => "aff",
            Self::EdgeInter => "edge_inter",
            Self::AgdInter => "agd_inter",
            Self::Total => "total",
            Self::Model => "model",
        }
    }
}

impl fmt::Display for LossSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown loss selector `{s}`")))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest entry-wise relative error; 0 for empty or all-zero inputs.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// A seeded `size x size` problem with `D = 3`, 2-3 instances and a
/// background region, plus a bank of two entries.
pub struct Fixture {
    pub student: EmbeddingMap,
    pub teacher: EmbeddingMap,
    pub mask: LabelMask,
    pub bank: Vec<BankEntry>,
    pub offsets: OffsetSet,
}

fn random_map(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> EmbeddingMap {
    EmbeddingMap::new(d, h, w, (0..d * h * w).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMask {
    loop {
        let labels: Vec<u32> = (0..h * w).map(|_| rng.random_range(0..4)).collect();
        let mask = LabelMask::new(h, w, labels).unwrap();
        if mask.instance_ids().len() >= 2 {
            return mask;
        }
    }
}

impl Fixture {
    pub fn new(size: usize, seed: u64) -> Result<Self> {
        if !(2..=4).contains(&size) {
            return contract_err("gradient-check instances are 2x2 to 4x4");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let student = random_map(&mut rng, d, size, size);
        let teacher = random_map(&mut rng, d, size, size);
        let mask = random_mask(&mut rng, size, size);
        let bank = (0..2)
            .map(|k| {
                let m = random_map(&mut rng, d, size, size);
                BankEntry::new(m, random_mask(&mut rng, size, size), k)
            })
            .collect::<Result<_>>()?;
        let offsets = OffsetSet::new(vec![(0, 1), (1, 0), (1, 1), (-1, 1), (0, 2), (2, 0)])?;
        Ok(Self { student, teacher, mask, bank, offsets })
    }

    fn bank_maps(&self) -> Vec<&EmbeddingMap> {
        self.bank.iter().map(|e| &e.embedding).collect()
    }

    fn inter_maps(&self, source: &EmbeddingMap) -> Result<Vec<InterAffinityMap>> {
        self.bank.iter().map(|e| compute_inter_affinity(source, &e.embedding)).collect()
    }

    fn cross(&self, source: &EmbeddingMap) -> Result<Vec<crate::instance_graph::CrossEdgeSet>> {
        self.bank
            .iter()
            .map(|e| compute_cross_edges(source, &self.mask, &e.embedding, &e.mask))
            .collect()
    }

    /// Loss value of `selector` at student map `student`.
    pub fn loss(&self, selector: LossSelector, student: &EmbeddingMap) -> Result<f64> {
        let teacher_graph = || InstanceGraph::build(&self.teacher, &self.mask);
        Ok(match selector {
            LossSelector::NodeIntra => igd_intra_loss(&InstanceGraph::build(student, &self.mask)?, &teacher_graph()?)?.0,
            LossSelector::EdgeIntra => igd_intra_loss(&InstanceGraph::build(student, &self.mask)?, &teacher_graph()?)?.1,
            LossSelector::AgdIntra => agd_intra_loss(
                &compute_intra_affinity(student, &self.offsets),
                &compute_intra_affinity(&self.teacher, &self.offsets),
            )?,
            LossSelector::Aff => affinity_supervision_loss(
                &compute_intra_affinity(student, &self.offsets),
                &gt_affinity(&self.mask, &self.offsets),
            )?,
            LossSelector::EdgeInter => igd_inter_loss(&self.cross(student)?, &self.cross(&self.teacher)?)?,
            LossSelector::AgdInter => agd_inter_loss(&self.inter_maps(student)?, &self.inter_maps(&self.teacher)?)?,
            LossSelector::Total => self.total(student)?.0,
            LossSelector::Model => return contract_err("the model check has its own fixture"),
        })
    }

    fn total(&self, student: &EmbeddingMap) -> Result<(f64, EmbeddingMap)> {
        let bank: Vec<&BankEntry> = self.bank.iter().collect();
        let (report, grad) =
            objective(student, Some(&self.teacher), &self.mask, &bank, &LossWeights::default(), &self.offsets)?;
        Ok((report.total, grad))
    }

    /// Analytic gradient of `selector` with respect to the student map.
    pub fn gradient(&self, selector: LossSelector, student: &EmbeddingMap) -> Result<EmbeddingMap> {
        let tg = || InstanceGraph::build(&self.teacher, &self.mask);
        match selector {
            LossSelector::NodeIntra => igd_intra_backward(student, &self.mask, &tg()?, 1.0, 0.0),
            LossSelector::EdgeIntra => igd_intra_backward(student, &self.mask, &tg()?, 0.0, 1.0),
            LossSelector::AgdIntra => {
                agd_intra_backward(student, &self.offsets, &compute_intra_affinity(&self.teacher, &self.offsets))
            }
            LossSelector::Aff => {
                affinity_supervision_backward(student, &self.offsets, &gt_affinity(&self.mask, &self.offsets))
            }
            LossSelector::EdgeInter => {
                let pairs: Vec<_> = self.bank.iter().map(|e| e.as_pair()).collect();
                igd_inter_backward(student, &self.mask, &pairs, &self.cross(&self.teacher)?)
            }
            LossSelector::AgdInter => agd_inter_backward(student, &self.bank_maps(), &self.inter_maps(&self.teacher)?),
            LossSelector::Total => Ok(self.total(student)?.1),
            LossSelector::Model => contract_err("the model check has its own fixture"),
        }
    }
}

/// Max relative error between `gradient` and central differences of `loss`
/// around `point`. Defined as 0 at an exact zero-loss, zero-gradient point.
pub fn compare(
    point: &EmbeddingMap,
    loss: impl Fn(&EmbeddingMap) -> Result<f64>,
    gradient: &EmbeddingMap,
) -> Result<f64> {
    if loss(point)? == 0.0 && gradient.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let (d, h, w) = point.dims();
    let mut failure = None;
    let numeric = numeric_gradient(
        |x| {
            let m = EmbeddingMap::new(d, h, w, x.to_vec()).expect("same shape");
            loss(&m).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        },
        point.data(),
        FD_STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(max_relative_error(gradient.data(), &numeric))
}

/// Model check: `C = 2`, `D = 2` network on a 5x5 image, loss a fixed random
/// linear functional of the embedding map, checked on every parameter.
pub fn model_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ConvNetParams::init(2, 2, rng.random());
    let mut params = params;
    for b in params.conv1_bias.iter_mut().chain(params.conv2_bias.iter_mut()) {
        *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    let image = EmbeddingMap::new(1, 5, 5, (0..25).map(|_| rng.random::<f64>()).collect())?;
    let probe = random_map(&mut rng, 2, 5, 5);

    let analytic = backward(&params, &image, &probe)?;
    let flat = |p: &ConvNetParams| p.tensors().concat();
    let x0 = flat(&params);
    let numeric = numeric_gradient(
        |x| {
            let mut p = params.clone();
            let mut k = 0;
            for t in p.tensors_mut() {
                t.copy_from_slice(&x[k..k + t.len()]);
                k += t.len();
            }
            dot(forward(&p, &image).expect("valid image").data(), probe.data())
        },
        &x0,
        FD_STEP,
    );
    Ok(max_relative_error(&flat(&analytic), &numeric))
}

/// Max relative error of one analytic gradient on a seeded instance.
pub fn grad_check(selector: LossSelector, size: usize, seed: u64) -> Result<f64> {
    if selector == LossSelector::Model {
        return model_check(seed);
    }
    let fx = Fixture::new(size, seed)?;
    let grad = fx.gradient(selector, &fx.student)?;
    compare(&fx.student, |m| fx.loss(selector, m), &grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_term_passes() {
        for seed in 0..3 {
            for sel in LossSelector::ALL {
                let err = grad_check(sel, 4, seed).unwrap();
                assert!(err <= TOLERANCE, "{sel} seed {seed}: {err:e}");
            }
        }
    }

    #[test]
    fn zero_loss_gives_zero_error() {
        let mut fx = Fixture::new(3, 1).unwrap();
        fx.student = fx.teacher.clone();
        for sel in [LossSelector::NodeIntra, LossSelector::EdgeIntra, LossSelector::AgdIntra, LossSelector::AgdInter] {
            let grad = fx.gradient(sel, &fx.student).unwrap();
            assert_eq!(grad.max_abs(), 0.0);
            assert_eq!(compare(&fx.student, |m| fx.loss(sel, m), &grad).unwrap(), 0.0, "{sel}");
        }
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let fx = Fixture::new(4, 2).unwrap();
        let mut grad = fx.gradient(LossSelector::AgdIntra, &fx.student).unwrap();
        grad.data_mut()[5] += 0.05 + grad.data()[5].abs();
        let err = compare(&fx.student, |m| fx.loss(LossSelector::AgdIntra, m), &grad).unwrap();
        assert!(err > 1e-2);
    }

    #[test]
    fn selector_names_round_trip() {
        for sel in LossSelector::ALL {
            assert_eq!(sel.name().parse::<LossSelector>().unwrap(), sel);
        }
        assert!("nope".parse::<LossSelector>().is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
