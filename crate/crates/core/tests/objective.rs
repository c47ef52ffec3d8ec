mod common;

use grd::affinity_graph::{
    agd_inter_backward, agd_inter_loss, compute_inter_affinity, BankGram, OffsetSet,
};
use grd::memory_bank::BankEntry;
use grd::model::{total_loss, LossWeights, TrainerConfig};
use grd::{EmbeddingMap, LabelMask};
use proptest::prelude::*;

/// One-hot embedding of each pixel's label: cosine 1 within a segment, 0 across.
fn one_hot(mask: &LabelMask, d: usize) -> EmbeddingMap {
    let (h, w) = (mask.height(), mask.width());
    let mut map = EmbeddingMap::zeros(d, h, w);
    for r in 0..h {
        for c in 0..w {
            map.set(mask.get(r, c) as usize % d, r, c, 1.0);
        }
    }
    map
}

fn voronoi(seed: u64) -> LabelMask {
    use grd::data::{generate_sample, SyntheticSpec};
    let spec = SyntheticSpec { size: 8, instances: 4, seed, ..Default::default() };
    generate_sample(&spec, 0).unwrap().mask
}

#[test]
fn zero_loss_at_a_perfect_fit() {
    for seed in 0..3 {
        let mask = voronoi(seed);
        let student = one_hot(&mask, 6);
        let bank: Vec<BankEntry> = (10..13)
            .map(|s| {
                let m = voronoi(s);
                BankEntry::new(one_hot(&m, 6), m, s).unwrap()
            })
            .collect();
        let refs: Vec<&BankEntry> = bank.iter().collect();
        let (report, grad) = total_loss(&student, &student, &mask, &refs, &TrainerConfig::default()).unwrap();
        for t in report.terms() {
            assert!(t < 1e-9, "{report:?}");
        }
        assert!(report.total < 1e-9);
        assert!(grad.max_abs() < 1e-9);
    }
}

#[test]
fn gram_route_matches_explicit_route() {
    let mut rng = common::rng(5);
    let student = common::random_map(&mut rng, 3, 4, 5);
    let teacher = common::random_map(&mut rng, 3, 4, 5);
    let bank: Vec<EmbeddingMap> = (0..3).map(|_| common::random_map(&mut rng, 3, 4, 5)).collect();
    let refs: Vec<&EmbeddingMap> = bank.iter().collect();
    let inter = |m: &EmbeddingMap| refs.iter().map(|b| compute_inter_affinity(m, b).unwrap()).collect::<Vec<_>>();
    let explicit = agd_inter_loss(&inter(&student), &inter(&teacher)).unwrap();
    let explicit_grad = agd_inter_backward(&student, &refs, &inter(&teacher)).unwrap();
    let gram = BankGram::new(&refs).unwrap().unwrap();
    assert!((gram.loss(&student, &teacher).unwrap() - explicit).abs() < 1e-12);
    let g = gram.backward(&student, &teacher).unwrap();
    for (a, b) in g.data().iter().zip(explicit_grad.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn small_problem(seed: u64) -> (EmbeddingMap, EmbeddingMap, LabelMask, Vec<BankEntry>) {
    let mut rng = common::rng(seed);
    let s = common::random_map(&mut rng, 3, 5, 5);
    let t = common::random_map(&mut rng, 3, 5, 5);
    let m = common::random_mask(&mut rng, 5, 5, 3);
    let bank = (0..3)
        .map(|k| BankEntry::new(common::random_map(&mut rng, 3, 5, 5), common::random_mask(&mut rng, 5, 5, 4), k).unwrap())
        .collect();
    (s, t, m, bank)
}

#[test]
fn intra_only_weights_ignore_the_bank() {
    let (s, t, m, bank) = small_problem(1);
    let (_, _, _, other) = small_problem(2);
    let cfg = TrainerConfig { weights: LossWeights::default().intra_only(), ..Default::default() };
    let with = |b: &[BankEntry]| {
        let refs: Vec<&BankEntry> = b.iter().collect();
        total_loss(&s, &t, &m, &refs, &cfg).unwrap()
    };
    let (r0, g0) = with(&[]);
    let (r1, g1) = with(&bank);
    let (r2, g2) = with(&other);
    assert_eq!((r0, &g0), (r1, &g1));
    assert_eq!((r1, &g1), (r2, &g2));
}

#[test]
fn zero_weights_leave_only_supervision() {
    let (s, t, m, bank) = small_problem(3);
    let refs: Vec<&BankEntry> = bank.iter().collect();
    let cfg = TrainerConfig { weights: LossWeights::ZERO, offsets: OffsetSet::default_2d(), ..Default::default() };
    let (r, _) = total_loss(&s, &t, &m, &refs, &cfg).unwrap();
    assert_eq!(r.terms()[1..], [0.0; 5]);
    assert_eq!(r.total, r.aff);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn terms_are_non_negative_and_total_is_their_weighted_sum(
        seed in 0u64..10_000,
        l in prop::array::uniform5(0.0f64..5.0),
    ) {
        let (s, t, m, bank) = small_problem(seed);
        let refs: Vec<&BankEntry> = bank.iter().collect();
        let cfg = TrainerConfig { weights: LossWeights::from_array(l), ..Default::default() };
        let (r, g) = total_loss(&s, &t, &m, &refs, &cfg).unwrap();
        prop_assert!(r.terms().iter().all(|&v| v >= 0.0 && v.is_finite()));
        prop_assert!((r.total - r.weighted_total(&cfg.weights)).abs() < 1e-9);
        prop_assert!(g.data().iter().all(|v| v.is_finite()));
    }
}
