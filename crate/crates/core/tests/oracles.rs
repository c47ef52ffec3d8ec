mod common;

use grd::metrics::{self, evaluate};
use grd::LabelMask;
use proptest::prelude::*;

#[test]
fn graphs_affinities_and_clusters_match_brute_force() {
    for h in 1..=6 {
        for w in 1..=6 {
            for seed in 0..4 {
                common::check_fixture(seed * 100 + (h * 7 + w) as u64, h, w).unwrap();
            }
        }
    }
}

#[test]
fn metrics_match_brute_force_on_all_2x2_pairs() {
    let all = common::all_labelings(4, 3);
    for p in &all {
        let pred = LabelMask::new(2, 2, p.clone()).unwrap();
        for g in &all {
            let gt = LabelMask::new(2, 2, g.clone()).unwrap();
            common::check_metrics(&pred, &gt).unwrap();
        }
    }
}

fn labels(n: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..5, n)
}

proptest! {
    #[test]
    fn metrics_match_brute_force_on_random_3x4(p in labels(12), g in labels(12)) {
        let pred = LabelMask::new(3, 4, p).unwrap();
        let gt = LabelMask::new(3, 4, g).unwrap();
        prop_assert_eq!(common::check_metrics(&pred, &gt), Ok(()));
    }

    #[test]
    fn metrics_ignore_label_names(p in labels(12), g in labels(12), shift in 1u32..50) {
        // relabel every id, keeping 0 fixed
        let q: Vec<u32> = p.iter().map(|&l| if l == 0 { 0 } else { (l * 7 + shift) % 97 + 1 }).collect();
        let gt = LabelMask::new(3, 4, g).unwrap();
        let a = evaluate(&LabelMask::new(3, 4, p).unwrap(), &gt).unwrap();
        let b = evaluate(&LabelMask::new(3, 4, q).unwrap(), &gt).unwrap();
        prop_assert!((a.sbd - b.sbd).abs() < 1e-12 && (a.aji - b.aji).abs() < 1e-12);
        prop_assert!((a.pq - b.pq).abs() < 1e-12 && (a.voi_total - b.voi_total).abs() < 1e-12);
        prop_assert!((a.arand - b.arand).abs() < 1e-12 && a.dic_abs == b.dic_abs);
    }

    #[test]
    fn metric_ranges_and_symmetries(p in labels(12), g in labels(12)) {
        let pred = LabelMask::new(3, 4, p).unwrap();
        let gt = LabelMask::new(3, 4, g).unwrap();
        let r = evaluate(&pred, &gt).unwrap();
        for v in [r.sbd, r.aji, r.dice, r.f1_obj, r.pq, r.arand] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(r.pq <= r.f1_obj + 1e-12);
        prop_assert!(r.voi_split >= 0.0 && r.voi_merge >= 0.0);
        let v = metrics::voi(&gt, &pred).unwrap();
        prop_assert!((v.split - r.voi_merge).abs() < 1e-12 && (v.merge - r.voi_split).abs() < 1e-12);
        prop_assert!((metrics::sbd(&gt, &pred).unwrap() - r.sbd).abs() < 1e-12);
        prop_assert!((metrics::arand(&gt, &pred).unwrap() - r.arand).abs() < 1e-12);
    }
}
