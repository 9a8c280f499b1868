//! Metric battery against a brute-force confusion-matrix oracle.

mod common;

use common::*;
use fairlora_core::metrics::{self, Grouping};
use fairlora_core::{EvalBundle, SeededRng};
use proptest::prelude::*;

fn check_bundle(preds: Vec<usize>, labels: Vec<usize>, sensitive: Vec<usize>, classes: usize) {
    let o = oracle_metrics(&preds, &labels, &sensitive, classes);
    let bundle = EvalBundle::new(preds, labels)
        .unwrap()
        .with_num_classes(classes)
        .unwrap()
        .with_sensitive(sensitive)
        .unwrap();
    assert_eq!(metrics::accuracy(&bundle), o.accuracy);
    let s = metrics::per_group_f1_recall(&bundle, Grouping::ByClass).unwrap();
    assert_eq!(s.f1.values().copied().collect::<Vec<_>>(), o.f1);
    assert_eq!(s.recall.values().copied().collect::<Vec<_>>(), o.recall);

    let report = metrics::summary(&bundle).unwrap();
    let min = o.f1.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = o.f1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(report.f1_min, min);
    assert_eq!(report.delta_f1, max - min);
    assert_eq!(report.recall_min, o.recall.iter().cloned().fold(f64::INFINITY, f64::min));

    let groups = bundle.sensitive_groups();
    for c in 0..classes {
        for &g in &groups {
            let expected = match (o.tpr_in[&(c, g)], o.tpr_out[&(c, g)]) {
                (Some(a), Some(b)) => Some((a - b).abs()),
                _ => None,
            };
            assert_eq!(metrics::eod_one_vs_all(&bundle, c, g).ok(), expected);
            for &h in &groups {
                let expected = match (o.tpr_in[&(c, g)], o.tpr_in[&(c, h)]) {
                    (Some(a), Some(b)) => Some((a - b).abs()),
                    _ => None,
                };
                assert_eq!(metrics::eod_pair(&bundle, c, g, h).ok(), expected);
            }
        }
        // eod_max is the maximum of the one-vs-all values whenever all are defined
        let ova: Option<Vec<f64>> = groups.iter().map(|&g| metrics::eod_one_vs_all(&bundle, c, g).ok()).collect();
        match ova {
            Some(v) => assert_eq!(metrics::eod_max(&bundle, c).unwrap(), v.into_iter().fold(0.0, f64::max)),
            None => assert!(metrics::eod_max(&bundle, c).is_err()),
        }
        if groups.len() == 2 {
            assert_eq!(
                metrics::eod_one_vs_all(&bundle, c, groups[0]).ok(),
                metrics::eod_pair(&bundle, c, groups[0], groups[1]).ok()
            );
        }
    }
}

#[test]
fn thousand_random_bundles() {
    let mut rng = SeededRng::new(5);
    for _ in 0..1000 {
        let (p, l, s, c) = random_bundle(&mut rng);
        check_bundle(p, l, s, c);
    }
}

proptest! {
    #[test]
    fn oracle_agreement(
        (classes, rows) in (2usize..=10).prop_flat_map(|c| (
            Just(c),
            prop::collection::vec((0..c, 0..c, 0usize..6), 1..200),
        ))
    ) {
        let preds = rows.iter().map(|r| r.0).collect();
        let labels = rows.iter().map(|r| r.1).collect();
        let sens = rows.iter().map(|r| r.2).collect();
        check_bundle(preds, labels, sens, classes);
    }

    #[test]
    fn macro_group_scores_lie_in_unit_interval(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let (p, l, s, c) = random_bundle(&mut rng);
        let bundle = EvalBundle::new(p, l).unwrap().with_num_classes(c).unwrap().with_sensitive(s).unwrap();
        for g in [Grouping::ByClass, Grouping::ByGroup, Grouping::BySensitive] {
            let s = metrics::per_group_f1_recall(&bundle, g).unwrap();
            prop_assert!(s.f1.values().chain(s.recall.values()).all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn summary_eod_max_is_max_over_groups_and_classes() {
    let mut rng = SeededRng::new(6);
    for _ in 0..300 {
        let (p, l, s, c) = random_bundle(&mut rng);
        let bundle = EvalBundle::new(p, l).unwrap().with_num_classes(c).unwrap().with_sensitive(s).unwrap();
        let r = metrics::summary(&bundle).unwrap();
        assert_eq!(r.eod_max, r.eod_one_vs_all.values().cloned().reduce(f64::max));
    }
}
