use proptest::prelude::*;
use splitgs::gaussian::GaussianPrimitive;
use splitgs::lifecycle::{prune_static, visibility_score, PruneConfig, VisibilityStats};

fn trace() -> impl Strategy<Value = (usize, Vec<Vec<(bool, f64)>>)> {
    (1usize..12).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(prop::collection::vec((any::<bool>(), 0.0f64..=1.0), n), 1..20),
        )
    })
}

proptest! {
    #[test]
    fn scores_are_bounded_by_frequency((n, frames) in trace()) {
        let mut s = VisibilityStats::new(n);
        for f in &frames {
            let (r, a): (Vec<bool>, Vec<f64>) = f.iter().copied().unzip();
            s.record(&r, &a).unwrap();
        }
        for v in visibility_score(&s) {
            prop_assert!((0.0..=1.0).contains(&v.score));
            prop_assert!(v.score <= v.frequency + 1e-15);
        }
    }

    #[test]
    fn pruning_is_idempotent_and_leaves_survivors_alone((n, frames) in trace()) {
        let mut s = VisibilityStats::new(n);
        for f in &frames {
            let (r, a): (Vec<bool>, Vec<f64>) = f.iter().copied().unzip();
            s.record(&r, &a).unwrap();
        }
        let original: Vec<GaussianPrimitive> = (0..n)
            .map(|i| GaussianPrimitive::isotropic([i as f64, 1.0, 3.0], 0.1, 0.3, [0.2, 0.4, 0.6], 1))
            .collect();
        let mut g = original.clone();
        let cfg = PruneConfig::default();
        match prune_static(&mut g, &mut s, &cfg) {
            Ok(report) => {
                let survivors: Vec<_> = original
                    .iter()
                    .zip(&report.keep)
                    .filter(|(_, k)| **k)
                    .map(|(x, _)| x.clone())
                    .collect();
                prop_assert_eq!(&g, &survivors);
                let again = prune_static(&mut g, &mut s, &cfg).unwrap();
                prop_assert!(again.removed.is_empty());
            }
            Err(_) => prop_assert_eq!(&g, &original),
        }
    }
}
