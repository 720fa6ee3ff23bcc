mod oracle;

use mosaix_core::metric::{
    binarize_minmax, binarize_set, median, median_of_min, pairwise_min_profile, patch_distance,
    PatchDistanceMetric,
};
use mosaix_core::model::{EmbeddingSet, MedianRule};
use oracle::OracleMetric;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn float_set(rows: &[Vec<f64>]) -> EmbeddingSet {
    EmbeddingSet::from_rows("s", &oracle::to_f32_rows(rows)).unwrap()
}

fn bit_set(rows: &[Vec<f64>]) -> EmbeddingSet {
    EmbeddingSet::from_bits("s", &oracle::to_bit_rows(rows)).unwrap()
}

#[test]
fn median_of_min_matches_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let n = rng.random_range(1..=16);
        let m = rng.random_range(1..=16);
        let d = rng.random_range(1..=32);
        let lower = rng.random_bool(0.5);
        let rule = if lower {
            MedianRule::LowerMedian
        } else {
            MedianRule::MidpointAverage
        };
        let (metric, om) = [
            (PatchDistanceMetric::Cosine, OracleMetric::Cosine),
            (PatchDistanceMetric::L2, OracleMetric::L2),
            (PatchDistanceMetric::Hamming, OracleMetric::Hamming),
        ][case % 3];
        if om == OracleMetric::Hamming {
            let q = oracle::random_bits(&mut rng, n, d);
            let t = oracle::random_bits(&mut rng, m, d);
            let want = oracle::median_of_min(&q, &t, om, lower);
            let got = median_of_min(&bit_set(&q), &bit_set(&t), metric, rule).unwrap();
            assert_eq!(got, want, "case {case}");
        } else {
            let q = oracle::random_rows(&mut rng, n, d);
            let t = oracle::random_rows(&mut rng, m, d);
            let want = oracle::median_of_min(&q, &t, om, lower);
            let got = median_of_min(&float_set(&q), &float_set(&t), metric, rule).unwrap();
            assert!(
                oracle::close(got, want, 1e-9),
                "case {case}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn profile_matches_oracle_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let q = oracle::random_rows(&mut rng, 4, 6);
        let t = oracle::random_rows(&mut rng, 4, 6);
        let got =
            pairwise_min_profile(&float_set(&q), &float_set(&t), PatchDistanceMetric::L2).unwrap();
        let want = oracle::min_profile(&q, &t, OracleMetric::L2);
        for (g, w) in got.iter().zip(&want) {
            assert!(oracle::close(*g, *w, 1e-9));
        }
    }
}

#[test]
fn asymmetric_pair_exists() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = oracle::random_rows(&mut rng, 3, 4);
    let t = oracle::random_rows(&mut rng, 9, 4);
    let (a, b) = (float_set(&q), float_set(&t));
    let ab = median_of_min(
        &a,
        &b,
        PatchDistanceMetric::Cosine,
        MedianRule::MidpointAverage,
    )
    .unwrap();
    let ba = median_of_min(
        &b,
        &a,
        PatchDistanceMetric::Cosine,
        MedianRule::MidpointAverage,
    )
    .unwrap();
    assert_ne!(ab, ba);
}

fn rows_strategy(max_n: usize, max_d: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    (1..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        prop::collection::vec(prop::collection::vec(-100.0f32..100.0, d), n)
    })
}

fn nonzero(rows: &[Vec<f32>]) -> bool {
    rows.iter().all(|r| r.iter().any(|&v| v != 0.0))
}

proptest! {
    #[test]
    fn self_distance_is_zero_for_every_metric(rows in rows_strategy(12, 16)) {
        prop_assume!(nonzero(&rows));
        let set = EmbeddingSet::from_rows("a", &rows).unwrap();
        for metric in [PatchDistanceMetric::Cosine, PatchDistanceMetric::L2] {
            for rule in [MedianRule::MidpointAverage, MedianRule::LowerMedian] {
                prop_assert_eq!(median_of_min(&set, &set, metric, rule).unwrap(), 0.0);
            }
        }
        if set.dim() >= 2 {
            let bits = binarize_set(&set).unwrap();
            prop_assert_eq!(
                median_of_min(&bits, &bits, PatchDistanceMetric::Hamming, MedianRule::MidpointAverage).unwrap(),
                0.0
            );
        }
    }

    // Power-of-two factors scale f32 entries exactly, so every distance must be
    // reproduced bit for bit.
    #[test]
    fn cosine_is_scale_invariant(
        (a, b) in (1usize..8, 1usize..8, 1usize..16).prop_flat_map(|(n, m, d)| (
            prop::collection::vec(prop::collection::vec(-10.0f32..10.0, d), n),
            prop::collection::vec(prop::collection::vec(-10.0f32..10.0, d), m),
        )),
        exp in -10i32..10,
    ) {
        prop_assume!(nonzero(&a) && nonzero(&b));
        let c = 2f32.powi(exp);
        let sa = EmbeddingSet::from_rows("a", &a).unwrap();
        let sb = EmbeddingSet::from_rows("b", &b).unwrap();
        let base = median_of_min(&sa, &sb, PatchDistanceMetric::Cosine, MedianRule::MidpointAverage).unwrap();
        let scaled = median_of_min(
            &sa.scaled(c).unwrap(),
            &sb.scaled(c).unwrap(),
            PatchDistanceMetric::Cosine,
            MedianRule::MidpointAverage,
        ).unwrap();
        prop_assert_eq!(base.to_bits(), scaled.to_bits());
    }

    // Arbitrary positive factors perturb only through f32 rounding of the
    // scaled entries.
    #[test]
    fn cosine_patch_distance_is_scale_invariant_in_f64(
        v in prop::collection::vec(-10.0f64..10.0, 1..32),
        w in prop::collection::vec(-10.0f64..10.0, 1..32),
        c in 0.01f64..100.0,
    ) {
        let d = v.len().min(w.len());
        let (v, w) = (&v[..d], &w[..d]);
        prop_assume!(v.iter().any(|&x| x != 0.0) && w.iter().any(|&x| x != 0.0));
        let base = oracle::distance(v, w, OracleMetric::Cosine);
        let vs: Vec<f64> = v.iter().map(|x| x * c).collect();
        let ws: Vec<f64> = w.iter().map(|x| x * c).collect();
        prop_assert!((oracle::distance(&vs, &ws, OracleMetric::Cosine) - base).abs() <= 1e-12);
    }

    // With an odd number of query patches the median is an order statistic, so
    // any strictly increasing transform of the patch distances preserves the
    // induced ranking of targets.
    #[test]
    fn monotone_transform_preserves_ranking(
        seed in any::<u64>(),
        half in 0usize..6,
        n_targets in 2usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * half + 1;
        let q = float_set(&oracle::random_rows(&mut rng, n, 6));
        let targets: Vec<EmbeddingSet> = (0..n_targets)
            .map(|_| {
                let m = rng.random_range(1..8);
                float_set(&oracle::random_rows(&mut rng, m, 6))
            })
            .collect();
        let rank = |f: &dyn Fn(f64) -> f64| {
            let mut scored: Vec<(f64, usize)> = targets
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let profile: Vec<f64> = pairwise_min_profile(&q, t, PatchDistanceMetric::Cosine)
                        .unwrap()
                        .into_iter()
                        .map(f)
                        .collect();
                    (median(&profile, MedianRule::LowerMedian).unwrap(), i)
                })
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            scored.into_iter().map(|(_, i)| i).collect::<Vec<_>>()
        };
        prop_assert_eq!(rank(&|x| x), rank(&|x| x * x * x));
        prop_assert_eq!(rank(&|x| x), rank(&|x| (x + 1.0).ln()));
    }

    #[test]
    fn binarize_matches_definition(v in prop::collection::vec(-5i8..5, 2..40)) {
        let v: Vec<f32> = v.into_iter().map(f32::from).collect();
        let bits = binarize_minmax(&v).unwrap();
        prop_assert_eq!(bits.len(), v.len() - 1);
        for i in 0..bits.len() {
            prop_assert_eq!(bits[i] == 1, v[i + 1] > v[i]);
        }
    }

    #[test]
    fn patch_distance_is_nonnegative(
        (a, b) in (1usize..32).prop_flat_map(|d| (
            prop::collection::vec(-1e3f32..1e3, d),
            prop::collection::vec(-1e3f32..1e3, d),
        ))
    ) {
        let l2 = patch_distance(&a, &b, PatchDistanceMetric::L2).unwrap();
        prop_assert!(l2 >= 0.0);
        if let Ok(c) = patch_distance(&a, &b, PatchDistanceMetric::Cosine) {
            prop_assert!((0.0..=2.0).contains(&c));
        }
    }
}
