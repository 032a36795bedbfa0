use ganbank::generators::LatentW;
use ganbank::priors::{in_domain_loss, knn_loss, knn_query, knn_weights, KnnScale, SampleBank};
use proptest::prelude::*;

fn bank_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, usize)> {
    (1usize..4, 2usize..20).prop_flat_map(|(dim, n)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0..3.0f64, dim), n),
            prop::collection::vec(-4.0..4.0f64, dim),
            1..=n,
        )
    })
}

fn exhaustive(rows: &[Vec<f64>], w: &[f64]) -> Vec<(f64, usize)> {
    let mut d: Vec<(f64, usize)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d
}

proptest! {
    #[test]
    fn query_matches_full_scan((rows, w, k) in bank_strategy()) {
        let bank = SampleBank::from_rows(&rows, "p", 0).unwrap();
        let got = knn_query(&bank, &w, k).unwrap();
        let want = exhaustive(&rows, &w);
        for (n, (d, i)) in got.iter().zip(&want) {
            prop_assert_eq!(n.index, *i);
            prop_assert!((n.distance - d.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_a_convex_combination((rows, w, k) in bank_strategy()) {
        let bank = SampleBank::from_rows(&rows, "p", 0).unwrap();
        let dists: Vec<f64> = knn_query(&bank, &w, k).unwrap().iter().map(|n| n.distance).collect();
        let weights = knn_weights(&dists, KnnScale::Mean);
        prop_assert!(weights.iter().all(|&v| v >= 0.0));
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let l = knn_loss(&LatentW(w.clone()), &bank, k).unwrap();
        let (lo, hi) = (dists[0], dists[dists.len() - 1]);
        prop_assert!(l >= lo - 1e-12 && l <= hi + 1e-12, "{} not in [{}, {}]", l, lo, hi);
    }

    #[test]
    fn k1_is_nearest_distance((rows, w, _k) in bank_strategy()) {
        let bank = SampleBank::from_rows(&rows, "p", 0).unwrap();
        let nearest = exhaustive(&rows, &w)[0].0.sqrt();
        prop_assert_eq!(knn_loss(&LatentW(w), &bank, 1).unwrap(), nearest);
    }

    #[test]
    fn zero_at_samples_unlike_in_domain((rows, _w, _k) in bank_strategy(), pick in any::<prop::sample::Index>()) {
        let bank = SampleBank::from_rows(&rows, "p", 0).unwrap();
        let row = LatentW(rows[pick.index(rows.len())].clone());
        prop_assert_eq!(knn_loss(&row, &bank, 1).unwrap(), 0.0);
        let mean = bank.mean();
        if row.0.iter().zip(&mean.0).any(|(a, b)| a != b) {
            prop_assert!(in_domain_loss(&row, &mean).unwrap() > 0.0);
        }
    }
}
