mod common;

use apemkit::apem::{apem, EpsilonSearch, GapResult};
use apemkit::explain::{Method, Stage};
use apemkit::records::GapRow;
use apemkit::stats::{
    bootstrap_mean_ci, pairwise, quantile_sorted, spearman, summarize, PermutationConfig,
};
use proptest::prelude::*;

fn perm(permutations: usize) -> PermutationConfig {
    PermutationConfig {
        permutations,
        seed: 9,
    }
}

fn distinct(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::hash_set(-10_000i32..10_000, n)
        .prop_map(|s| s.into_iter().map(|v| v as f64 / 7.0).collect())
        .prop_shuffle()
}

proptest! {
    #![proptest_config(common::config(64))]

    #[test]
    fn rho_matches_the_rank_difference_formula(pair in distinct(3..60).prop_flat_map(|x| {
        let n = x.len();
        (Just(x), distinct(n..n + 1))
    })) {
        let (x, y) = pair;
        let n = x.len() as f64;
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            let mut r = vec![0.0; v.len()];
            for (pos, i) in idx.into_iter().enumerate() {
                r[i] = pos as f64 + 1.0;
            }
            r
        };
        let (rx, ry) = (rank(&x), rank(&y));
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        let expected = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        let got = spearman(&x, &y, &perm(10)).unwrap().rho.unwrap();
        prop_assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn monotone_transforms_do_not_change_rho_or_p(
        x in prop::collection::vec(-5.0f64..5.0, 5..40),
        seed in any::<u64>(),
    ) {
        let y: Vec<f64> = common::image(&[x.len()], seed).into_data();
        let base = spearman(&x, &y, &perm(200)).unwrap();
        let xt: Vec<f64> = x.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        let yt: Vec<f64> = y.iter().map(|v| v.powi(3)).collect();
        let moved = spearman(&xt, &yt, &perm(200)).unwrap();
        prop_assert_eq!(base.rho, moved.rho);
        prop_assert_eq!(base.p_value, moved.p_value);
        let swapped = spearman(&y, &x, &perm(200)).unwrap();
        prop_assert!((swapped.rho.unwrap_or(0.0) - base.rho.unwrap_or(0.0)).abs() < 1e-12);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let flipped = spearman(&x, &neg, &perm(200)).unwrap();
        if let (Some(a), Some(b)) = (base.rho, flipped.rho) {
            prop_assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_is_antisymmetric(
        a in prop::collection::vec(prop::option::weighted(0.9, -50i64..50), 1..40),
        b in prop::collection::vec(prop::option::weighted(0.9, -50i64..50), 1..40),
    ) {
        let ia: Vec<(u64, Option<i64>)> = a.iter().enumerate().map(|(i, g)| (i as u64, *g)).collect();
        let ib: Vec<(u64, Option<i64>)> = b.iter().enumerate().map(|(i, g)| (i as u64, *g)).collect();
        let ab = pairwise(&ia, &ib);
        let ba = pairwise(&ib, &ia);
        prop_assert_eq!(ab.better, ba.worse);
        prop_assert_eq!(ab.equal, ba.equal);
        prop_assert_eq!(ab.n, ba.n);
        prop_assert_eq!(ab.excluded, ba.excluded);
        prop_assert_eq!(ab.n + ab.excluded, a.len().max(b.len()));
        if ab.n > 0 {
            prop_assert!((ab.better + ab.equal + ab.worse - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_mean_is_apem(
        gaps in prop::collection::vec((0u64..300, 0u64..300, prop::bool::weighted(0.1)), 1..60),
    ) {
        let results: Vec<GapResult> = gaps
            .iter()
            .map(|&(m, p, capped)| GapResult::new(
                EpsilonSearch { steps: m, capped: false },
                EpsilonSearch { steps: p, capped },
                1.0,
            ))
            .collect();
        let rows: Vec<GapRow> = results
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = GapRow {
                    image_id: i as u64,
                    method: Method::Gradient,
                    stage: Stage::Summed,
                    eps_minus: None,
                    eps_plus: None,
                    gap: None,
                    capped_minus: None,
                    capped_plus: None,
                    predicted_class: 0,
                    true_class: 0,
                    confidence: 0.5,
                    loss: 0.7,
                };
                row.set_result(Some(r));
                row
            })
            .collect();
        let s = &summarize(&rows)[0];
        let capped = gaps.iter().filter(|g| g.2).count();
        prop_assert_eq!(s.capped_count, capped);
        prop_assert_eq!(s.measured, gaps.len() - capped);
        match apem(&results) {
            Ok(a) => {
                prop_assert!((s.mean_gap.unwrap() - a.mean).abs() < 1e-9);
                prop_assert_eq!(s.median_gap.unwrap(), a.median);
            }
            Err(_) => prop_assert_eq!(s.mean_gap, None),
        }
    }

    #[test]
    fn bootstrap_interval_brackets_the_mean(v in prop::collection::vec(-100.0f64..100.0, 2..80), seed in any::<u64>()) {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let (lo, hi) = bootstrap_mean_ci(&v, 0.99, 2000, seed).unwrap();
        prop_assert!(lo <= hi);
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= lo && hi <= max);
        prop_assert!(lo <= mean + 1e-9 && mean - 1e-9 <= hi);
        prop_assert_eq!((lo, hi), bootstrap_mean_ci(&v, 0.99, 2000, seed).unwrap());
    }
}

#[test]
fn reversed_order_gives_exactly_minus_one() {
    let conf: Vec<f64> = (0..250).map(|i| 0.1 + i as f64 * 0.0036).collect();
    let loss: Vec<f64> = conf.iter().map(|c| -c.ln()).collect();
    let r = spearman(&conf, &loss, &perm(1000)).unwrap();
    assert_eq!(r.rho, Some(-1.0));
    assert_eq!(r.p_value, Some(1.0 / 1001.0));
}

#[test]
fn linear_interpolation_quantiles() {
    let v = [1.0, 2.0, 4.0, 8.0];
    // h = (n - 1) q; interpolate between the neighbouring order statistics.
    assert_eq!(quantile_sorted(&v, 0.0), 1.0);
    assert_eq!(quantile_sorted(&v, 0.25), 1.75);
    assert_eq!(quantile_sorted(&v, 0.5), 3.0);
    assert_eq!(quantile_sorted(&v, 0.75), 5.0);
    assert_eq!(quantile_sorted(&v, 1.0), 8.0);
}
