mod common;

use apemkit::apem::{
    apem, direct, find_epsilon, gap, irrelevance, normalize_l1, perturb, shuffle_map, SearchConfig,
    SearchStrategy,
};
use apemkit::explain::{simplify, Method, RawAttribution, RelevanceMap, Stage};
use apemkit::{Error, Tensor64};
use common::{build, image, Arch, SIGNED_BIASED};
use proptest::prelude::*;

fn search(strategy: SearchStrategy) -> SearchConfig {
    SearchConfig {
        step: 0.05,
        cap: 400,
        clip: false,
        strategy,
    }
}

fn map_from(values: Vec<f64>, h: usize, w: usize) -> RelevanceMap<f64> {
    RelevanceMap::normalized(Tensor64::new(vec![h, w], values).unwrap(), Stage::Summed).unwrap()
}

fn spatial_map(seed: u64, h: usize, w: usize) -> RelevanceMap<f64> {
    map_from(image(&[h, w], seed.wrapping_mul(7)).into_data(), h, w)
}

/// Values `i / 8`, exact under `1 - v`.
fn dyadic_map() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u8..=8, 36)
        .prop_filter("needs a defined gap", |v| {
            v.iter().any(|&a| a > 0) && v.iter().any(|&a| a < 8)
        })
        .prop_map(|v| v.into_iter().map(|a| a as f64 / 8.0).collect())
}

proptest! {
    #![proptest_config(common::config(64))]

    #[test]
    fn bracketed_search_agrees_with_linear_scan(seed in any::<u64>(), cnn in any::<bool>()) {
        let arch = if cnn { Arch::Cnn } else { Arch::Mlp };
        let shape = arch.input_shape();
        let net = build(arch, seed, SIGNED_BIASED);
        let x = image(&shape, seed);
        let class = net.predict(&x).unwrap();
        let m = spatial_map(seed, shape[1], shape[2]);
        let grad = net.input_gradient(&x, class).unwrap();
        let cfg = search(SearchStrategy::Bracketed);
        for r in [m.clone(), irrelevance(&m)] {
            let dir = direct(&normalize_l1(&r.values).unwrap(), &grad).unwrap();
            let fast = find_epsilon(&net, &x, class, &dir, &cfg).unwrap();
            let slow = find_epsilon(&net, &x, class, &dir, &search(SearchStrategy::Linear)).unwrap();
            let flips: Vec<bool> = (0..=cfg.cap)
                .map(|k| net.predict(&perturb(&x, &dir, k as f64 * cfg.step, false)).unwrap() != class)
                .collect();
            let first = flips.iter().position(|&f| f);
            prop_assert_eq!(slow.steps, first.map_or(cfg.cap, |k| k as u64));
            let monotone = first.is_none_or(|k| flips[k..].iter().all(|&f| f));
            if monotone {
                prop_assert_eq!(fast, slow);
            } else if !fast.capped {
                // The ray re-enters the reference class; doubling may land past
                // the first flip but still returns a flip boundary.
                let k = fast.steps as usize;
                prop_assert!(flips[k] && !flips[k - 1]);
            } else {
                prop_assert!(!flips[cfg.cap as usize]);
            }
        }
    }

    #[test]
    fn uniform_maps_have_zero_gap(seed in any::<u64>(), level in 1u32..100) {
        let shape = Arch::Cnn.input_shape();
        let net = build(Arch::Cnn, seed, SIGNED_BIASED);
        let x = image(&shape, seed);
        let class = net.predict(&x).unwrap();
        let m = map_from(vec![level as f64 / 100.0; 36], 6, 6);
        let g = gap(&net, &x, class, &m, &search(SearchStrategy::Bracketed)).unwrap();
        prop_assert_eq!(g.gap, 0);
        prop_assert_eq!(g.eps_minus, g.eps_plus);
    }

    #[test]
    fn complementing_the_map_swaps_the_searches(seed in any::<u64>(), values in dyadic_map()) {
        let net = build(Arch::Cnn, seed, SIGNED_BIASED);
        let x = image(&Arch::Cnn.input_shape(), seed);
        let class = net.predict(&x).unwrap();
        let m = map_from(values, 6, 6);
        let cfg = search(SearchStrategy::Bracketed);
        let a = gap(&net, &x, class, &m, &cfg).unwrap();
        let b = gap(&net, &x, class, &irrelevance(&m), &cfg).unwrap();
        prop_assert_eq!(a.eps_minus, b.eps_plus);
        prop_assert_eq!(a.eps_plus, b.eps_minus);
        prop_assert_eq!(a.gap, -b.gap);
    }

    #[test]
    fn raw_scale_does_not_change_the_gap(seed in any::<u64>(), exp in -20i32..20, stage_ix in 0usize..3) {
        // Powers of two keep the rescaled map bit-identical.
        let c = 2f64.powi(exp);
        let shape = Arch::Cnn.input_shape();
        let net = build(Arch::Cnn, seed, SIGNED_BIASED);
        let x = image(&shape, seed);
        let class = net.predict(&x).unwrap();
        let stage = Stage::ALL[stage_ix];
        let raw = image(&shape, seed ^ 99);
        let wrap = |t: Tensor64| RawAttribution { values: t, method: Method::Gradient, params: Default::default() };
        let m1 = simplify(&wrap(raw.clone()), &x, stage).unwrap();
        let m2 = simplify(&wrap(raw.map(|v| v * c)), &x, stage).unwrap();
        let cfg = search(SearchStrategy::Bracketed);
        prop_assert_eq!(
            gap(&net, &x, class, &m1, &cfg).unwrap(),
            gap(&net, &x, class, &m2, &cfg).unwrap()
        );
    }

    #[test]
    fn l1_normalization_absorbs_any_positive_scale(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let t = image(&[6, 6], seed);
        let a = normalize_l1(&t).unwrap();
        let b = normalize_l1(&t.map(|v| v * c)).unwrap();
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shuffling_permutes_values_deterministically(seed in any::<u64>()) {
        let m = spatial_map(seed, 6, 6);
        let s = shuffle_map(&m, seed);
        prop_assert_eq!(&s, &shuffle_map(&m, seed));
        let mut a = m.values.data().to_vec();
        let mut b = s.values.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn constant_extreme_maps_have_no_gap() {
    let net = build(Arch::Mlp, 1, SIGNED_BIASED);
    let x = image(&Arch::Mlp.input_shape(), 1);
    let class = net.predict(&x).unwrap();
    let cfg = SearchConfig::default();
    let zero = map_from(vec![0.0; 9], 3, 3);
    let one = map_from(vec![1.0; 9], 3, 3);
    assert!(matches!(
        gap(&net, &x, class, &zero, &cfg),
        Err(Error::ZeroMap { what: "relevance" })
    ));
    assert!(matches!(
        gap(&net, &x, class, &one, &cfg),
        Err(Error::ZeroMap {
            what: "irrelevance"
        })
    ));
}

#[test]
fn wrong_reference_is_rejected() {
    let net = build(Arch::Mlp, 2, SIGNED_BIASED);
    let x = image(&Arch::Mlp.input_shape(), 2);
    let other = (net.predict(&x).unwrap() + 1) % net.classes();
    let m = map_from(vec![0.5; 9], 3, 3);
    assert!(matches!(
        gap(&net, &x, other, &m, &SearchConfig::default()),
        Err(Error::ReferenceMismatch { .. })
    ));
}

#[test]
fn apem_skips_capped_gaps() {
    use apemkit::apem::{EpsilonSearch, GapResult};
    let s = |steps, capped| EpsilonSearch { steps, capped };
    let gaps = [
        GapResult::new(s(2, false), s(10, false), 1.0),
        GapResult::new(s(4, false), s(6, false), 1.0),
        GapResult::new(s(1, false), s(100, true), 1.0),
    ];
    let a = apem(&gaps).unwrap();
    assert_eq!(a.n, 2);
    assert_eq!(a.mean, 5.0);
    assert!(apem(&gaps[2..]).is_err());
}
