mod common;

use apemkit::apem::{gap, SearchConfig};
use apemkit::explain::{RelevanceMap, Stage};
use apemkit::filter::{filter_map, FilterConfig};
use apemkit::{Error, Tensor64};
use common::{build, image, Arch, SIGNED_BIASED};
use proptest::prelude::*;

fn search() -> SearchConfig {
    SearchConfig {
        step: 0.05,
        cap: 400,
        ..SearchConfig::default()
    }
}

/// Random map with roughly a quarter of the pixels already zero.
fn noisy_map(seed: u64) -> RelevanceMap<f64> {
    let v = image(&[6, 6], seed.wrapping_mul(31)).map(|a| if a < 0.25 { 0.0 } else { a });
    RelevanceMap::normalized(v, Stage::Multiplied).unwrap()
}

proptest! {
    #![proptest_config(common::config(40))]

    #[test]
    fn filtering_only_zeroes_and_never_loses_gap(seed in any::<u64>(), fraction in 0.02f64..0.5) {
        let net = build(Arch::Cnn, seed, SIGNED_BIASED);
        let x = image(&Arch::Cnn.input_shape(), seed);
        let class = net.predict(&x).unwrap();
        let m = noisy_map(seed);
        prop_assume!(m.values.count_nonzero() > 0 && m.values.data().iter().any(|&v| v < 1.0));
        let cfg = FilterConfig { batch_fraction: fraction };
        let tr = filter_map(&net, &x, class, &m, &search(), &cfg).unwrap();

        prop_assert_eq!(tr.original_gap, gap(&net, &x, class, &m, &search()).unwrap().gap);
        prop_assert!(tr.final_gap >= tr.original_gap);
        prop_assert_eq!(tr.final_gap, gap(&net, &x, class, &tr.final_map, &search()).unwrap().gap);
        for (a, b) in m.values.data().iter().zip(tr.final_map.values.data()) {
            prop_assert!(*b == 0.0 || b == a);
        }
        prop_assert!(tr.reverted);
        let kept = &tr.iterations[..tr.iterations.len() - 1];
        let mut best = tr.original_gap;
        for s in kept {
            let g = s.gap.unwrap();
            prop_assert!(g >= best);
            best = g;
        }
        // Continuous random values have no ties, so each batch is exact.
        let mut nonzero = m.values.count_nonzero();
        for s in &tr.iterations {
            prop_assert_eq!(s.zeroed_count, ((fraction * nonzero as f64).floor() as usize).max(1));
            nonzero -= s.zeroed_count;
        }

        let again = filter_map(&net, &x, class, &tr.final_map, &search(), &cfg).unwrap();
        prop_assert_eq!(again.iterations.len(), 1);
        prop_assert_eq!(again.final_map, tr.final_map);
    }
}

#[test]
fn zeros_are_never_candidates() {
    let net = build(Arch::Cnn, 5, SIGNED_BIASED);
    let x = image(&Arch::Cnn.input_shape(), 5);
    let class = net.predict(&x).unwrap();
    let m = noisy_map(5);
    let zeros = 36 - m.values.count_nonzero();
    assert!(zeros > 0);
    let cfg = FilterConfig {
        batch_fraction: 0.05,
    };
    let tr = filter_map(&net, &x, class, &m, &search(), &cfg).unwrap();
    // One pixel per step for fewer than 40 nonzero pixels.
    assert_eq!(tr.iterations[0].zeroed_count, 1);
    assert!(tr.iterations[0].threshold > 0.0);
}

#[test]
fn undefined_gap_is_filter_inapplicable() {
    let net = build(Arch::Cnn, 6, SIGNED_BIASED);
    let x = image(&Arch::Cnn.input_shape(), 6);
    let class = net.predict(&x).unwrap();
    let m = RelevanceMap::normalized(Tensor64::zeros(&[6, 6]), Stage::Summed).unwrap();
    let err = filter_map(&net, &x, class, &m, &search(), &FilterConfig::default()).unwrap_err();
    assert!(matches!(err, Error::FilterInapplicable(_)));
}
