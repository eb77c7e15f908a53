mod common;

use common::{
    build, central_difference, head, image, kink_margin, loss, relative_error, Arch, SIGNED_BIASED,
};
use proptest::prelude::*;

const H: f64 = 1e-4;
// Larger than any pre-activation change a step of `H` can cause here.
const MARGIN: f64 = 2e-3;

fn check_input_gradient(arch: Arch, seed: u64) -> Result<(), TestCaseError> {
    let net = build(arch, seed, SIGNED_BIASED);
    let x = image(&arch.input_shape(), seed);
    // Finite differences are only meaningful away from relu/max-pool kinks.
    prop_assume!(kink_margin(&net, &x) > MARGIN);
    for label in 0..net.classes() {
        let g = net.input_gradient(&x, label).unwrap();
        let fd = central_difference(|v| loss(&net, v, label), &x, H);
        let err = relative_error(&g, &fd);
        prop_assert!(err < 1e-4, "label {label}: relative error {err:e}");
    }
    Ok(())
}

proptest! {
    #![proptest_config(common::config(48))]

    #[test]
    fn mlp_input_gradient_matches_finite_differences(seed in any::<u64>()) {
        check_input_gradient(Arch::Mlp, seed)?;
    }

    #[test]
    fn cnn_input_gradient_matches_finite_differences(seed in any::<u64>()) {
        check_input_gradient(Arch::Cnn, seed)?;
    }

    #[test]
    fn feature_map_gradient_matches_finite_differences(seed in any::<u64>()) {
        let net = build(Arch::Cnn, seed, SIGNED_BIASED);
        let x = image(&Arch::Cnn.input_shape(), seed);
        prop_assume!(kink_margin(&net, &x) > MARGIN);
        let conv = net.last_conv_index().unwrap();
        prop_assert!(net.layers()[conv].spec().is_conv());
        let (act, grad) = net.feature_map_gradient(&x, conv).unwrap();
        let top = head(&net, conv + 1);
        let class = net.predict(&x).unwrap();
        let logit = |a: &apemkit::Tensor64| top.logits(a).unwrap().data()[class];
        let fd = central_difference(logit, &act, H);
        prop_assert!(relative_error(&grad, &fd) < 1e-4);
    }

    #[test]
    fn f32_forward_tracks_f64(seed in any::<u64>()) {
        let net = build(Arch::Cnn, seed, SIGNED_BIASED);
        let x = image(&Arch::Cnn.input_shape(), seed);
        let net32: apemkit::Network32 = apemkit::net::decode_model(&apemkit::net::encode_model(&net), "mem").unwrap();
        let z64 = net.logits(&x).unwrap();
        let z32 = net32.logits(&x.cast::<f32>()).unwrap();
        for (a, b) in z64.data().iter().zip(z32.data()) {
            prop_assert!((a - *b as f64).abs() < 1e-4 * (1.0 + a.abs()));
        }
    }
}
