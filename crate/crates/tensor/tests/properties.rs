use proptest::prelude::*;
use tbnet_tensor::check::{naive_conv2d, rel_err};
use tbnet_tensor::{conv2d, conv_output_dim, Conv2dSpec, Tensor};

fn filled(len: usize, seed: u64) -> Vec<f64> {
    (0..len as u64).map(|i| ((i.wrapping_mul(2654435761).wrapping_add(seed) % 1009) as f64 / 504.5) - 1.0).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_agrees_with_nested_loops_for_any_geometry(
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..9, w in 3usize..9, k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000,
    ) {
        let xs = [n, c, h, w];
        let ws = [o, c, k, k];
        let x = filled(n * c * h * w, seed);
        let wt = filled(o * c * k * k, seed + 1);
        let b = filled(o, seed + 2);
        let (expect, shape) = naive_conv2d(&x, xs, &wt, ws, &b, stride, pad);
        prop_assert_eq!(shape[2], conv_output_dim(h, k, stride, pad).unwrap());
        let got = conv2d(
            &Tensor::new(&xs, x).unwrap(),
            &Tensor::new(&ws, wt).unwrap(),
            &Tensor::new(&[o], b).unwrap(),
            Conv2dSpec { stride, padding: pad },
        ).unwrap();
        prop_assert_eq!(got.shape(), &shape[..]);
        prop_assert!(rel_err(got.data(), &expect) <= 1e-12);
    }
}
