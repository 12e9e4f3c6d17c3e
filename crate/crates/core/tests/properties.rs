use gait_core::dataset::{dequantize, quantize};
use gait_core::gradient_adjustment::sobel_response;
use gait_core::kernels::{conv_valid, conv_valid_adjoint, conv_valid_kernel_grad, pad};
use gait_core::kid::mmd2_unbiased;
use gait_core::{Padding, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

/// (input, kernel, output-shaped probe, stride)
fn conv_case() -> impl Strategy<Value = (Tensor, Tensor, Tensor, usize)> {
    (1usize..3, 1usize..3, 1usize..4, 1usize..4, 1usize..3, 4usize..9).prop_flat_map(|(n, cin, cout, k, s, hw)| {
        let o = (hw - k) / s + 1;
        (
            tensor(vec![n, cin, hw, hw]),
            tensor(vec![cout, cin, k, k]),
            tensor(vec![n, cout, o, o]),
            Just(s),
        )
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_adjoint_and_kernel_grad_are_transposes((x, k, g, s) in conv_case()) {
        let y = conv_valid(&x, &k, s).unwrap();
        let [_, _, h, w] = x.dims4().unwrap();
        let xt = conv_valid_adjoint(&g, &k, s, (h, w)).unwrap();
        let kt = conv_valid_kernel_grad(&x, &g, s, k.shape()).unwrap();
        let lhs = y.dot(&g).unwrap();
        prop_assert!(close(lhs, x.dot(&xt).unwrap()));
        prop_assert!(close(lhs, k.dot(&kt).unwrap()));
    }

    #[test]
    fn conv_is_linear_in_the_input((x, k, _, s) in conv_case(), a in -3.0f64..3.0) {
        let ax = x.map(|v| a * v);
        let lhs = conv_valid(&ax, &k, s).unwrap();
        let rhs = conv_valid(&x, &k, s).unwrap().map(|v| a * v);
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12 * (1.0 + rhs.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
    }

    #[test]
    fn sobel_ignores_constant_offsets(x in tensor(vec![1, 1, 6, 7]), c in -5.0f64..5.0) {
        let a = sobel_response(&x).unwrap();
        let b = sobel_response(&x.map(|v| v + c)).unwrap();
        prop_assert!(a.horizontal.max_abs_diff(&b.horizontal).unwrap() < 1e-10);
        prop_assert!(a.vertical.max_abs_diff(&b.vertical).unwrap() < 1e-10);
    }

    #[test]
    fn padding_preserves_the_interior(x in tensor(vec![1, 2, 4, 5]), reflect in any::<bool>()) {
        let p = if reflect { Padding::Reflect(2) } else { Padding::Zero(2) };
        let y = pad(&x, p).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, 8, 9]);
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..5 {
                    prop_assert_eq!(y.data()[(c * 8 + i + 2) * 9 + j + 2], x.data()[(c * 4 + i) * 5 + j]);
                }
            }
        }
    }

    #[test]
    fn mmd_is_symmetric(x in tensor(vec![5, 3]), y in tensor(vec![4, 3])) {
        prop_assert!(close(mmd2_unbiased(&x, &y).unwrap(), mmd2_unbiased(&y, &x).unwrap()));
    }

    #[test]
    fn quantization_round_trips(v in -1.0f64..=1.0, b in any::<u8>()) {
        prop_assert!((dequantize(quantize(v)) - v).abs() <= 0.5 / 127.5 + 1e-12);
        prop_assert_eq!(quantize(dequantize(b)), b);
    }
}
