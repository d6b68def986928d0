use diffmath::kernels;
use diffmath::{Conv2dGeom, Interp, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcast_and_sum_to_are_adjoint(a in tensor(vec![3, 1]), b in tensor(vec![2, 3, 4])) {
        let lhs = dot(&kernels::broadcast_to(&a, &[2, 3, 4]).unwrap(), &b);
        let rhs = dot(&a, &kernels::sum_to(&b, &[3, 1]).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn matmul_transpose_flags_agree(a in tensor(vec![3, 4]), b in tensor(vec![4, 5])) {
        let plain = kernels::matmul(&a, &b, false, false).unwrap();
        let at = kernels::permute(&a, &[1, 0]).unwrap();
        let bt = kernels::permute(&b, &[1, 0]).unwrap();
        let both = kernels::matmul(&at, &bt, true, true).unwrap();
        prop_assert!(plain.max_abs_diff(&both) < 1e-12);
    }

    #[test]
    fn conv_gradients_are_adjoint(
        x in tensor(vec![2, 2, 5, 5]),
        w in tensor(vec![3, 2, 3, 3]),
        stride in 1usize..3,
        pad in 0usize..2,
    ) {
        let geom = Conv2dGeom { stride, pad };
        let y = kernels::conv2d(&x, &w, geom).unwrap();
        prop_assert!(y.max_abs_diff(&kernels::conv2d_direct(&x, &w, geom).unwrap()) < 1e-10);
        let g = y.map(|v| v.sin());
        let gx = kernels::conv2d_input_grad(&g, &w, geom, (5, 5)).unwrap();
        let gw = kernels::conv2d_weight_grad(&x, &g, geom, (3, 3)).unwrap();
        prop_assert!((dot(&y, &g) - dot(&x, &gx)).abs() < 1e-9);
        prop_assert!((dot(&y, &g) - dot(&w, &gw)).abs() < 1e-9);
    }

    #[test]
    fn pooling_gradient_is_adjoint(x in tensor(vec![1, 2, 4, 6]), g in tensor(vec![1, 2, 2, 3])) {
        let lhs = dot(&kernels::avg_pool2d(&x, 2).unwrap(), &g);
        let rhs = dot(&x, &kernels::avg_pool2d_grad(&g, 2).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn grid_sample_is_linear_in_the_grid(
        grid in tensor(vec![3, 4, 2, 2]),
        pts in tensor(vec![6, 3]),
        g in tensor(vec![6, 2]),
    ) {
        for mode in [Interp::Trilinear, Interp::Tricubic] {
            let lhs = dot(&kernels::grid_sample_3d(&grid, &pts, mode).unwrap(), &g);
            let gg = kernels::grid_sample_3d_grad_grid(&pts, &g, grid.shape(), mode).unwrap();
            prop_assert!((lhs - dot(&grid, &gg)).abs() < 1e-9);
        }
    }

    #[test]
    fn exclusive_cumprod_shifts_inclusive(x in tensor(vec![3, 5])) {
        let inc = kernels::cumprod(&x, false).unwrap();
        let exc = kernels::cumprod(&x, true).unwrap();
        for r in 0..3 {
            prop_assert_eq!(exc.data()[r * 5], 1.0);
            for i in 0..5 {
                let expect = exc.data()[r * 5 + i] * x.data()[r * 5 + i];
                prop_assert!((inc.data()[r * 5 + i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_then_slice_roundtrips(a in tensor(vec![2, 3]), b in tensor(vec![2, 2])) {
        let c = kernels::concat(&[&a, &b], 1).unwrap();
        prop_assert_eq!(kernels::slice(&c, 1, 0, 3).unwrap(), a);
        prop_assert_eq!(kernels::slice(&c, 1, 3, 2).unwrap(), b);
    }
}
