use lvt_tensor::gradcheck::{numerical_grad, relative_error};
use lvt_tensor::{sample_standard_normal, Mask, RngState, Tensor, TensorError};

fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::from_f64s(data, shape).unwrap()
}

fn param(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    t(data, shape).into_param()
}

#[test]
fn matmul_identity_and_hand_product() {
    let id = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let col = t(&[3.0, 4.0], &[2, 1]);
    assert_eq!(id.matmul(&col).unwrap().to_vec(), vec![3.0, 4.0]);

    let row = t(&[1.0, 2.0], &[1, 2]);
    let out = row.matmul(&col).unwrap();
    assert_eq!(out.shape(), &[1, 1]);
    assert_eq!(out.item(), 11.0);
}

#[test]
fn matmul_reports_both_shapes() {
    let a = t(&[1.0; 6], &[2, 3]);
    let b = t(&[1.0; 4], &[2, 2]);
    match a.matmul(&b) {
        Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_grad_is_ones_times_b_transpose() {
    let mut rng = RngState::new(3);
    let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng).into_param();
    let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
    a.matmul(&b).unwrap().sum_all().unwrap().backward().unwrap();
    let ga = a.grad().unwrap();
    let expected = Tensor::<f64>::ones(&[3, 2]).matmul(&b.t().unwrap()).unwrap().to_vec();
    for (x, y) in ga.iter().zip(&expected) {
        assert!((x - y).abs() < 1e-12);
    }
    let numeric = numerical_grad(&a, 1e-5, || a.matmul(&b).unwrap().sum_all().unwrap().item());
    assert!(relative_error(&ga, &numeric, 1e-8) < 1e-6);
}

#[test]
fn batched_matmul_matches_per_batch_products() {
    let mut rng = RngState::new(5);
    let a = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[2, 4, 5], 1.0, &mut rng);
    let c = a.matmul(&b).unwrap();
    for i in 0..2 {
        let ci = a.select(0, i).unwrap().matmul(&b.select(0, i).unwrap()).unwrap();
        assert_eq!(c.select(0, i).unwrap().to_vec(), ci.to_vec());
    }
}

#[test]
fn softmax_examples() {
    let half = t(&[0.0, 0.0], &[2]).softmax(None).unwrap().to_vec();
    assert_eq!(half, vec![0.5, 0.5]);
    let big = t(&[1000.0, 1000.0], &[2]).softmax(None).unwrap().to_vec();
    assert_eq!(big, vec![0.5, 0.5]);
    let q = t(&[0.0, 3f64.ln()], &[2]).softmax(None).unwrap().to_vec();
    assert!((q[0] - 0.25).abs() < 1e-15 && (q[1] - 0.75).abs() < 1e-15);
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let x = t(&[0.3, -1.0, 2.0, 0.5, 0.1, 0.7], &[2, 3]);
    let y = x.softmax(Some(&Mask::causal(2, 3, 0))).unwrap().to_vec();
    assert_eq!(&y[..3], &[1.0, 0.0, 0.0]);
    assert_eq!(y[5], 0.0);
    assert!((y[3] + y[4] - 1.0).abs() < 1e-15);
}

#[test]
fn elementwise_examples() {
    let m = t(&[2.0, 3.0], &[2]).mul(&t(&[0.0, 1.0], &[2])).unwrap();
    assert_eq!(m.to_vec(), vec![0.0, 3.0]);
    assert_eq!(Tensor::<f64>::zeros(&[3]).tanh().unwrap().to_vec(), vec![0.0; 3]);

    let x = param(&[0.5], &[1]);
    x.tanh().unwrap().sum_all().unwrap().backward().unwrap();
    let g = x.grad().unwrap()[0];
    let expected = 1.0 - 0.5f64.tanh().powi(2);
    assert!((g - expected).abs() < 1e-15);
    assert!((g - 0.786448).abs() < 1e-6);
    let numeric = numerical_grad(&x, 1e-5, || x.tanh().unwrap().sum_all().unwrap().item());
    assert!((numeric[0] - g).abs() < 1e-9);
}

#[test]
fn log_of_non_positive_is_a_domain_error() {
    let err = t(&[1.0, 0.0], &[2]).log().unwrap_err();
    assert!(matches!(err, TensorError::Domain { op: "log", .. }));
}

#[test]
fn non_finite_outputs_fail_fast() {
    let err = t(&[1000.0], &[1]).exp().unwrap_err();
    assert_eq!(err, TensorError::NonFinite { op: "exp" });
    assert!(Tensor::<f64>::from_vec(vec![f64::NAN], &[1]).is_err());
}

#[test]
fn standard_normal_is_deterministic_and_counts_draws() {
    let mut r1 = RngState::new(42);
    let mut r2 = RngState::new(42);
    let a: Tensor<f64> = sample_standard_normal(&mut r1, &[3, 4]);
    let b: Tensor<f64> = sample_standard_normal(&mut r2, &[3, 4]);
    assert_eq!(a.to_vec(), b.to_vec());
    assert_eq!(r1.counter, 12);
    let mut r3 = RngState::with_counter(42, 12);
    let c: Tensor<f64> = sample_standard_normal(&mut r3, &[2]);
    let d: Tensor<f64> = sample_standard_normal(&mut r1, &[2]);
    assert_eq!(c.to_vec(), d.to_vec());
}

#[test]
fn standard_normal_moments() {
    // 3 sigma bounds for n = 1e6: mean ~ 0.003, variance ~ 0.0042
    let mut rng = RngState::new(7);
    let x: Tensor<f64> = sample_standard_normal(&mut rng, &[1_000_000]);
    let d = x.data();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var - 1.0).abs() < 0.01, "var {var}");
}

#[test]
fn backward_examples() {
    let x = param(&[1.0, -2.0, 3.0], &[3]);
    x.sum_all().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 3]);

    x.zero_grad();
    x.mul(&x).unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);

    // a second pass accumulates
    x.mul(&x).unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0, -8.0, 12.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = param(&[1.0, 2.0], &[2]);
    let err = x.scale(2.0).unwrap().backward().unwrap_err();
    assert_eq!(err, TensorError::NonScalarLoss { shape: vec![2] });
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = RngState::new(11);
    let x = Tensor::<f64>::randn(&[16, 9], 3.0, &mut rng);
    let y = x.softmax(None).unwrap();
    for row in y.data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn concat_narrow_select_roundtrip() {
    let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let b = t(&[5.0, 6.0], &[2, 1]);
    let c = Tensor::concat(&[a.clone(), b], 1).unwrap();
    assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    assert_eq!(c.narrow(1, 0, 2).unwrap().to_vec(), a.to_vec());
    assert_eq!(c.select(1, 2).unwrap().to_vec(), vec![5.0, 6.0]);
    assert!(c.narrow(1, 2, 2).is_err());
}

#[test]
fn no_grad_guard_stops_recording() {
    let x = param(&[1.0], &[1]);
    {
        let _g = lvt_tensor::NoGradGuard::new();
        assert!(!x.scale(2.0).unwrap().requires_grad());
    }
    assert!(x.scale(2.0).unwrap().requires_grad());
}
