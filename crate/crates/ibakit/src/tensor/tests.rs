use super::*;
use crate::error::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn t1(data: &[f64]) -> Tensor {
    Tensor::new(vec![data.len()], data.to_vec()).unwrap()
}

fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
}

#[test]
fn sigmoid_reference_points() {
    let tape = Tape::new();
    let y = tape.sigmoid(&t1(&[0.0, 5.0, -5.0])).unwrap();
    let v = y.to_vec();
    assert!((v[0] - 0.5).abs() < 1e-12);
    assert!((v[1] - 0.993307).abs() < 1e-6);
    assert!((v[2] - 0.006693).abs() < 1e-6);
}

#[test]
fn sigmoid_stays_open_interval_at_extremes() {
    let tape = Tape::new();
    let y = tape.sigmoid(&t1(&[-50.0, 50.0, -700.0, 700.0])).unwrap();
    for v in y.to_vec() {
        assert!(v > 0.0 && v < 1.0, "sigmoid left (0,1): {v}");
    }
}

#[test]
fn sigmoid_nan_is_invalid_value() {
    let tape = Tape::new();
    match tape.sigmoid(&t1(&[f64::NAN])) {
        Err(Error::InvalidValue(_)) => {}
        other => panic!("expected invalid-value error, got {other:?}"),
    }
}

#[test]
fn matmul_identity() {
    let tape = Tape::new();
    let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let id = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let y = tape.matmul(&a, &id).unwrap();
    assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_uniform_by_symmetry() {
    let tape = Tape::new();
    let y = tape.softmax_last(&t1(&[0.0, 0.0, 0.0]));
    for v in y.to_vec() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn sum_over_axis_one() {
    let tape = Tape::new();
    let y = tape.sum_axis(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]), 1).unwrap();
    assert_eq!(y.to_vec(), vec![3.0, 7.0]);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let tape = Tape::new();
    let a = t2(2, 3, &[0.0; 6]);
    let b = t2(2, 2, &[0.0; 4]);
    match tape.matmul(&a, &b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn backward_sum_of_squares() {
    let tape = Tape::new();
    let x = t1(&[1.0, 2.0, 3.0]).with_grad();
    let sq = tape.mul(&x, &x).unwrap();
    let loss = tape.sum_all(&sq);
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
}

#[test]
fn backward_sigmoid_at_zero() {
    let tape = Tape::new();
    let x = Tensor::scalar(0.0).with_grad();
    let y = tape.sigmoid(&x).unwrap();
    tape.backward(&y).unwrap();
    assert!((x.grad().unwrap()[0] - 0.25).abs() < 1e-12);
}

#[test]
fn backward_nonscalar_is_contract_error() {
    let tape = Tape::new();
    let x = t1(&[1.0, 2.0]).with_grad();
    let y = tape.scale(&x, 2.0);
    assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
}

#[test]
fn backward_twice_is_explicit_error() {
    let tape = Tape::new();
    let x = Tensor::scalar(1.0).with_grad();
    let y = tape.scale(&x, 2.0);
    tape.backward(&y).unwrap();
    assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
}

#[test]
fn non_participating_tensor_untouched() {
    let tape = Tape::new();
    let x = Tensor::scalar(1.0).with_grad();
    let c = Tensor::scalar(3.0);
    let y = tape.mul(&x, &c).unwrap();
    tape.backward(&y).unwrap();
    assert!(c.grad().is_none());
    assert_eq!(x.grad().unwrap(), vec![3.0]);
}

#[test]
fn grad_check_constant_gradient() {
    let err = grad_check(|t, x| Ok(t.sum_all(x)), &t1(&[0.3, -1.2, 4.0]), 1e-5).unwrap();
    assert!(err < 1e-10, "err = {err}");
}

#[test]
fn grad_check_sum_sigmoid() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let err = grad_check(
        |t, x| {
            let s = t.sigmoid(x)?;
            Ok(t.sum_all(&s))
        },
        &t1(&data),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "err = {err}");
}

#[test]
fn grad_check_three_layer_composition() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let w1: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w2: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let err = grad_check(
        |t, x| {
            let w1 = t2(4, 3, &w1);
            let w2 = t2(3, 4, &w2);
            let x = t.reshape(x, vec![1, 4])?;
            let h = t.sigmoid(&t.matmul(&x, &w1)?)?;
            let h = t.relu(&t.matmul(&h, &w2)?);
            Ok(t.sum_all(&h))
        },
        &t1(&x),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "err = {err}");
}

#[test]
fn grad_check_nonscalar_output_rejected() {
    let r = grad_check(|t, x| Ok(t.scale(x, 1.0)), &t1(&[1.0, 2.0]), 1e-5);
    assert!(matches!(r, Err(Error::Contract(_))));
}

// scalar-loop references for the forward invariants

fn ref_matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn ref_softmax_row(row: &[f64]) -> Vec<f64> {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    row.iter().map(|v| v.exp() / z).collect()
}

#[test]
fn forward_matches_naive_reference() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    for _ in 0..20 {
        let m = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=8);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let tape = Tape::new();
        let y = tape.matmul(&t2(m, k, &a), &t2(k, n, &b)).unwrap();
        for (got, want) in y.to_vec().iter().zip(ref_matmul(&a, m, k, &b, n)) {
            assert!((got - want).abs() < 1e-12);
        }

        let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let sm = tape.softmax_last(&t1(&row));
        for (got, want) in sm.to_vec().iter().zip(ref_softmax_row(&row)) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn grad_check_catalog_ops() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..6).map(|_| rng.gen_range(0.2..2.0)).collect();
    let other = t2(2, 3, &[0.4, -0.7, 1.3, 0.9, -0.2, 0.5]);
    type F = Box<dyn Fn(&Tape, &Tensor) -> crate::error::Result<Tensor>>;
    let cases: Vec<(&str, F)> = vec![
        ("add", {
            let o = other.clone();
            Box::new(move |t, x| {
                let x = t.reshape(x, vec![2, 3])?;
                t.sum_all(&t.add(&x, &o)?).pipe_ok()
            })
        }),
        ("mul", {
            let o = other.clone();
            Box::new(move |t, x| {
                let x = t.reshape(x, vec![2, 3])?;
                t.sum_all(&t.mul(&x, &o)?).pipe_ok()
            })
        }),
        ("div", {
            let o = other.clone();
            Box::new(move |t, x| {
                let x = t.reshape(x, vec![2, 3])?;
                t.sum_all(&t.div(&o, &t.add_scalar(&x, 1.0))?).pipe_ok()
            })
        }),
        ("exp", Box::new(|t, x| t.sum_all(&t.exp(x)).pipe_ok())),
        ("log", Box::new(|t, x| t.sum_all(&t.log(x)).pipe_ok())),
        ("power", Box::new(|t, x| t.sum_all(&t.power(x, 1.7)).pipe_ok())),
        ("softmax", {
            Box::new(move |t, x| {
                let s = t.softmax_last(&t.reshape(x, vec![2, 3])?);
                t.sum_all(&t.mul(&s, &s)?).pipe_ok()
            })
        }),
        ("lse", {
            Box::new(move |t, x| {
                let l = t.log_sum_exp_last(&t.reshape(x, vec![2, 3])?);
                t.sum_all(&l).pipe_ok()
            })
        }),
        ("layer_norm", {
            Box::new(move |t, x| {
                let g = t1(&[1.1, 0.9, 1.3]).with_grad();
                let b = t1(&[0.1, -0.1, 0.0]);
                let x = t.reshape(x, vec![2, 3])?;
                let y = t.layer_norm(&x, &g, &b, 1e-5)?;
                t.sum_all(&t.mul(&y, &y)?).pipe_ok()
            })
        }),
        ("matmul_t", {
            let o = other.clone();
            Box::new(move |t, x| {
                let x = t.reshape(x, vec![2, 3])?;
                let y = t.matmul(&x, &t.transpose(&o)?)?;
                t.sum_all(&t.mul(&y, &y)?).pipe_ok()
            })
        }),
        ("concat_slice", {
            Box::new(move |t, x| {
                let x = t.reshape(x, vec![2, 3])?;
                let a = t.slice_cols(&x, 0, 2)?;
                let b = t.slice_cols(&x, 2, 1)?;
                let y = t.concat_cols(&b, &a)?;
                t.sum_all(&t.mul(&y, &y)?).pipe_ok()
            })
        }),
    ];
    for (name, f) in cases {
        let err = grad_check(|t, x| f(t, x), &t1(&x), 1e-5).unwrap();
        assert!(err < 1e-4, "{name}: err = {err}");
    }
}

trait PipeOk: Sized {
    fn pipe_ok(self) -> crate::error::Result<Self> {
        Ok(self)
    }
}
impl PipeOk for Tensor {}

#[test]
fn broadcast_trailing_suffix_only() {
    let tape = Tape::new();
    let a = t2(2, 3, &[1.0; 6]);
    let b = t1(&[1.0, 2.0, 3.0]);
    let y = tape.add(&a, &b).unwrap();
    assert_eq!(y.to_vec(), vec![2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
    // leading broadcast is rejected
    let c = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(tape.add(&a, &c).is_err());
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-30.0..30.0f64, 1..12)) {
            let tape = Tape::new();
            let y = tape.softmax_last(&t1(&row));
            let s: f64 = y.to_vec().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(row in proptest::collection::vec(-10.0..10.0f64, 1..12), c in -5.0..5.0f64) {
            let tape = Tape::new();
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let a = tape.softmax_last(&t1(&row)).to_vec();
            let b = tape.softmax_last(&t1(&shifted)).to_vec();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn sigmoid_in_open_unit_interval(x in -50.0..50.0f64) {
            let tape = Tape::new();
            let y = tape.sigmoid(&Tensor::scalar(x)).unwrap().item().unwrap();
            prop_assert!(y > 0.0 && y < 1.0);
        }
    }
}
