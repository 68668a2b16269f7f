use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn vars(tape: &mut Tape, t: Tensor) -> Var {
    tape.param("x", t).unwrap()
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softplus_at_zero_is_log_two() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0));
    let y = tape.softplus(x).unwrap();
    assert!((tape.value(y).item().unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn matmul_shape_mismatch_names_primitive() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![4, 2]));
    match tape.matmul(a, b) {
        Err(Error::Shape { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]") && detail.contains("[4, 2]"), "{detail}");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = vars(&mut tape, Tensor::new(vec![2, 3], vec![0.3; 6]).unwrap());
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get("x").unwrap(), &Tensor::ones(vec![2, 3]));
}

#[test]
fn gradient_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = vars(&mut tape, Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
    tape.param("unused", Tensor::ones(vec![2, 2])).unwrap();
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get("unused").unwrap(), &Tensor::zeros(vec![2, 2]));
}

#[test]
fn backward_rejects_non_scalar_and_foreign_loss() {
    let mut tape = Tape::new();
    let x = tape.param("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(matches!(tape.backward(x), Err(Error::Tape(_))));

    let mut other = Tape::new();
    let y = other.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
}

#[test]
fn duplicate_parameter_names_are_rejected() {
    let mut tape = Tape::new();
    tape.param("w", Tensor::scalar(1.0)).unwrap();
    assert!(tape.param("w", Tensor::scalar(2.0)).is_err());
}

#[test]
fn exp_overflow_is_a_numeric_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1000.0));
    assert!(matches!(tape.exp(x), Err(Error::Numeric(_))));
}

#[test]
fn gather_and_scatter_are_adjoint() {
    let mut tape = Tape::new();
    let x = vars(&mut tape, Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let idx: Arc<[usize]> = vec![2, 0, 2].into();
    let g = tape.gather_rows(x, idx.clone()).unwrap();
    assert_eq!(tape.value(g).data(), &[5., 6., 1., 2., 5., 6.]);
    let s = tape.scatter_add_rows(g, idx, 4).unwrap();
    assert_eq!(tape.value(s).data(), &[1., 2., 0., 0., 10., 12., 0., 0.]);
    let total = tape.sum(s).unwrap();
    let grads = tape.backward(total).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
}

#[test]
fn tanh_layer_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = Tensor::randn(vec![4, 3], 1.0, &mut rng);
    let x = Tensor::randn(vec![3, 2], 1.0, &mut rng);
    let report = grad_check(
        |tape, xv| {
            let wv = tape.constant(w.clone());
            let h = tape.matmul(wv, xv)?;
            let t = tape.tanh(h)?;
            tape.sum(t)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn linear_function_is_exact_under_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = Tensor::randn(vec![3, 5], 1.0, &mut rng);
    let x = Tensor::randn(vec![5, 1], 1.0, &mut rng);
    let report = grad_check(
        |tape, xv| {
            let wv = tape.constant(w.clone());
            let h = tape.matmul(wv, xv)?;
            let h = tape.scale(h, 0.7)?;
            tape.sum(h)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-10, "{report:?}");
    assert!(report.skipped.is_empty());
}

#[test]
fn relu_kink_is_skipped() {
    let x = Tensor::vector(vec![0.0, 0.5, -0.5]);
    let report = grad_check(
        |tape, xv| {
            let r = tape.relu(xv)?;
            tape.sum(r)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert_eq!(report.skipped, vec![0]);
    assert_eq!(report.checked, 2);
    assert!(report.max_rel_error < 1e-8);
}

#[test]
fn kink_inside_step_is_refined() {
    // kink 3e-5 away: the 1e-4 step crosses it, 1e-5 does not
    let x = Tensor::vector(vec![3e-5, 0.5]);
    let report = grad_check(
        |tape, xv| {
            let r = tape.relu(xv)?;
            tape.sum(r)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert_eq!(report.refined, vec![0]);
    assert!(report.skipped.is_empty());
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_rejects_step_outside_range() {
    let x = Tensor::scalar(1.0);
    assert!(grad_check(|t, v| t.sum(v), &x, 1e-2).is_err());
    assert!(grad_check(|t, v| t.sum(v), &x, 1e-9).is_err());
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = vars(&mut tape, Tensor::vector(vec![0.0, 1.0]));
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[0.0, 1.0]);
}

fn two_losses(tape: &mut Tape, x: Var) -> (Var, Var) {
    let t = tape.tanh(x).unwrap();
    let l1 = tape.sum(t).unwrap();
    let e = tape.mul(x, x).unwrap();
    let sp = tape.softplus(e).unwrap();
    let l2 = tape.mean(sp).unwrap();
    (l1, l2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear_in_the_loss(
        data in prop::collection::vec(-2.0f64..2.0, 6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let x0 = Tensor::new(vec![2, 3], data).unwrap();
        let mut tape = Tape::new();
        let x = tape.param("x", x0).unwrap();
        let (l1, l2) = two_losses(&mut tape, x);
        let s1 = tape.scale(l1, a).unwrap();
        let s2 = tape.scale(l2, b).unwrap();
        let l = tape.add(s1, s2).unwrap();

        let g = tape.backward(l).unwrap();
        let g1 = tape.backward(l1).unwrap();
        let g2 = tape.backward(l2).unwrap();
        let (g, g1, g2) = (g.get("x").unwrap(), g1.get("x").unwrap(), g2.get("x").unwrap());
        for i in 0..6 {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((g.data()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_is_independent_of_recording(data in prop::collection::vec(-2.0f64..2.0, 6)) {
        let x0 = Tensor::new(vec![2, 3], data).unwrap();
        let mut recorded = Tape::new();
        let xr = recorded.param("x", x0.clone()).unwrap();
        let (r1, r2) = two_losses(&mut recorded, xr);
        let mut plain = Tape::new();
        let xp = plain.constant(x0);
        let (p1, p2) = two_losses(&mut plain, xp);
        prop_assert_eq!(recorded.value(r1), plain.value(p1));
        prop_assert_eq!(recorded.value(r2), plain.value(p2));
    }

    #[test]
    fn checkpoint_round_trips(data in prop::collection::vec(-1e6f64..1e6, 1..20)) {
        let mut m = std::collections::BTreeMap::new();
        let n = data.len();
        m.insert("p".to_string(), Tensor::new(vec![n], data).unwrap());
        m.insert("q.bias".to_string(), Tensor::scalar(f64::MIN_POSITIVE));
        let bytes = checkpoint::encode(&m, &serde_json::json!({})).unwrap();
        let (back, _) = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back, m);
    }
}
