use camforge::gradcheck::{analytic_grads, finite_diff_check, DEFAULT_EPS};
use camforge::verify::{self, TOLERANCE};
use camforge::Tensor;
use proptest::prelude::*;

#[test]
fn every_op_passes_for_several_seeds() {
    for seed in 0..4 {
        for r in verify::op_checks(seed).unwrap() {
            assert!(r.passed(), "seed {seed}: {r:?}");
        }
    }
}

#[test]
fn end_to_end_checks_pass() {
    for seed in [0, 7, 42] {
        for r in verify::run_all(seed, false).unwrap() {
            assert!(r.max_rel_error < TOLERANCE, "seed {seed}: {r:?}");
        }
    }
}

#[test]
fn sum_of_squares_closed_form() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
    let f = |g: &mut camforge::Graph, v: &[camforge::Var]| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum_all(sq))
    };
    let (value, grads) = analytic_grads(&f, std::slice::from_ref(&x)).unwrap();
    assert_eq!(value, 14.0);
    assert_eq!(grads[0].data(), &[2.0, 4.0, 6.0]);
    let err = finite_diff_check(|g, v| f(g, &[v]), &x, DEFAULT_EPS).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn matmul_grad_is_ones_times_b_transposed() {
    let a = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0);
    let b = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
    let f = |g: &mut camforge::Graph, v: &[camforge::Var]| {
        let p = g.matmul(v[0], v[1])?;
        Ok(g.sum_all(p))
    };
    let (_, grads) = analytic_grads(&f, &[a, b.clone()]).unwrap();
    let want = Tensor::ones(&[2, 4]).matmul(&b.transpose().unwrap()).unwrap();
    assert!(grads[0].max_abs_diff(&want) < 1e-12);
}

#[test]
fn gap_grad_spreads_evenly() {
    let x = Tensor::from_fn(&[2, 2, 3], |i| i as f64);
    let f = |g: &mut camforge::Graph, v: &[camforge::Var]| {
        let p = g.gap(v[0])?;
        Ok(g.sum_all(p))
    };
    let (_, grads) = analytic_grads(&f, &[x]).unwrap();
    assert!(grads[0].data().iter().all(|&d| (d - 1.0 / 6.0).abs() < 1e-15));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_seeds_keep_every_op_within_tolerance(seed in any::<u64>()) {
        for r in verify::op_checks(seed).unwrap() {
            prop_assert!(r.passed(), "{:?}", r);
        }
    }
}
