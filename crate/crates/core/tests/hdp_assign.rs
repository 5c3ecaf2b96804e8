mod common;

use common::paths::enumerate;
use common::*;
use hdpgpc::hdp::{
    expected_beta, expected_log_pi, hdp_elbo, optimize_sticks, stick_objective, update_transition_posterior, HDPConfig,
    StickPosterior, TransitionPosterior,
};
use hdpgpc::inference::assign::{filter_assignment, update_assignments};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use statrs::function::gamma::digamma;

#[test]
fn expected_beta_sums_to_one() {
    let s = StickPosterior::new(vec![0.3, 0.5, 0.2], vec![4.0, 2.0, 9.0]).unwrap();
    let b = expected_beta(&s);
    assert_eq!(b.len(), 4);
    assert_eq!(b.iter().sum::<f64>(), 1.0);
    // hand: 0.3, 0.7·0.5, 0.35·0.2, remainder
    assert!((b[0] - 0.3).abs() < 1e-15);
    assert!((b[1] - 0.35).abs() < 1e-15);
    assert!((b[2] - 0.07).abs() < 1e-15);
    assert!((b[3] - 0.28).abs() < 1e-15);
}

#[test]
fn kappa_hand_arithmetic() {
    let cfg = HDPConfig::new(10.0, 20.0).unwrap();
    let s = StickPosterior::new(vec![0.5], vec![3.0]).unwrap();
    let counts = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 4.0, 0.0]);
    let t = update_transition_posterior(&cfg, &s, &counts).unwrap();
    // α·E[β] = 20·(0.5, 0.5) = (10, 10)
    assert_eq!(t.kappa, DMatrix::from_row_slice(2, 2, &[11.0, 10.0, 14.0, 10.0]));
}

#[test]
fn digamma_identities() {
    assert!((digamma(2.0) - digamma(1.0) - 1.0).abs() < 1e-12);
    assert!((digamma(3.0) - digamma(2.0) - 0.5).abs() < 1e-12);
    let t = TransitionPosterior {
        kappa: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
    };
    // E[log π] with κ = (1, 1): ψ(1) − ψ(2) = −1
    let e = expected_log_pi(&t);
    assert!((e[(0, 0)] + 1.0).abs() < 1e-12);
}

#[test]
fn transition_counts_shape_checked() {
    let cfg = HDPConfig::default();
    let s = StickPosterior::prior(&cfg, 2);
    assert!(update_transition_posterior(&cfg, &s, &DMatrix::zeros(2, 2)).is_err());
    let mut bad = DMatrix::zeros(3, 3);
    bad[(0, 2)] = 1.0;
    assert!(update_transition_posterior(&cfg, &s, &bad).is_err());
}

#[test]
fn stick_optimization_does_not_decrease_objective() {
    let cfg = HDPConfig::default();
    let s = StickPosterior::prior(&cfg, 3);
    let counts = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, 0.0, 0.0, 8.0, 1.0, 0.0, 0.0, 1.0, 6.0, 2.0, 0.0, 0.0, 1.0, 5.0, 0.0,
        ],
    );
    let t = update_transition_posterior(&cfg, &s, &counts).unwrap();
    let fit = optimize_sticks(&cfg, &t, &s).unwrap();
    assert!(fit.objective >= stick_objective(&cfg, &t, &s) - 1e-9);
    assert!(hdp_elbo(&cfg, &fit.sticks, &t, &counts).is_finite());
}

#[test]
fn responsibilities_match_path_enumeration() {
    let mut g = rng(17);
    for _ in 0..50 {
        let ll = DMatrix::from_fn(3, 2, |_, _| g.random_range(-5.0..0.0));
        let e = DMatrix::from_fn(3, 3, |_, _| g.random_range(-3.0..0.0));
        let got = update_assignments(&ll, &e);
        let (r, xi, h) = enumerate(&ll, &e);
        assert!(max_abs(&got.r, &r) <= 1e-10);
        for (a, b) in got.xi.iter().zip(&xi) {
            assert!(max_abs(a, b) <= 1e-10);
        }
        assert!((got.entropy - h).abs() <= 1e-10);
    }
}

#[test]
fn longer_chains_match_enumeration() {
    let mut g = rng(19);
    for _ in 0..10 {
        let ll = DMatrix::from_fn(5, 3, |_, _| g.random_range(-8.0..0.0));
        let e = DMatrix::from_fn(4, 4, |_, _| g.random_range(-3.0..0.0));
        let got = update_assignments(&ll, &e);
        let (r, _, h) = enumerate(&ll, &e);
        assert!(max_abs(&got.r, &r) <= 1e-10);
        assert!((got.entropy - h).abs() <= 1e-9);
    }
}

#[test]
fn filtering_step_is_a_softmax() {
    let e = DMatrix::from_row_slice(3, 3, &[-0.5, -1.0, -2.0, -0.1, -3.0, -2.0, -2.0, -0.2, -2.0]);
    let (r, xi, h) = filter_assignment(Some(&[1.0, 0.0]), &[-1.0, -2.0], &e);
    let a: f64 = -0.1 - 1.0;
    let b: f64 = -3.0 - 2.0;
    let z = a.exp() + b.exp();
    assert!((r[0] - a.exp() / z).abs() < 1e-12);
    assert!((r[1] - b.exp() / z).abs() < 1e-12);
    let xi = xi.unwrap();
    assert!((xi[(0, 0)] - r[0]).abs() < 1e-12 && xi[(1, 0)] == 0.0);
    assert!(h > 0.0);
}

proptest! {
    #[test]
    fn responsibility_rows_sum_to_one(vals in proptest::collection::vec(-20.0f64..0.0, 8), trans in proptest::collection::vec(-4.0f64..0.0, 9)) {
        let ll = DMatrix::from_row_slice(4, 2, &vals);
        let e = DMatrix::from_row_slice(3, 3, &trans);
        let r = update_assignments(&ll, &e);
        for i in 0..4 {
            prop_assert!((r.r.row(i).sum() - 1.0).abs() < 1e-12);
        }
        for x in &r.xi {
            prop_assert!((x.sum() - 1.0).abs() < 1e-12);
        }
        prop_assert!(r.entropy >= 0.0);
    }

    #[test]
    fn expected_beta_is_a_distribution(ls in proptest::collection::vec(0.001f64..0.999, 1..10)) {
        let eta = vec![2.0; ls.len()];
        let b = expected_beta(&StickPosterior::new(ls, eta).unwrap());
        prop_assert!(b.iter().all(|v| *v >= 0.0));
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
