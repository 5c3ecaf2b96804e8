mod common;

use common::warps::{belief, kp, recovery_rms, template};
use common::*;
use hdpgpc::gp::{GPBelief, InducingSet};
use hdpgpc::warp::{
    map_warp, warp_for_grid, warp_from_aux, warp_log_prior, MapWarpOptions, WarpAux, WarpFunction, WarpTarget,
};
use hdpgpc::Segment;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn hand_computed_warp() {
    let w = warp_from_aux(
        &WarpAux {
            a: vec![2f64.ln(), 0.0, 0.0],
        },
        1.0,
    );
    for (g, want) in w.g.iter().zip([1.5, 2.25, 3.0]) {
        assert!((g - want).abs() < 1e-10, "{g} vs {want}");
    }
    let id = warp_from_aux(&WarpAux::identity(5), 1.0);
    for (g, want) in id.g.iter().zip(1..=5) {
        assert!((g - want as f64).abs() < 1e-12);
    }
}

#[test]
fn random_aux_vectors_give_monotone_warps_with_exact_endpoint() {
    let mut r = rng(1);
    let normal = Normal::new(0.0, 3.0).unwrap();
    for _ in 0..10_000 {
        let q = r.random_range(2..60);
        let a: Vec<f64> = (0..q).map(|_| normal.sample(&mut r)).collect();
        let scale = r.random_range(0.01..10.0);
        let w = warp_from_aux(&WarpAux { a }, scale);
        assert!(w.g.windows(2).all(|p| p[1] > p[0]));
        assert_eq!(*w.g.last().unwrap(), q as f64 * scale);
        assert!(w.g[0] > 0.0);
    }
}

#[test]
fn prior_matches_dense_density() {
    let vt = kp(1.0, 4.0, 1.0);
    let t = [0.0, 1.0, 2.0];
    let w = warp_for_grid(
        &WarpAux {
            a: vec![0.3, -0.2, 0.1],
        },
        &t,
    );
    let g = w.times();
    let s = DMatrix::from_fn(3, 3, |i, j| {
        sqexp(1.0, 4.0, t[i], t[j]) + if i == j { 1.0 } else { 0.0 }
    });
    let want = log_normal(&DVector::from_column_slice(&g), &DVector::from_column_slice(&t), &s);
    let got = warp_log_prior(&w, &vt, &t).unwrap();
    assert!((got - want).abs() <= 1e-10);
    // identity has zero quadratic term
    let id = warp_log_prior(&WarpFunction::identity_for(&t), &vt, &t).unwrap();
    let zero = log_normal(&DVector::from_column_slice(&t), &DVector::from_column_slice(&t), &s);
    assert!((id - zero).abs() <= 1e-10);
}

#[test]
fn prior_length_mismatch_rejected() {
    let w = WarpFunction::identity_for(&[0.0, 1.0, 2.0]);
    assert!(warp_log_prior(&w, &kp(1.0, 4.0, 1.0), &[0.0, 1.0]).is_err());
}

fn wavy(u: f64) -> f64 {
    (u / 3.0).sin() + 0.5 * (u / 5.0 + 1.0).cos()
}

/// On flat stretches the warp is not identified, so this uses a morphology
/// that varies over the whole span.
#[test]
fn segment_equal_to_template_keeps_identity() {
    let theta = kp(1.0, 2.0, 0.05);
    let locs: Vec<f64> = (0..40).map(|i| i as f64).collect();
    let ind = InducingSet::new(locs.clone(), theta).unwrap();
    let mean = DVector::from_iterator(40, locs.iter().map(|u| wavy(*u)));
    let b = GPBelief::new(mean, DMatrix::identity(40, 40) * 1e-4, locs, theta).unwrap();
    let t: Vec<f64> = (0..40).map(|i| i as f64).collect();
    let y: Vec<f64> = t.iter().map(|u| wavy(*u)).collect();
    let seg = Segment::new("s", t.clone(), y, None).unwrap();
    // the expected-likelihood target also charges for projection residuals,
    // so it is only held to half a grid step
    for (target, tol) in [(WarpTarget::Predictive, 0.1), (WarpTarget::Expected, 0.5)] {
        let opts = MapWarpOptions {
            target,
            ..Default::default()
        };
        let res = map_warp(&seg, &b, &ind, &kp(1.0, 4.0, 1.0), &WarpAux::identity(40), &opts).unwrap();
        let dev = res
            .warp
            .times()
            .iter()
            .zip(&t)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev <= tol, "{target:?}: max deviation {dev}");
        assert!(res.trace.windows(2).all(|w| w[1] >= w[0]));
    }
}

#[test]
fn smooth_warps_are_recovered() {
    for seed in 0..5 {
        let rms = recovery_rms(seed);
        assert!(rms <= 0.5, "seed {seed}: rms {rms}");
    }
}

#[test]
fn huge_prior_noise_leaves_only_the_likelihood() {
    let theta = kp(1.0, 2.0, 0.1);
    let (ind, b) = belief(theta, 20);
    let t: Vec<f64> = (0..20).map(|i| i as f64).collect();
    let y: Vec<f64> = t.iter().map(|u| template(u + 0.5)).collect();
    let seg = Segment::new("s", t.clone(), y, None).unwrap();
    let weak = kp(1.0, 4.0, 1e6);
    let res = map_warp(
        &seg,
        &b,
        &ind,
        &weak,
        &WarpAux::identity(20),
        &MapWarpOptions::default(),
    )
    .unwrap();
    let p_end = warp_log_prior(&res.warp, &weak, &t).unwrap();
    let p_id = warp_log_prior(&WarpFunction::identity_for(&t), &weak, &t).unwrap();
    assert!((p_end - p_id).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn warps_are_strictly_increasing(a in proptest::collection::vec(-30.0f64..30.0, 2..50), scale in 0.01f64..5.0) {
        let w = warp_from_aux(&WarpAux { a: a.clone() }, scale);
        prop_assert!(w.g.windows(2).all(|p| p[1] > p[0]));
        prop_assert_eq!(*w.g.last().unwrap(), a.len() as f64 * scale);
    }

    #[test]
    fn map_warp_is_shift_invariant(shift in -5.0f64..5.0, amp in -0.5f64..0.5) {
        let theta = kp(1.0, 2.0, 0.1);
        let (ind, b) = belief(theta, 16);
        let t: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let y: Vec<f64> = t.iter().map(|u| template(u + 0.3)).collect();
        let seg = Segment::new("s", t, y, None).unwrap();
        let a0: Vec<f64> = (0..16).map(|i| amp * (i as f64 * 0.4).sin()).collect();
        let a1: Vec<f64> = a0.iter().map(|v| v + shift).collect();
        let vt = kp(1.0, 4.0, 1.0);
        let opts = MapWarpOptions { max_iters: 20, ..Default::default() };
        let r0 = map_warp(&seg, &b, &ind, &vt, &WarpAux { a: a0 }, &opts).unwrap();
        let r1 = map_warp(&seg, &b, &ind, &vt, &WarpAux { a: a1 }, &opts).unwrap();
        for (x, y) in r0.warp.g.iter().zip(&r1.warp.g) {
            prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
        }
    }
}
