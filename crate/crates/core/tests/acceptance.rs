//! End-to-end acceptance checks. Each criterion runs in isolation and prints
//! one PASS/FAIL line; the test fails if any criterion does.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::chain::{check, check_mniw, random_instance};
use common::gp::{dense_condition, dense_predict};
use common::paths::enumerate;
use common::warps::{kp, recovery_rms, template};
use common::*;
use hdpgpc::gp::{gp_condition, predict_at_warp, GPBelief};
use hdpgpc::hdp::{
    expected_beta, expected_log_pi, update_transition_posterior, HDPConfig, StickPosterior, TransitionPosterior,
};
use hdpgpc::inference::assign::update_assignments;
use hdpgpc::inference::{fit_offline, fit_online, predict, InferenceConfig};
use hdpgpc::metrics::{adjusted_rand_index, cluster_count, MetricsReport};
use hdpgpc::respiration::{correlation, dominant_period, respiration_fit, respiration_predict};
use hdpgpc::synth::{synth_generate_full, SynthSpec};
use hdpgpc::warp::{warp_from_aux, WarpAux};
use hdpgpc::Segment;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::function::gamma::digamma;

fn c1_gaussian_conditioning() -> String {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let q = r.random_range(1..7);
        let tt: Vec<f64> = (0..q).map(|i| i as f64 + r.random_range(0.0..0.5)).collect();
        let y: Vec<f64> = (0..q).map(|_| r.random_range(-1.5..1.5)).collect();
        let ts: Vec<f64> = (0..r.random_range(1..7)).map(|_| r.random_range(-1.0..7.0)).collect();
        let p = kp(
            r.random_range(0.5..2.0),
            r.random_range(0.5..2.0),
            r.random_range(0.2..1.0),
        );
        let b = gp_condition(&p, &tt, &y, &ts).unwrap();
        let (m, c) = dense_condition(&p, &tt, &y, &ts);
        worst = worst.max(max_abs_vec(&b.mean, &m)).max(max_abs(&b.cov, &c));

        let support: Vec<f64> = (0..q.max(2)).map(|i| i as f64 * 1.1).collect();
        let bel = GPBelief::new(
            random_vector(&mut r, support.len(), 1.0),
            random_spd(&mut r, support.len(), 0.05) * 0.1,
            support,
            p,
        )
        .unwrap();
        let got = predict_at_warp(&bel, &ts).unwrap();
        let (m, c) = dense_predict(&bel, &ts);
        worst = worst.max(max_abs_vec(&got.mean, &m)).max(max_abs(&got.cov, &c));
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(worst <= 1e-9, "max error {worst:e}");
    assert!(secs < 1.0, "took {secs:.2}s");
    format!("max error {worst:.1e}, {secs:.3}s")
}

fn c2_kalman() -> String {
    let start = Instant::now();
    let mut r = rng(202);
    for trial in 0..100 {
        let inst = random_instance(
            &mut r,
            1 + trial % 6,
            1 + trial % 3,
            1 + (trial / 3) % 3,
            trial % 2 == 1,
        );
        check(&inst, 1e-8);
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "took {secs:.2}s");
    format!("100 chains within 1e-8, {secs:.3}s")
}

fn c3_mniw() -> String {
    check_mniw(303, 50);
    "50 scalar chains within 1e-9, dof = N + nu0".into()
}

fn c4_hdp_algebra() -> String {
    let s = StickPosterior::new(vec![0.3, 0.5, 0.2], vec![4.0, 2.0, 9.0]).unwrap();
    let b = expected_beta(&s);
    assert_eq!(b.iter().sum::<f64>(), 1.0);
    let cfg = HDPConfig::new(10.0, 20.0).unwrap();
    let s1 = StickPosterior::new(vec![0.5], vec![3.0]).unwrap();
    let counts = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 4.0, 0.0]);
    let t = update_transition_posterior(&cfg, &s1, &counts).unwrap();
    assert_eq!(t.kappa, DMatrix::from_row_slice(2, 2, &[11.0, 10.0, 14.0, 10.0]));
    assert!((digamma(2.0) - digamma(1.0) - 1.0).abs() < 1e-12);
    assert!((digamma(3.0) - digamma(2.0) - 0.5).abs() < 1e-12);
    let e = expected_log_pi(&TransitionPosterior {
        kappa: DMatrix::from_row_slice(1, 2, &[2.0, 1.0]),
    });
    // κ = (2, 1): E[log π_1] = ψ(2) − ψ(3) = −1/2
    assert!((e[(0, 0)] + 0.5).abs() < 1e-12);
    "beta sums to 1, kappa and digamma identities exact".into()
}

struct SuiteRun {
    off_ari: f64,
    off_count: usize,
    on_ari: f64,
    iterations: usize,
    converged: bool,
    worst_drop: f64,
    secs: f64,
    report: String,
}

fn suite_run(seed: u64) -> SuiteRun {
    let data = synth_generate_full(&SynthSpec {
        seed,
        ..SynthSpec::default()
    })
    .unwrap();
    let config = InferenceConfig {
        seed,
        ..InferenceConfig::default()
    };
    let start = Instant::now();
    let off = fit_offline(&data.segments, &config).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let on = fit_online(
        &data.segments,
        &InferenceConfig {
            seed,
            ..InferenceConfig::streaming()
        },
    )
    .unwrap();
    let worst_drop = off
        .elbo_trace
        .windows(2)
        .map(|w| (w[0] - w[1]) / w[1].abs())
        .fold(f64::NEG_INFINITY, f64::max);
    SuiteRun {
        off_ari: adjusted_rand_index(&off.assignments(), &data.labels).unwrap(),
        off_count: cluster_count(&off),
        on_ari: adjusted_rand_index(&on.assignments(), &data.labels).unwrap(),
        iterations: off.iterations,
        converged: off.converged,
        worst_drop,
        secs,
        report: MetricsReport::new(&off, &data.segments).unwrap().to_json().unwrap(),
    }
}

fn c5_elbo(runs: &[SuiteRun]) -> String {
    for (seed, r) in runs.iter().enumerate() {
        assert!(
            r.worst_drop <= 1e-6,
            "seed {seed}: relative ELBO drop {:e}",
            r.worst_drop
        );
        assert!(
            r.converged && r.iterations <= 50,
            "seed {seed}: {} iterations, converged {}",
            r.iterations,
            r.converged
        );
        assert!(r.secs < 300.0, "seed {seed}: {:.1}s", r.secs);
    }
    let iters = runs.iter().map(|r| r.iterations).max().unwrap();
    let secs = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    let drop = runs.iter().map(|r| r.worst_drop).fold(0.0, f64::max);
    format!(
        "{} seeds converged, <= {iters} iterations, slowest {secs:.1}s, largest relative decrease {drop:.1e}",
        runs.len()
    )
}

fn c6_recovery(runs: &[SuiteRun]) -> String {
    let good = runs.iter().filter(|r| r.off_ari >= 0.95 && r.off_count == 3).count();
    let on_min = runs.iter().map(|r| r.on_ari).fold(f64::INFINITY, f64::min);
    let off_min = runs.iter().map(|r| r.off_ari).fold(f64::INFINITY, f64::min);
    assert!(good >= 9, "off-line recovered {good}/10 seeds");
    assert!(on_min >= 0.85, "on-line ARI down to {on_min:.3}");
    format!("off-line {good}/10 seeds (min ARI {off_min:.3}), on-line min ARI {on_min:.3}")
}

fn c7_warps() -> String {
    let start = Instant::now();
    let mut r = rng(707);
    let normal = Normal::new(0.0, 3.0).unwrap();
    for _ in 0..10_000 {
        let q = r.random_range(2..60);
        let a: Vec<f64> = (0..q).map(|_| normal.sample(&mut r)).collect();
        let w = warp_from_aux(&WarpAux { a }, 1.0);
        assert!(w.g.windows(2).all(|p| p[1] > p[0]) && w.g[0] > 0.0);
        assert_eq!(*w.g.last().unwrap(), q as f64);
    }
    let worst = (0..10).map(recovery_rms).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    assert!(worst <= 0.5, "recovery RMS {worst:.3}");
    assert!(secs < 30.0, "took {secs:.2}s");
    format!("10000 monotone warps, worst recovery RMS {worst:.3} grid steps, {secs:.2}s")
}

fn c8_chain() -> String {
    let mut g = rng(808);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let ll = DMatrix::from_fn(3, 2, |_, _| g.random_range(-5.0..0.0));
        let e = DMatrix::from_fn(3, 3, |_, _| g.random_range(-3.0..0.0));
        let got = update_assignments(&ll, &e);
        let (r, xi, h) = enumerate(&ll, &e);
        worst = worst.max(max_abs(&got.r, &r)).max((got.entropy - h).abs());
        for (a, b) in got.xi.iter().zip(&xi) {
            worst = worst.max(max_abs(a, b));
        }
    }
    assert!(worst <= 1e-10, "max error {worst:e}");
    format!("50 cases, max error {worst:.1e}")
}

/// Beats whose warps follow a slow sinusoid; respiration is sampled
/// `per_beat` times per beat.
fn c9_respiration() -> String {
    let (q, beats, train, per_beat, period) = (40, 200, 120, 2, 11.3);
    let resp = |u: f64| (2.0 * std::f64::consts::PI * u / period).sin();
    let mut r = rng(909);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let segments: Vec<Segment> = (0..beats)
        .map(|n| {
            let amp = 1.2 * resp(n as f64);
            let y: Vec<f64> = (0..q)
                .map(|j| {
                    let g = j as f64 + amp * (std::f64::consts::PI * j as f64 / (q - 1) as f64).sin();
                    template(g) + noise.sample(&mut r)
                })
                .collect();
            let t: Vec<f64> = (0..q).map(|j| (n * q + j) as f64).collect();
            Segment::new(format!("b{n}"), t, y, None).unwrap()
        })
        .collect();
    let windows: Vec<Vec<f64>> = (0..beats)
        .map(|n| {
            (0..per_beat)
                .map(|i| resp(n as f64 + i as f64 / per_beat as f64))
                .collect()
        })
        .collect();

    let model = fit_online(&segments[..train], &InferenceConfig::streaming()).unwrap();
    let warps: Vec<Vec<f64>> = predict(&model, &segments)
        .unwrap()
        .into_iter()
        .map(|p| p.warped_times)
        .collect();
    let fitted = respiration_fit(&warps[..train], &windows[..train]).unwrap();
    let est = respiration_predict(&fitted, &warps[train..], 1).unwrap();
    let truth: Vec<f64> = windows[train..].concat();
    let corr = correlation(&est, &truth).unwrap();
    let dt = 1.0 / per_beat as f64;
    let p_est = dominant_period(&est, dt).unwrap();
    let err = (p_est - period).abs() / period;
    assert!(corr >= 0.9, "correlation {corr:.3}");
    assert!(err <= 0.1, "period {p_est:.2} vs {period}");
    format!("test correlation {corr:.3}, period {p_est:.2} vs {period} beats")
}

fn c10_determinism(first: &SuiteRun) -> String {
    let again = suite_run(0);
    assert_eq!(first.report, again.report, "metrics reports differ");
    format!("{} identical bytes", first.report.len())
}

#[test]
fn acceptance() {
    let mut outcomes: Vec<(usize, bool, String)> = Vec::new();
    let mut run = |id: usize, name: &str, f: &mut dyn FnMut() -> String| {
        let res = catch_unwind(AssertUnwindSafe(f));
        let (ok, detail) = match res {
            Ok(d) => (true, d),
            Err(e) => (
                false,
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default(),
            ),
        };
        // straight to stderr so the lines survive the harness's output capture
        let line = format!(
            "criterion {id:>2} {name:<26} {}  {detail}\n",
            if ok { "PASS" } else { "FAIL" }
        );
        let _ = std::io::stderr().write_all(line.as_bytes());
        outcomes.push((id, ok, detail));
    };
    run(1, "gaussian conditioning", &mut c1_gaussian_conditioning);
    run(2, "kalman oracle", &mut c2_kalman);
    run(3, "mniw conjugacy", &mut c3_mniw);
    run(4, "hdp algebra", &mut c4_hdp_algebra);
    let mut runs = Vec::new();
    run(5, "elbo behaviour", &mut || {
        runs = (0..10).map(suite_run).collect();
        c5_elbo(&runs)
    });
    run(6, "synthetic recovery", &mut || c6_recovery(&runs));
    run(7, "warp properties", &mut c7_warps);
    run(8, "responsibility chain", &mut c8_chain);
    run(9, "respiration pipeline", &mut c9_respiration);
    run(10, "determinism", &mut || c10_determinism(&runs[0]));
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.1).map(|o| o.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
