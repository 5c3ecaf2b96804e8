//! Warp fixtures: a three-bump template and a recovery experiment.

use hdpgpc::gp::{GPBelief, InducingSet};
use hdpgpc::kernel::KernelParams;
use hdpgpc::warp::{map_warp, MapWarpOptions, WarpAux, WarpTarget};
use hdpgpc::Segment;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::rng;

pub fn kp(sf: f64, l: f64, sn: f64) -> KernelParams {
    KernelParams::new(sf, l, sn).unwrap()
}

pub fn template(u: f64) -> f64 {
    2.0 * (-0.5 * ((u - 12.0) / 2.5).powi(2)).exp() - 1.5 * (-0.5 * ((u - 25.0) / 3.0).powi(2)).exp()
        + 0.8 * (-0.5 * ((u - 33.0) / 2.0).powi(2)).exp()
}

pub fn belief(theta: KernelParams, q: usize) -> (InducingSet, GPBelief) {
    let locs: Vec<f64> = (0..q).map(|i| i as f64 * (q as f64 - 1.0) / (q as f64 - 1.0)).collect();
    let ind = InducingSet::new(locs.clone(), theta).unwrap();
    let mean = DVector::from_iterator(q, locs.iter().map(|u| template(*u)));
    let b = GPBelief::new(mean, DMatrix::identity(q, q) * 1e-4, locs, theta).unwrap();
    (ind, b)
}

/// RMS error (grid steps) of warp recovery at 20 dB SNR.
pub fn recovery_rms(seed: u64) -> f64 {
    let q = 40;
    let theta = kp(1.0, 2.0, 0.1);
    let (ind, b) = belief(theta, q);
    let mut r = rng(seed);
    let amp = r.random_range(-1.5..1.5);
    let t: Vec<f64> = (0..q).map(|i| i as f64).collect();
    let truth: Vec<f64> = t
        .iter()
        .map(|j| j + amp * (std::f64::consts::PI * j / (q - 1) as f64).sin())
        .collect();
    let clean: Vec<f64> = truth.iter().map(|u| template(*u)).collect();
    let power = clean.iter().map(|v| v * v).sum::<f64>() / q as f64;
    let noise = Normal::new(0.0, (power / 100.0).sqrt()).unwrap();
    let y: Vec<f64> = clean.iter().map(|v| v + noise.sample(&mut r)).collect();
    let seg = Segment::new("s", t, y, None).unwrap();
    let opts = MapWarpOptions {
        target: WarpTarget::Predictive,
        ..Default::default()
    };
    let res = map_warp(&seg, &b, &ind, &kp(1.0, 4.0, 1.0), &WarpAux::identity(q), &opts).unwrap();
    let g = res.warp.times();
    (g.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / q as f64).sqrt()
}
