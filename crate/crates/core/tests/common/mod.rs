//! Dense reference computations shared by the integration tests.
#![allow(dead_code)]

pub mod chain;
pub mod gp;
pub mod paths;
pub mod warps;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Condition a joint Gaussian N(m, S) over (a, b) on b = value, where the
/// first `na` coordinates are a. Uses a plain matrix inverse.
pub fn condition(m: &DVector<f64>, s: &DMatrix<f64>, na: usize, value: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.len();
    let nb = n - na;
    let saa = s.view((0, 0), (na, na)).into_owned();
    let sab = s.view((0, na), (na, nb)).into_owned();
    let sbb = s.view((na, na), (nb, nb)).into_owned();
    let inv = sbb.try_inverse().expect("invertible block");
    let ma = m.rows(0, na).into_owned();
    let mb = m.rows(na, nb).into_owned();
    let mean = ma + &sab * &inv * (value - mb);
    let cov = saa - &sab * &inv * sab.transpose();
    (mean, cov)
}

pub fn sqexp(sf: f64, l: f64, a: f64, b: f64) -> f64 {
    sf * sf * (-0.5 * ((a - b) / l).powi(2)).exp()
}

pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * floor
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// Log-density of a Gaussian through an explicit inverse and determinant.
pub fn log_normal(x: &DVector<f64>, m: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    let d = x - m;
    let inv = s.clone().try_inverse().unwrap();
    -0.5 * ((d.transpose() * inv * &d)[(0, 0)]
        + s.determinant().ln()
        + x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

pub fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

pub fn max_abs_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).abs().max()
}
