//! Dense Gaussian-process references.

use hdpgpc::gp::GPBelief;
use hdpgpc::kernel::KernelParams;
use nalgebra::{DMatrix, DVector};

use super::{condition, sqexp};

/// Posterior of f at `ts` given noisy observations `y` at `tt`, from
/// the dense joint prior.
pub fn dense_condition(p: &KernelParams, tt: &[f64], y: &[f64], ts: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    // joint over (f(ts), y(tt))
    let pts: Vec<f64> = ts.iter().chain(tt).copied().collect();
    let n = pts.len();
    let s = DMatrix::from_fn(n, n, |i, j| {
        let noise = if i == j && i >= ts.len() {
            p.sigma_n.powi(2)
        } else {
            0.0
        };
        sqexp(p.sigma_f, p.length_scale, pts[i], pts[j]) + noise
    });
    condition(&DVector::zeros(n), &s, ts.len(), &DVector::from_column_slice(y))
}

/// Law of total expectation and covariance over a Gaussian belief on the
/// support, with the GP conditional from a dense joint prior.
pub fn dense_predict(b: &GPBelief, w: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let p = b.kernel;
    let s = &b.support;
    let pts: Vec<f64> = w.iter().chain(s.iter()).copied().collect();
    let n = pts.len();
    let joint = DMatrix::from_fn(n, n, |i, j| {
        let noise = if i == j && i < w.len() { p.sigma_n.powi(2) } else { 0.0 };
        sqexp(p.sigma_f, p.length_scale, pts[i], pts[j]) + noise
    });
    let nw = w.len();
    // conditional map from the support values to the query values
    let kws = joint.view((0, nw), (nw, s.len())).into_owned();
    let kss = joint.view((nw, nw), (s.len(), s.len())).into_owned();
    let map = &kws * kss.clone().try_inverse().unwrap();
    let (_, cond_cov) = condition(&DVector::zeros(n), &joint, nw, &DVector::zeros(s.len()));
    (&map * &b.mean, cond_cov + &map * &b.cov * map.transpose())
}
