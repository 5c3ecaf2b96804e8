//! The assignment factor q(S) and the per-pair log-potentials feeding it.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::gp::{GPBelief, Projection};
use crate::inference::state::Responsibilities;
use crate::kernel::cov_matrix;
use crate::linalg;
use crate::segment::Segment;
use crate::warp::WarpFunction;

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// E[log π_jk] plus the Gaussian log-density of y under the predictive
/// N(K̂μ_x, R + K̂Σ_xK̂ᵀ) at the warped times (−½ log|Σ| convention).
pub fn log_zeta(segment: &Segment, x_belief: &GPBelief, warp: &WarpFunction, elog_pi_jk: f64) -> Result<f64> {
    let kss = cov_matrix(&x_belief.kernel, &x_belief.support, &x_belief.support, false)?;
    let fac = linalg::robust_cholesky(&kss, x_belief.kernel.sigma_f.powi(2), "belief support covariance")?;
    let proj = Projection::new(&x_belief.kernel, &x_belief.support, &fac, &warp.times())?;
    let (mean, cov) = proj.push(&x_belief.mean, &x_belief.cov);
    gaussian_log_zeta(&DVector::from_column_slice(&segment.y), &mean, &cov, elog_pi_jk)
}

pub fn gaussian_log_zeta(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>, elog_pi_jk: f64) -> Result<f64> {
    let fac = linalg::cholesky_auto(cov, "predictive covariance")?;
    Ok(elog_pi_jk + linalg::gaussian_log_density(y, mean, &fac))
}

/// E_{x}[log N(y; K̂x, R)] for x ~ N(mean, cov).
pub fn expected_loglik(y: &DVector<f64>, proj: &Projection, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let fac = linalg::cholesky_auto(&proj.resid, "observation residual")?;
    let m = &proj.khat * mean;
    let u = &proj.khat * cov * proj.khat.transpose();
    Ok(linalg::gaussian_log_density(y, &m, &fac) - 0.5 * linalg::trace_solve(&fac, &u))
}

/// Chain forward-backward over segments. `loglik` is N × K; `elog_pi` is
/// (K+1) × (K+1) with row 0 the initial distribution (the inactive column is
/// ignored). Rows whose potentials are all −∞ are treated as uninformative.
pub fn update_assignments(loglik: &DMatrix<f64>, elog_pi: &DMatrix<f64>) -> Responsibilities {
    let (n, k) = loglik.shape();
    if n == 0 {
        return Responsibilities::empty(k);
    }
    let mut ll = loglik.clone();
    for i in 0..n {
        if ll.row(i).iter().all(|v| !v.is_finite()) {
            log::warn!("segment {i} has no finite likelihood under any cluster; treating it as uninformative");
            ll.row_mut(i).fill(0.0);
        } else {
            for v in ll.row_mut(i).iter_mut() {
                if v.is_nan() {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
    }
    let trans = |j: usize, c: usize| elog_pi[(j + 1, c)];
    let mut alpha = DMatrix::from_element(n, k, f64::NEG_INFINITY);
    for c in 0..k {
        alpha[(0, c)] = elog_pi[(0, c)] + ll[(0, c)];
    }
    let mut buf = vec![0.0; k];
    for i in 1..n {
        for c in 0..k {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = alpha[(i - 1, j)] + trans(j, c);
            }
            alpha[(i, c)] = logsumexp(&buf) + ll[(i, c)];
        }
    }
    let mut beta = DMatrix::zeros(n, k);
    for i in (0..n - 1).rev() {
        for j in 0..k {
            for (c, b) in buf.iter_mut().enumerate() {
                *b = trans(j, c) + ll[(i + 1, c)] + beta[(i + 1, c)];
            }
            beta[(i, j)] = logsumexp(&buf);
        }
    }
    let last: Vec<f64> = alpha.row(n - 1).iter().copied().collect();
    let log_z = logsumexp(&last);

    let mut r = DMatrix::zeros(n, k);
    for i in 0..n {
        let row: Vec<f64> = (0..k).map(|c| alpha[(i, c)] + beta[(i, c)]).collect();
        let z = logsumexp(&row);
        for c in 0..k {
            r[(i, c)] = (row[c] - z).exp();
        }
    }
    let mut xi = Vec::with_capacity(n.saturating_sub(1));
    for i in 1..n {
        let mut x = DMatrix::zeros(k, k);
        let mut vals = Vec::with_capacity(k * k);
        for j in 0..k {
            for c in 0..k {
                vals.push(alpha[(i - 1, j)] + trans(j, c) + ll[(i, c)] + beta[(i, c)]);
            }
        }
        let z = logsumexp(&vals);
        for j in 0..k {
            for c in 0..k {
                x[(j, c)] = (vals[j * k + c] - z).exp();
            }
        }
        xi.push(x);
    }
    // H[q(S)] = log Z − E_q[Σ potentials]
    let mut expected = 0.0;
    for c in 0..k {
        if r[(0, c)] > 0.0 {
            expected += r[(0, c)] * (elog_pi[(0, c)] + ll[(0, c)]);
        }
    }
    for i in 1..n {
        for c in 0..k {
            if r[(i, c)] > 0.0 {
                expected += r[(i, c)] * ll[(i, c)];
            }
        }
        for j in 0..k {
            for c in 0..k {
                if xi[i - 1][(j, c)] > 0.0 {
                    expected += xi[i - 1][(j, c)] * trans(j, c);
                }
            }
        }
    }
    Responsibilities {
        r,
        xi,
        entropy: (log_z - expected).max(0.0),
    }
}

/// One filtering step of q(S) with the previous responsibilities frozen.
/// Returns r_n and ξ_n = r_{n-1} r_nᵀ (None for the first segment) together
/// with the entropy contribution H[q(s_n)].
pub fn filter_assignment(
    prev: Option<&[f64]>,
    loglik: &[f64],
    elog_pi: &DMatrix<f64>,
) -> (Vec<f64>, Option<DMatrix<f64>>, f64) {
    let k = loglik.len();
    let mut pot: Vec<f64> = (0..k)
        .map(|c| {
            let prior = match prev {
                None => elog_pi[(0, c)],
                Some(p) => p.iter().enumerate().map(|(j, pj)| pj * elog_pi[(j + 1, c)]).sum(),
            };
            prior
                + if loglik[c].is_nan() {
                    f64::NEG_INFINITY
                } else {
                    loglik[c]
                }
        })
        .collect();
    if pot.iter().all(|v| !v.is_finite()) {
        pot = vec![0.0; k];
    }
    let z = logsumexp(&pot);
    let r: Vec<f64> = pot.iter().map(|v| (v - z).exp()).collect();
    let h = -r.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    let xi = prev.map(|p| DMatrix::from_fn(p.len(), k, |j, c| p[j] * r[c]));
    (r, xi, h)
}
