//! Monotonic time warps and their MAP estimation.
//!
//! A warp over a Q-point grid is parameterized by unconstrained auxiliary
//! values `a`: g_q = Q·scale·Σ_{i≤q} softmax(a)_i. The softmax carries a
//! relative floor of 1e-12 so increments never underflow, which keeps the
//! warp strictly increasing for any finite `a`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GPBelief, InducingSet, Projection};
use crate::kernel::{cov_matrix, Covariance, KernelParams};
use crate::linalg::{self, Factor, LN_2PI};
use crate::optim::{self, AscentOptions};
use crate::segment::Segment;

const SOFTMAX_FLOOR: f64 = 1e-12;

/// Unconstrained auxiliary variables of a warp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpAux {
    pub a: Vec<f64>,
}

impl WarpAux {
    pub fn identity(q: usize) -> Self {
        Self { a: vec![0.0; q] }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// A warped grid. `g` lives on the abstract scale `(0, Q·scale]`;
/// `times()` shifts it so that the identity warp reproduces the source grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpFunction {
    pub g: Vec<f64>,
    pub offset: f64,
    pub source_grid: Vec<f64>,
}

impl WarpFunction {
    /// Warped time stamps in the units of the source grid.
    pub fn times(&self) -> Vec<f64> {
        self.g.iter().map(|v| v + self.offset).collect()
    }

    pub fn identity_for(t: &[f64]) -> Self {
        warp_for_grid(&WarpAux::identity(t.len()), t)
    }
}

/// Floored softmax; entries sum to one.
fn softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn floored(sm: &[f64]) -> Vec<f64> {
    let q = sm.len() as f64;
    sm.iter()
        .map(|v| (v + SOFTMAX_FLOOR) / (1.0 + q * SOFTMAX_FLOOR))
        .collect()
}

/// g_q = Q·grid_scale·Σ_{i≤q} softmax(a)_i, with g_Q = Q·grid_scale exactly.
pub fn warp_from_aux(a: &WarpAux, grid_scale: f64) -> WarpFunction {
    let q = a.len();
    let s = floored(&softmax(&a.a));
    let total = q as f64 * grid_scale;
    let mut acc = 0.0;
    let mut g: Vec<f64> = s
        .iter()
        .map(|v| {
            acc += v;
            total * acc
        })
        .collect();
    if let Some(last) = g.last_mut() {
        *last = total;
    }
    WarpFunction {
        g,
        offset: 0.0,
        source_grid: (1..=q).map(|i| i as f64 * grid_scale).collect(),
    }
}

/// Warp over a segment's time grid: scale = (t_Q − t_1)/(Q − 1) and the
/// warped times start from t_1 under the identity.
pub fn warp_for_grid(a: &WarpAux, t: &[f64]) -> WarpFunction {
    let q = t.len();
    let scale = grid_scale(t);
    let mut w = warp_from_aux(a, scale);
    w.offset = t[0] - scale;
    w.source_grid = t.to_vec();
    // pin the endpoint on the source grid exactly
    if let Some(last) = w.g.last_mut() {
        *last = t[q - 1] - w.offset;
    }
    w
}

pub fn grid_scale(t: &[f64]) -> f64 {
    let q = t.len();
    if q < 2 {
        1.0
    } else {
        (t[q - 1] - t[0]) / (q - 1) as f64
    }
}

/// Factor of the warp prior covariance K^ϑ_{t,t} (σ_n² included).
pub fn warp_prior_factor(vartheta: &KernelParams, t: &[f64]) -> Result<Factor> {
    let k = cov_matrix(vartheta, t, t, true)?;
    linalg::robust_cholesky(
        &k,
        vartheta.signal_variance().max(vartheta.noise_variance()),
        "warp prior",
    )
}

/// log N(g | t, K^ϑ_{t,t}): the warp prior is centred on the identity map.
pub fn warp_log_prior(g: &WarpFunction, vartheta: &KernelParams, t: &[f64]) -> Result<f64> {
    vartheta.validate()?;
    let times = g.times();
    if times.len() != t.len() {
        return Err(Error::Dimension(format!("|g| = {} but |t| = {}", times.len(), t.len())));
    }
    let fac = warp_prior_factor(vartheta, t)?;
    Ok(log_prior_with(&fac, &times, t))
}

fn log_prior_with(fac: &Factor, times: &[f64], t: &[f64]) -> f64 {
    let x = DVector::from_column_slice(times);
    let m = DVector::from_column_slice(t);
    linalg::gaussian_log_density(&x, &m, fac)
}

#[derive(Clone, Debug)]
pub struct MapWarpOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Multiplies the likelihood term (the segment's responsibility inside
    /// coordinate ascent); 1 gives the plain MAP objective.
    pub likelihood_weight: f64,
    pub target: WarpTarget,
}

/// What the likelihood term of the alignment objective measures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WarpTarget {
    /// E_x[log N(y | K̂x, R)], the term appearing in the variational bound.
    #[default]
    Expected,
    /// log N(y | K̂μ, R + K̂ΣK̂ᵀ); broader, used when scoring candidates.
    Predictive,
}

impl Default for MapWarpOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tol: 1e-6,
            likelihood_weight: 1.0,
            target: WarpTarget::Expected,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MapWarp {
    pub aux: WarpAux,
    pub warp: WarpFunction,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted optimizer step.
    pub trace: Vec<f64>,
}

/// Alignment target: the pseudo-observation belief of one cluster at its
/// inducing locations. The belief covariance enters as an expectation
/// (trace penalty), not as extra observation noise.
pub struct WarpObjective<'a> {
    pub segment: &'a Segment,
    pub inducing: &'a InducingSet,
    pub x_mean: &'a DVector<f64>,
    pub x_cov: &'a DMatrix<f64>,
    prior: Factor,
    weight: f64,
    target: WarpTarget,
}

impl<'a> WarpObjective<'a> {
    pub fn new(
        segment: &'a Segment,
        inducing: &'a InducingSet,
        x_mean: &'a DVector<f64>,
        x_cov: &'a DMatrix<f64>,
        vartheta: &KernelParams,
        weight: f64,
    ) -> Result<Self> {
        if x_mean.len() != inducing.len() || x_cov.nrows() != inducing.len() {
            return Err(Error::Dimension(format!(
                "belief of size {} against {} inducing points",
                x_mean.len(),
                inducing.len()
            )));
        }
        vartheta.validate()?;
        Ok(Self {
            segment,
            inducing,
            x_mean,
            x_cov,
            prior: warp_prior_factor(vartheta, &segment.t)?,
            weight,
            target: WarpTarget::Expected,
        })
    }

    pub fn with_target(mut self, target: WarpTarget) -> Self {
        self.target = target;
        self
    }

    /// Likelihood term at warped times under the configured target.
    pub fn log_lik(&self, times: &[f64]) -> Result<f64> {
        match self.target {
            WarpTarget::Expected => self.expected_log_lik(times),
            WarpTarget::Predictive => {
                let proj = Projection::onto(self.inducing, times)?;
                let (m, s) = proj.push(self.x_mean, self.x_cov);
                let fac = linalg::robust_cholesky(&s, self.inducing.kernel.signal_variance(), "warp predictive")?;
                Ok(linalg::gaussian_log_density(
                    &DVector::from_column_slice(&self.segment.y),
                    &m,
                    &fac,
                ))
            }
        }
    }

    /// Expected log-likelihood E_x[log N(y | K̂x, R)] at warped times.
    pub fn expected_log_lik(&self, times: &[f64]) -> Result<f64> {
        let proj = Projection::onto(self.inducing, times)?;
        let fac = linalg::robust_cholesky(&proj.resid, self.inducing.kernel.signal_variance(), "warp residual")?;
        let y = DVector::from_column_slice(&self.segment.y);
        let m = &proj.khat * self.x_mean;
        let u = &proj.khat * self.x_cov * proj.khat.transpose();
        Ok(linalg::gaussian_log_density(&y, &m, &fac) - 0.5 * linalg::trace_solve(&fac, &u))
    }

    pub fn log_prior(&self, times: &[f64]) -> f64 {
        log_prior_with(&self.prior, times, &self.segment.t)
    }

    pub fn value(&self, aux: &WarpAux) -> Result<f64> {
        let times = warp_for_grid(aux, &self.segment.t).times();
        Ok(self.weight * self.log_lik(&times)? + self.log_prior(&times))
    }

    /// Objective and gradient with respect to the warped times.
    fn value_and_time_grad(&self, times: &[f64]) -> Result<(f64, Vec<f64>)> {
        let kern = &self.inducing.kernel;
        let tp = &self.inducing.locations;
        let q = times.len();
        let k_gp = cov_matrix(kern, times, tp, false)?;
        let dk_gp = DMatrix::from_fn(q, tp.len(), |i, j| kern.dk_da(times[i], tp[j]));
        let kpp = self.inducing.factor();
        let khat = kpp.solve(&k_gp.transpose()).transpose();
        let a_mat = kpp.solve(&dk_gp.transpose()).transpose();
        let k_gg = cov_matrix(kern, times, times, true)?;
        let resid = linalg::symmetrize(&(k_gg - &khat * k_gp.transpose()));
        if self.target == WarpTarget::Predictive {
            return self.predictive_time_grad(times, resid, &khat, &a_mat, &k_gp);
        }
        let fac = linalg::robust_cholesky(&resid, kern.signal_variance(), "warp residual")?;
        let rinv = fac.inverse();

        let y = DVector::from_column_slice(&self.segment.y);
        let e = &y - &khat * self.x_mean;
        let alpha = &rinv * &e;
        let u = &khat * self.x_cov * khat.transpose();
        let rinv_u = &rinv * &u;
        let lik = -0.5 * (e.dot(&alpha) + fac.log_det() + q as f64 * LN_2PI) - 0.5 * rinv_u.trace();

        let w = &rinv - &alpha * alpha.transpose() - &rinv_u * &rinv;
        let e_mat = &a_mat * k_gp.transpose();
        let f_mat = &a_mat * self.x_cov * khat.transpose();
        let dm = &a_mat * self.x_mean;
        let mut grad = vec![0.0; q];
        for (i, gi) in grad.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..q {
                let d1 = kern.dk_da(times[i], times[j]);
                s -= w[(i, j)] * (d1 - e_mat[(i, j)]);
                s -= rinv[(i, j)] * f_mat[(i, j)];
            }
            s += alpha[i] * dm[i];
            *gi = self.weight * s;
        }

        let x = DVector::from_column_slice(times);
        let mu = DVector::from_column_slice(&self.segment.t);
        let dev = &x - &mu;
        let prior = linalg::gaussian_log_density(&x, &mu, &self.prior);
        let prior_grad = self.prior.solve_vec(&dev);
        for (gi, pg) in grad.iter_mut().zip(prior_grad.iter()) {
            *gi -= pg;
        }
        Ok((self.weight * lik + prior, grad))
    }

    fn predictive_time_grad(
        &self,
        times: &[f64],
        resid: DMatrix<f64>,
        khat: &DMatrix<f64>,
        a_mat: &DMatrix<f64>,
        k_gp: &DMatrix<f64>,
    ) -> Result<(f64, Vec<f64>)> {
        let kern = &self.inducing.kernel;
        let q = times.len();
        let s = linalg::symmetrize(&(resid + khat * self.x_cov * khat.transpose()));
        let fac = linalg::robust_cholesky(&s, kern.signal_variance(), "warp predictive")?;
        let sinv = fac.inverse();
        let y = DVector::from_column_slice(&self.segment.y);
        let e = &y - khat * self.x_mean;
        let alpha = &sinv * &e;
        let lik = -0.5 * (e.dot(&alpha) + fac.log_det() + q as f64 * LN_2PI);
        let w = &sinv - &alpha * alpha.transpose();
        let e_mat = a_mat * k_gp.transpose();
        let f_mat = a_mat * self.x_cov * khat.transpose();
        let dm = a_mat * self.x_mean;
        let mut grad = vec![0.0; q];
        for (i, gi) in grad.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..q {
                acc -= w[(i, j)] * (kern.dk_da(times[i], times[j]) - e_mat[(i, j)] + f_mat[(i, j)]);
            }
            acc += alpha[i] * dm[i];
            *gi = self.weight * acc;
        }
        let x = DVector::from_column_slice(times);
        let mu = DVector::from_column_slice(&self.segment.t);
        let prior = linalg::gaussian_log_density(&x, &mu, &self.prior);
        for (gi, pg) in grad.iter_mut().zip(self.prior.solve_vec(&(&x - &mu)).iter()) {
            *gi -= pg;
        }
        Ok((self.weight * lik + prior, grad))
    }

    /// Objective and gradient with respect to the auxiliary variables.
    pub fn value_and_grad(&self, a: &[f64]) -> Result<(f64, Vec<f64>)> {
        let t = &self.segment.t;
        let q = t.len();
        let aux = WarpAux { a: a.to_vec() };
        let times = warp_for_grid(&aux, t).times();
        let (v, g_time) = self.value_and_time_grad(&times)?;
        let sm = softmax(a);
        let c = q as f64 * grid_scale(t) / (1.0 + q as f64 * SOFTMAX_FLOOR);
        let mut cum = 0.0;
        let weighted: f64 = sm
            .iter()
            .zip(&g_time)
            .map(|(s, g)| {
                cum += s;
                g * cum
            })
            .sum();
        // suffix sums Σ_{i≥l} G_i
        let mut suffix = vec![0.0; q + 1];
        for i in (0..q).rev() {
            suffix[i] = suffix[i + 1] + g_time[i];
        }
        let grad = (0..q).map(|l| c * sm[l] * (suffix[l] - weighted)).collect();
        Ok((v, grad))
    }
}

/// MAP alignment of one segment against one cluster's pseudo-observation
/// belief. The returned objective is never below the objective at `init`.
pub fn map_warp(
    segment: &Segment,
    x_belief: &GPBelief,
    inducing: &InducingSet,
    vartheta: &KernelParams,
    init: &WarpAux,
    opts: &MapWarpOptions,
) -> Result<MapWarp> {
    if init.len() != segment.len() {
        return Err(Error::Dimension(format!(
            "warp init has {} entries for a segment of length {}",
            init.len(),
            segment.len()
        )));
    }
    if x_belief.len() != inducing.len() {
        return Err(Error::Dimension(format!(
            "belief of size {} against {} inducing points",
            x_belief.len(),
            inducing.len()
        )));
    }
    let obj = WarpObjective::new(
        segment,
        inducing,
        &x_belief.mean,
        &x_belief.cov,
        vartheta,
        opts.likelihood_weight,
    )?
    .with_target(opts.target);
    let initial = obj.value(init)?;
    let ascent = AscentOptions {
        max_iters: opts.max_iters,
        rel_tol: opts.rel_tol,
        grad_tol: 1e-9,
        max_step: 2.0,
        ..Default::default()
    };
    let res = optim::maximize(
        |a| {
            obj.value_and_grad(a)
                .unwrap_or_else(|_| (f64::NEG_INFINITY, vec![0.0; a.len()]))
        },
        &init.a,
        &ascent,
    );
    let (aux, value) = if res.value >= initial {
        (WarpAux { a: res.x }, res.value)
    } else {
        (init.clone(), initial)
    };
    if !res.converged {
        log::debug!("warp for segment {} hit the iteration cap", segment.id);
    }
    Ok(MapWarp {
        warp: warp_for_grid(&aux, &segment.t),
        aux,
        objective: value,
        initial_objective: initial,
        iterations: res.iterations,
        converged: res.converged,
        trace: res.trace,
    })
}

/// Aligns a segment to a belief by the predictive target starting from the
/// identity and returns the warp with its score: the predictive
/// log-density at the warp plus the warp's log prior relative to the
/// identity. The identity warp therefore scores its plain predictive
/// density and distortions pay for themselves.
pub fn aligned_score(
    segment: &Segment,
    x_belief: &GPBelief,
    inducing: &InducingSet,
    vartheta: &KernelParams,
    opts: &MapWarpOptions,
) -> Result<(WarpAux, f64)> {
    let opts = MapWarpOptions {
        likelihood_weight: 1.0,
        target: WarpTarget::Predictive,
        ..opts.clone()
    };
    let id = WarpAux::identity(segment.len());
    let res = map_warp(segment, x_belief, inducing, vartheta, &id, &opts)?;
    let base = warp_log_prior(&WarpFunction::identity_for(&segment.t), vartheta, &segment.t)?;
    Ok((res.aux, res.objective - base))
}
