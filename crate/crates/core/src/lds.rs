//! Linear dynamical system pieces: MNIW posteriors over (A, Σ_ω) and
//! (C, Σ_ε), responsibility-weighted Kalman filtering and RTS smoothing.
//!
//! A chain is f_0 ~ N(m_0, P_0), f_n = A f_{n-1} + ω, x_n = C f_n + ε and
//! y_n = K̂_n x_n + e with e ~ N(0, R_n). The pseudo-observations x are
//! integrated out inside the filter.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::linalg::{self, Factor, LN_2PI};
use crate::serde_mat;

/// Responsibilities below this skip the measurement update entirely.
pub const R_SKIP: f64 = 1e-12;

/// Matrix-normal inverse-Wishart: A | Σ ~ MN(M, Σ, V⁻¹), Σ ~ IW(S, dof).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MNIWPosterior {
    #[serde(with = "serde_mat::matrix")]
    pub m: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub v: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub s: DMatrix<f64>,
    pub dof: f64,
}

impl MNIWPosterior {
    pub fn new(m: DMatrix<f64>, v: DMatrix<f64>, s: DMatrix<f64>, dof: f64) -> Result<Self> {
        let p = Self { m, v, s, dof };
        p.validate()?;
        Ok(p)
    }

    pub fn out_dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.m.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, k) = (self.out_dim(), self.in_dim());
        if self.v.shape() != (k, k) || self.s.shape() != (d, d) {
            return Err(Error::Dimension(format!(
                "MNIW with M {}x{} needs V {k}x{k} and S {d}x{d}, got {:?} and {:?}",
                d,
                k,
                self.v.shape(),
                self.s.shape()
            )));
        }
        if !(self.dof > d as f64 - 1.0) {
            return Err(Error::InvalidArgument(format!(
                "MNIW degrees of freedom {} must exceed dimension - 1 = {}",
                self.dof,
                d as f64 - 1.0
            )));
        }
        linalg::cholesky_auto(&self.v, "MNIW column matrix")?;
        linalg::cholesky_auto(&self.s, "MNIW scale matrix")?;
        Ok(())
    }

    fn v_factor(&self) -> Result<Factor> {
        linalg::cholesky_auto(&self.v, "MNIW column matrix")
    }

    fn s_factor(&self) -> Result<Factor> {
        linalg::cholesky_auto(&self.s, "MNIW scale matrix")
    }

    /// E[Σ⁻¹] = dof·S⁻¹.
    pub fn expected_precision(&self) -> Result<DMatrix<f64>> {
        Ok(self.s_factor()?.inverse() * self.dof)
    }

    /// E[log |Σ|] = log|S| − d log 2 − Σ_i ψ((dof − i + 1)/2).
    pub fn expected_log_det(&self) -> Result<f64> {
        let d = self.out_dim();
        let psi: f64 = (1..=d).map(|i| digamma((self.dof - i as f64 + 1.0) / 2.0)).sum();
        Ok(self.s_factor()?.log_det() - d as f64 * 2f64.ln() - psi)
    }

    /// Noise covariance plugged into the filter under a convention, plus the
    /// quadratic penalty d·V⁻¹ on the regressor when the convention is exact VB.
    pub fn plug_in(&self, conv: NoiseConvention) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
        let d = self.out_dim() as f64;
        match conv {
            NoiseConvention::Literal => Ok((self.s.clone(), None)),
            NoiseConvention::InverseWishartMean => {
                let denom = self.dof - d - 1.0;
                if denom <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "inverse-Wishart mean needs dof > d + 1, got dof = {}, d = {d}",
                        self.dof
                    )));
                }
                Ok((&self.s / denom, None))
            }
            NoiseConvention::ExpectedPrecision => {
                let pen = self.v_factor()?.inverse() * d;
                Ok((&self.s / self.dof, Some(linalg::symmetrize(&pen))))
            }
        }
    }
}

/// How the MNIW noise posterior enters the filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NoiseConvention {
    /// Use S̃ directly.
    Literal,
    /// Use the inverse-Wishart mean S̃/(dof − d − 1).
    InverseWishartMean,
    /// Use (E[Σ⁻¹])⁻¹ = S̃/dof together with the matrix-uncertainty penalty;
    /// this is the exact mean-field update.
    #[default]
    ExpectedPrecision,
}

/// How a responsibility r down-weights an observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Weighting {
    /// Φ = (C P Cᵀ + S_ε)/r inside the innovation covariance R + K̂ΦK̂ᵀ.
    ScaledInnovation,
    /// Likelihood raised to the power r: innovation K̂C P CᵀK̂ᵀ + K̂S_εK̂ᵀ + R/r.
    #[default]
    Likelihood,
}

/// Sufficient statistics of a regression of targets on regressors.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionStats {
    /// Σ E[x xᵀ] over regressors.
    pub sxx: DMatrix<f64>,
    /// Σ E[y xᵀ].
    pub syx: DMatrix<f64>,
    /// Σ E[y yᵀ].
    pub syy: DMatrix<f64>,
    pub count: f64,
}

impl RegressionStats {
    pub fn zeros(d_out: usize, d_in: usize) -> Self {
        Self {
            sxx: DMatrix::zeros(d_in, d_in),
            syx: DMatrix::zeros(d_out, d_in),
            syy: DMatrix::zeros(d_out, d_out),
            count: 0.0,
        }
    }
}

/// Conjugate update: Ψ_xx = S_xx + V, Ψ_yx = S_yx + MV, Ψ_yy = S_yy + MVMᵀ;
/// M̃ = Ψ_yxΨ_xx⁻¹, Ṽ = Ψ_xx, S̃ = Ψ_yy − Ψ_yxΨ_xx⁻¹Ψ_yxᵀ + S, dof̃ = N + dof.
pub fn mniw_update(prior: &MNIWPosterior, stats: &RegressionStats, n: f64) -> Result<MNIWPosterior> {
    let (d, k) = (prior.out_dim(), prior.in_dim());
    if stats.sxx.shape() != (k, k) || stats.syx.shape() != (d, k) || stats.syy.shape() != (d, d) {
        return Err(Error::Dimension(
            "regression statistics do not match the MNIW prior".into(),
        ));
    }
    if !(n >= 0.0) {
        return Err(Error::InvalidArgument(format!("effective count must be >= 0, got {n}")));
    }
    let mv = &prior.m * &prior.v;
    let psi_xx = linalg::symmetrize(&(&stats.sxx + &prior.v));
    let psi_yx = &stats.syx + &mv;
    let psi_yy = &stats.syy + &mv * prior.m.transpose();
    let fac = linalg::cholesky_auto(&psi_xx, "MNIW Psi_xx")?;
    let m = fac.solve(&psi_yx.transpose()).transpose();
    let cond = &psi_yy - &m * psi_yx.transpose();
    let s = linalg::symmetrize(&(cond + &prior.s));
    Ok(MNIWPosterior {
        m,
        v: psi_xx,
        s,
        dof: n + prior.dof,
    })
}

fn ln_mv_gamma(d: usize, a: f64) -> f64 {
    let pi_term = d as f64 * (d as f64 - 1.0) / 4.0 * std::f64::consts::PI.ln();
    pi_term + (1..=d).map(|i| ln_gamma(a + (1.0 - i as f64) / 2.0)).sum::<f64>()
}

/// KL(q ‖ p) between two MNIW distributions of equal shape.
pub fn mniw_kl(q: &MNIWPosterior, p: &MNIWPosterior) -> Result<f64> {
    let (d, k) = (q.out_dim() as f64, q.in_dim() as f64);
    let sq = q.s_factor()?;
    let sp = p.s_factor()?;
    let vq = q.v_factor()?;
    let vp = p.v_factor()?;
    // inverse-Wishart part, written through the Wishart on the precision
    let tr = linalg::trace_solve(&sq, &p.s);
    let kl_iw =
        -0.5 * p.dof * (sp.log_det() - sq.log_det()) + 0.5 * q.dof * (tr - d) + ln_mv_gamma(q.out_dim(), p.dof / 2.0)
            - ln_mv_gamma(q.out_dim(), q.dof / 2.0)
            + 0.5
                * (q.dof - p.dof)
                * (1..=q.out_dim())
                    .map(|i| digamma((q.dof - i as f64 + 1.0) / 2.0))
                    .sum::<f64>();
    // matrix-normal part averaged over q(Σ)
    let delta = &q.m - &p.m;
    let e_prec = sq.inverse() * q.dof;
    let maha = (&e_prec * &delta * &p.v * delta.transpose()).trace();
    let kl_mn = 0.5 * (d * linalg::trace_solve(&vq, &p.v) + maha - d * k + d * (vq.log_det() - vp.log_det()));
    Ok(kl_iw + kl_mn)
}

/// E_q[log N(y; A x, Σ)] summed over the statistics, with A, Σ under q.
pub fn expected_regression_loglik(q: &MNIWPosterior, stats: &RegressionStats) -> Result<f64> {
    let d = q.out_dim() as f64;
    let e_prec = q.expected_precision()?;
    let m = &q.m;
    let resid = &stats.syy - m * stats.syx.transpose() - &stats.syx * m.transpose() + m * &stats.sxx * m.transpose();
    let vinv_tr = linalg::trace_solve(&q.v_factor()?, &stats.sxx);
    Ok(-0.5 * (stats.count * (d * LN_2PI + q.expected_log_det()?) + (e_prec * resid).trace() + d * vinv_tr))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    #[serde(with = "serde_mat::vector")]
    pub mean: DVector<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self {
            mean,
            cov: linalg::symmetrize(&cov),
        }
    }

    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.cov + &self.mean * self.mean.transpose()
    }
}

/// The (plug-in) parameters a chain is filtered with.
#[derive(Clone, Debug)]
pub struct ChainModel {
    pub init: Gaussian,
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub s_eps: DMatrix<f64>,
    /// Quadratic penalty on each regressor state f_{n-1}.
    pub pen_a: Option<DMatrix<f64>>,
    /// Quadratic penalty on each emitting state f_n.
    pub pen_c: Option<DMatrix<f64>>,
    pub weighting: Weighting,
}

impl ChainModel {
    pub fn from_posteriors(
        init: Gaussian,
        dynamics: &MNIWPosterior,
        emission: &MNIWPosterior,
        noise: NoiseConvention,
        weighting: Weighting,
    ) -> Result<Self> {
        let (q, pen_a) = dynamics.plug_in(noise)?;
        let (s_eps, pen_c) = emission.plug_in(noise)?;
        Ok(Self {
            init,
            a: dynamics.m.clone(),
            q,
            c: emission.m.clone(),
            s_eps,
            pen_a,
            pen_c,
            weighting,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

/// One segment's view of a chain step: y ≈ K̂ x with residual covariance R,
/// down-weighted by r.
#[derive(Clone, Debug)]
pub struct StepObs {
    pub khat: DMatrix<f64>,
    pub resid: DMatrix<f64>,
    pub y: DVector<f64>,
    pub r: f64,
}

/// Φ = (C P Cᵀ + S_ε) ⊘ r.
pub fn innovation_phi(c: &DMatrix<f64>, p: &DMatrix<f64>, s_eps: &DMatrix<f64>, r: f64) -> DMatrix<f64> {
    (c * p * c.transpose() + s_eps) / r
}

/// Multiply a Gaussian belief by exp(−½ fᵀΠf) and renormalize.
pub fn apply_penalty(g: &Gaussian, pen: &DMatrix<f64>) -> Result<Gaussian> {
    let n = g.mean.len();
    let s = DMatrix::identity(n, n) + &g.cov * pen;
    let lu = s.lu();
    let mean = lu.solve(&g.mean).ok_or(Error::NotPositiveDefinite {
        context: "penalty update",
        jitter: 0.0,
    })?;
    let cov = lu.solve(&g.cov).ok_or(Error::NotPositiveDefinite {
        context: "penalty update",
        jitter: 0.0,
    })?;
    Ok(Gaussian::new(mean, cov))
}

/// Measurement update of a predicted belief with one weighted observation.
pub fn measurement_update(model: &ChainModel, pred: &Gaussian, obs: &StepObs) -> Result<Gaussian> {
    if obs.r < R_SKIP {
        return Ok(pred.clone());
    }
    let h = &obs.khat * &model.c;
    let innov = match model.weighting {
        Weighting::ScaledInnovation => {
            let phi = innovation_phi(&model.c, &pred.cov, &model.s_eps, obs.r);
            &obs.resid + &obs.khat * phi * obs.khat.transpose()
        }
        Weighting::Likelihood => {
            &h * &pred.cov * h.transpose() + &obs.khat * &model.s_eps * obs.khat.transpose() + &obs.resid / obs.r
        }
    };
    let fac = linalg::cholesky_auto(&innov, "innovation covariance")?;
    let ph = &pred.cov * h.transpose();
    let gain = fac.solve(&ph.transpose()).transpose();
    let mean = &pred.mean + &gain * (&obs.y - &h * &pred.mean);
    let n = pred.mean.len();
    let cov = (DMatrix::identity(n, n) - &gain * &h) * &pred.cov;
    Ok(Gaussian::new(mean, cov))
}

#[derive(Clone, Debug)]
pub struct FilterOutput {
    /// Filtered beliefs of f_0..f_N (including any penalties on them).
    pub filtered: Vec<Gaussian>,
    /// Predicted beliefs of f_1..f_N; `predicted[n-1]` belongs to f_n.
    pub predicted: Vec<Gaussian>,
}

/// Forward pass over N steps; `obs[n-1]` is the observation of f_n.
pub fn kalman_forward(model: &ChainModel, obs: &[Option<StepObs>]) -> Result<FilterOutput> {
    let n_steps = obs.len();
    let mut filtered = Vec::with_capacity(n_steps + 1);
    let mut predicted = Vec::with_capacity(n_steps);
    let mut cur = model.init.clone();
    if n_steps > 0 {
        if let Some(pen) = &model.pen_a {
            cur = apply_penalty(&cur, pen)?;
        }
    }
    filtered.push(cur.clone());
    for (i, o) in obs.iter().enumerate() {
        let pred = Gaussian::new(
            &model.a * &cur.mean,
            &model.a * &cur.cov * model.a.transpose() + &model.q,
        );
        let mut post = pred.clone();
        if let Some(pen) = &model.pen_c {
            post = apply_penalty(&post, pen)?;
        }
        if let Some(o) = o {
            post = measurement_update(model, &post, o)?;
        }
        if i + 1 < n_steps {
            if let Some(pen) = &model.pen_a {
                post = apply_penalty(&post, pen)?;
            }
        }
        predicted.push(pred);
        filtered.push(post.clone());
        cur = post;
    }
    Ok(FilterOutput { filtered, predicted })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainBelief {
    /// Smoothed beliefs of f_0..f_N.
    pub smoothed: Vec<Gaussian>,
    /// Cov(f_n, f_{n-1}) for n = 1..N; `lag_one[n-1]` belongs to step n.
    #[serde(with = "serde_mat::matrix_vec")]
    pub lag_one: Vec<DMatrix<f64>>,
}

impl ChainBelief {
    pub fn len(&self) -> usize {
        self.smoothed.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// E[f_n f_{n-1}ᵀ].
    pub fn cross_moment(&self, n: usize) -> DMatrix<f64> {
        &self.lag_one[n - 1] + &self.smoothed[n].mean * self.smoothed[n - 1].mean.transpose()
    }

    /// Dynamics regression statistics over all transitions.
    pub fn dynamics_stats(&self) -> RegressionStats {
        let d = self.smoothed[0].mean.len();
        let mut st = RegressionStats::zeros(d, d);
        for n in 1..self.smoothed.len() {
            st.sxx += self.smoothed[n - 1].second_moment();
            st.syx += self.cross_moment(n);
            st.syy += self.smoothed[n].second_moment();
            st.count += 1.0;
        }
        st
    }

    /// Entropy of the joint Gaussian chain.
    pub fn entropy(&self) -> Result<f64> {
        let n = self.smoothed.len();
        if n == 1 {
            return gauss_entropy(&self.smoothed[0].cov);
        }
        let d = self.smoothed[0].mean.len();
        let mut h = 0.0;
        for i in 1..n {
            let mut joint = DMatrix::zeros(2 * d, 2 * d);
            joint.view_mut((0, 0), (d, d)).copy_from(&self.smoothed[i].cov);
            joint.view_mut((d, d), (d, d)).copy_from(&self.smoothed[i - 1].cov);
            joint.view_mut((0, d), (d, d)).copy_from(&self.lag_one[i - 1]);
            joint
                .view_mut((d, 0), (d, d))
                .copy_from(&self.lag_one[i - 1].transpose());
            h += gauss_entropy(&joint)?;
            if i + 1 < n {
                h -= gauss_entropy(&self.smoothed[i].cov)?;
            }
        }
        Ok(h)
    }
}

fn gauss_entropy(cov: &DMatrix<f64>) -> Result<f64> {
    let fac = linalg::cholesky_auto(cov, "chain entropy")?;
    Ok(linalg::gaussian_entropy(&fac))
}

/// RTS smoother with J = Σ_f Aᵀ P⁻¹; Cov(f_{n+1}, f_n) = Σ̃_{n+1} Jᵀ.
pub fn kalman_backward(model: &ChainModel, fwd: &FilterOutput) -> Result<ChainBelief> {
    let n_steps = fwd.predicted.len();
    let mut smoothed = fwd.filtered.clone();
    let mut lag_one = vec![DMatrix::zeros(model.dim(), model.dim()); n_steps];
    for n in (0..n_steps).rev() {
        let filt = &fwd.filtered[n];
        let pred = &fwd.predicted[n];
        let pfac = linalg::cholesky_auto(&pred.cov, "predicted covariance")?;
        let j = pfac.solve(&(&model.a * &filt.cov)).transpose();
        let next = smoothed[n + 1].clone();
        let mean = &filt.mean + &j * (&next.mean - &pred.mean);
        let cov = &filt.cov + &j * (&next.cov - &pred.cov) * j.transpose();
        lag_one[n] = &next.cov * j.transpose();
        smoothed[n] = Gaussian::new(mean, cov);
    }
    Ok(ChainBelief { smoothed, lag_one })
}

/// Marginal of the pseudo-observations at a smoothed step:
/// mean C μ̃_f, covariance S_ε + C Σ̃_f Cᵀ.
pub fn emission_marginal(c: &DMatrix<f64>, s_eps: &DMatrix<f64>, f: &Gaussian) -> Gaussian {
    Gaussian::new(c * &f.mean, s_eps + c * &f.cov * c.transpose())
}

/// q(x | f, y) = N(L f + b, Λ) for one weighted step.
#[derive(Clone, Debug)]
pub struct XConditional {
    pub lambda: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl XConditional {
    /// Λ = (S_ε⁻¹ + r K̂ᵀR⁻¹K̂)⁻¹, L = ΛS_ε⁻¹C, b = rΛK̂ᵀR⁻¹y.
    pub fn new(c: &DMatrix<f64>, s_eps: &DMatrix<f64>, obs: Option<&StepObs>) -> Result<Self> {
        let sf = linalg::cholesky_auto(s_eps, "emission noise")?;
        let s_inv = sf.inverse();
        let p = c.nrows();
        let (prec, rhs) = match obs {
            Some(o) if o.r >= R_SKIP => {
                let rf = linalg::cholesky_auto(&o.resid, "observation residual")?;
                let rk = rf.solve(&o.khat);
                let prec = &s_inv + o.khat.transpose() * &rk * o.r;
                let rhs = rk.transpose() * &o.y * o.r;
                (prec, rhs)
            }
            _ => (s_inv.clone(), DVector::zeros(p)),
        };
        let pf = linalg::cholesky_auto(&linalg::symmetrize(&prec), "pseudo-observation precision")?;
        let lambda = linalg::symmetrize(&pf.inverse());
        let l = &lambda * &s_inv * c;
        let b = &lambda * rhs;
        Ok(Self { lambda, l, b })
    }

    pub fn marginal(&self, f: &Gaussian) -> Gaussian {
        Gaussian::new(
            &self.l * &f.mean + &self.b,
            &self.lambda + &self.l * &f.cov * self.l.transpose(),
        )
    }

    /// E[x fᵀ] given the marginal of f.
    pub fn cross(&self, f: &Gaussian) -> DMatrix<f64> {
        &self.l * f.second_moment() + &self.b * f.mean.transpose()
    }

    pub fn entropy(&self) -> Result<f64> {
        gauss_entropy(&self.lambda)
    }
}
