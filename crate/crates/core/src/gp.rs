//! Gaussian-process conditioning and the inducing-point projection.
//!
//! Every `K⁻¹` is applied as a Cholesky solve. Latent covariances are
//! noise-free; σ_n² only enters on the self-covariance of an observed vector.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cov_matrix, Covariance, KernelParams};
use crate::linalg::{self, Factor};
use crate::serde_mat;

/// Finite representation of a GP at a set of support points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GPBelief {
    #[serde(with = "serde_mat::vector")]
    pub mean: DVector<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub cov: DMatrix<f64>,
    pub support: Vec<f64>,
    pub kernel: KernelParams,
}

impl GPBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, support: Vec<f64>, kernel: KernelParams) -> Result<Self> {
        if mean.len() != support.len() || cov.nrows() != support.len() || cov.ncols() != support.len() {
            return Err(Error::Dimension(format!(
                "belief with {} support points has mean {} and cov {}x{}",
                support.len(),
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self {
            mean,
            cov: linalg::symmetrize(&cov),
            support,
            kernel,
        })
    }

    /// The zero-mean prior K_tt at the given support.
    pub fn prior(kernel: KernelParams, support: Vec<f64>) -> Result<Self> {
        let cov = cov_matrix(&kernel, &support, &support, false)?;
        Self::new(DVector::zeros(support.len()), cov, support, kernel)
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    /// Marginal standard deviation at each support point.
    pub fn std_dev(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.cov[(i, i)].max(0.0).sqrt()).collect()
    }
}

/// Predictive distribution of the latent function at `t_test` given noisy
/// observations `(t_train, y_train)`.
pub fn gp_condition(prior_kernel: &KernelParams, t_train: &[f64], y_train: &[f64], t_test: &[f64]) -> Result<GPBelief> {
    prior_kernel.validate()?;
    if t_train.len() != y_train.len() {
        return Err(Error::Dimension(format!(
            "|t_train| = {} but |y_train| = {}",
            t_train.len(),
            y_train.len()
        )));
    }
    let k_ss = cov_matrix(prior_kernel, t_test, t_test, false)?;
    if t_train.is_empty() {
        return GPBelief::new(DVector::zeros(t_test.len()), k_ss, t_test.to_vec(), *prior_kernel);
    }
    let k_tt = cov_matrix(prior_kernel, t_train, t_train, true)?;
    let fac = linalg::robust_cholesky(&k_tt, prior_kernel.signal_variance(), "gp_condition")?;
    let k_ts = cov_matrix(prior_kernel, t_train, t_test, false)?;
    let y = DVector::from_column_slice(y_train);
    let mean = k_ts.transpose() * fac.solve_vec(&y);
    let cov = &k_ss - k_ts.transpose() * fac.solve(&k_ts);
    GPBelief::new(mean, cov, t_test.to_vec(), *prior_kernel)
}

/// Fixed inducing locations with a cached factor of K_{t^p,t^p}.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "InducingSpec", into = "InducingSpec")]
pub struct InducingSet {
    pub locations: Vec<f64>,
    pub kernel: KernelParams,
    factor: Factor,
}

#[derive(Serialize, Deserialize)]
struct InducingSpec {
    locations: Vec<f64>,
    kernel: KernelParams,
}

impl TryFrom<InducingSpec> for InducingSet {
    type Error = Error;
    fn try_from(s: InducingSpec) -> Result<Self> {
        InducingSet::new(s.locations, s.kernel)
    }
}

impl From<InducingSet> for InducingSpec {
    fn from(s: InducingSet) -> Self {
        Self {
            locations: s.locations,
            kernel: s.kernel,
        }
    }
}

impl InducingSet {
    pub fn new(locations: Vec<f64>, kernel: KernelParams) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::InvalidArgument("inducing set must be non-empty".into()));
        }
        if locations.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(
                "inducing locations must be strictly increasing".into(),
            ));
        }
        // the observation noise regularizes the projector K_{g,p} K_{p,p}^{-1}
        let k = cov_matrix(&kernel, &locations, &locations, true)?;
        let factor = linalg::robust_cholesky(&k, kernel.signal_variance(), "inducing covariance")?;
        Ok(Self {
            locations,
            kernel,
            factor,
        })
    }

    /// `p` points evenly spaced over `[start, end]`.
    pub fn uniform(start: f64, end: f64, p: usize, kernel: KernelParams) -> Result<Self> {
        if p == 0 || !(end >= start) {
            return Err(Error::InvalidArgument(format!(
                "bad inducing grid [{start}, {end}] with p = {p}"
            )));
        }
        let locations = if p == 1 {
            vec![0.5 * (start + end)]
        } else {
            (0..p)
                .map(|i| start + (end - start) * i as f64 / (p - 1) as f64)
                .collect()
        };
        Self::new(locations, kernel)
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }

    /// K_{t^p,t^p} + σ_n²I.
    pub fn prior_cov(&self) -> DMatrix<f64> {
        cov_matrix(&self.kernel, &self.locations, &self.locations, true).expect("validated locations")
    }

    pub fn span(&self) -> (f64, f64) {
        (self.locations[0], *self.locations.last().unwrap())
    }
}

/// Projector K̂ = K_{w,s} K_{s,s}⁻¹ from support points `s` onto query points
/// `w`, together with the conditional covariance
/// R = K_{w,w} + σ_n² I − K̂ K_{s,w}.
#[derive(Clone, Debug)]
pub struct Projection {
    pub khat: DMatrix<f64>,
    pub resid: DMatrix<f64>,
}

impl Projection {
    pub fn new(kernel: &KernelParams, support: &[f64], support_factor: &Factor, query: &[f64]) -> Result<Self> {
        let k_ws = cov_matrix(kernel, query, support, false)?;
        let khat = support_factor.solve(&k_ws.transpose()).transpose();
        let k_ww = cov_matrix(kernel, query, query, true)?;
        let resid = linalg::symmetrize(&(k_ww - &khat * k_ws.transpose()));
        Ok(Self { khat, resid })
    }

    pub fn onto(inducing: &InducingSet, query: &[f64]) -> Result<Self> {
        Self::new(&inducing.kernel, &inducing.locations, inducing.factor(), query)
    }

    /// Marginal of a belief over the support pushed through the projection:
    /// mean K̂μ, covariance R + K̂ Σ K̂ᵀ.
    pub fn push(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let m = &self.khat * mean;
        let c = &self.resid + &self.khat * cov * self.khat.transpose();
        (m, linalg::symmetrize(&c))
    }
}

fn factor_support(belief: &GPBelief) -> Result<Factor> {
    let k = cov_matrix(&belief.kernel, &belief.support, &belief.support, false)?;
    linalg::robust_cholesky(&k, belief.kernel.signal_variance(), "belief support covariance")
}

/// Project a belief held at q points onto an inducing set.
///
/// The inducing values are predicted from the q-point belief with the
/// conditional-mean map K_{p,t}K_{t,t}⁻¹, carrying the belief covariance
/// through the same map plus the prior conditional variance.
pub fn project_to_inducing(belief_at_q: &GPBelief, inducing: &InducingSet) -> Result<GPBelief> {
    let (lo, hi) = (
        belief_at_q.support.first().copied().unwrap_or(0.0),
        belief_at_q.support.last().copied().unwrap_or(0.0),
    );
    let (plo, phi) = inducing.span();
    if plo < lo || phi > hi {
        log::debug!("inducing span [{plo}, {phi}] extrapolates beyond support [{lo}, {hi}]");
    }
    let support_factor = factor_support(belief_at_q)?;
    let k_ps = cov_matrix(&belief_at_q.kernel, &inducing.locations, &belief_at_q.support, false)?;
    let proj = support_factor.solve(&k_ps.transpose()).transpose();
    let k_pp = cov_matrix(&belief_at_q.kernel, &inducing.locations, &inducing.locations, false)?;
    let mean = &proj * &belief_at_q.mean;
    let cov = k_pp - &proj * k_ps.transpose() + &proj * &belief_at_q.cov * proj.transpose();
    GPBelief::new(mean, cov, inducing.locations.clone(), belief_at_q.kernel)
}

/// Marginal of the observation process at warped locations given a belief
/// over the pseudo-observations at their support.
///
/// mean = K_{w,t}K_{t,t}⁻¹E[x],
/// cov  = K_{w,w} − K_{w,t}K_{t,t}⁻¹K_{t,w} + K_{w,t}K_{t,t}⁻¹cov(x)K_{t,t}⁻¹K_{t,w},
/// with σ_n² on the diagonal of K_{w,w}.
pub fn predict_at_warp(x_belief: &GPBelief, t_warped: &[f64]) -> Result<GPBelief> {
    let fac = factor_support(x_belief)?;
    let proj = Projection::new(&x_belief.kernel, &x_belief.support, &fac, t_warped)?;
    let (mean, cov) = proj.push(&x_belief.mean, &x_belief.cov);
    GPBelief::new(mean, cov, t_warped.to_vec(), x_belief.kernel)
}
