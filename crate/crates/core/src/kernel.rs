//! Covariance functions and marginal-likelihood hyperparameter fitting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Factor, LN_2PI};
use crate::optim::{self, AscentOptions};

/// A stationary covariance function on the real line.
///
/// Only the squared exponential is implemented; the GP and warp code are
/// written against this trait so other families can be dropped in.
pub trait Covariance {
    /// Noise-free covariance k(a, b).
    fn k(&self, a: f64, b: f64) -> f64;
    /// ∂k(a, b)/∂a.
    fn dk_da(&self, a: f64, b: f64) -> f64;
    fn signal_variance(&self) -> f64;
    fn noise_variance(&self) -> f64;
}

/// Squared-exponential kernel parameters (σ_f, l, σ_n).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma_f: f64,
    pub length_scale: f64,
    pub sigma_n: f64,
}

impl KernelParams {
    pub fn new(sigma_f: f64, length_scale: f64, sigma_n: f64) -> Result<Self> {
        let p = Self {
            sigma_f,
            length_scale,
            sigma_n,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_f", self.sigma_f),
            ("length_scale", self.length_scale),
            ("sigma_n", self.sigma_n),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidKernel(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    fn to_log(self) -> [f64; 3] {
        [self.sigma_f.ln(), self.length_scale.ln(), self.sigma_n.ln()]
    }

    fn from_log(x: &[f64]) -> Self {
        Self {
            sigma_f: x[0].exp(),
            length_scale: x[1].exp(),
            sigma_n: x[2].exp(),
        }
    }
}

impl Covariance for KernelParams {
    fn k(&self, a: f64, b: f64) -> f64 {
        let d = (a - b) / self.length_scale;
        self.sigma_f * self.sigma_f * (-0.5 * d * d).exp()
    }

    fn dk_da(&self, a: f64, b: f64) -> f64 {
        let l2 = self.length_scale * self.length_scale;
        -(a - b) / l2 * self.k(a, b)
    }

    fn signal_variance(&self) -> f64 {
        self.sigma_f * self.sigma_f
    }

    fn noise_variance(&self) -> f64 {
        self.sigma_n * self.sigma_n
    }
}

/// Covariance matrix between two input vectors.
///
/// With `include_noise`, σ_n² is added on the diagonal only when `t1` and `t2`
/// hold the same content (the δ term is index identity, not approximate
/// equality of time stamps).
pub fn sqexp_cov(t1: &[f64], t2: &[f64], params: &KernelParams, include_noise: bool) -> Result<DMatrix<f64>> {
    params.validate()?;
    cov_matrix(params, t1, t2, include_noise)
}

pub fn cov_matrix<C: Covariance>(kernel: &C, t1: &[f64], t2: &[f64], include_noise: bool) -> Result<DMatrix<f64>> {
    if t1.is_empty() || t2.is_empty() {
        return Err(Error::InvalidArgument("covariance inputs must be non-empty".into()));
    }
    if t1.iter().chain(t2).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("covariance inputs must be finite".into()));
    }
    let mut m = DMatrix::from_fn(t1.len(), t2.len(), |i, j| kernel.k(t1[i], t2[j]));
    if include_noise && t1 == t2 {
        let s2 = kernel.noise_variance();
        for i in 0..t1.len() {
            m[(i, i)] += s2;
        }
    }
    Ok(m)
}

/// Noise-free covariance of a vector with itself, factorized with jitter.
pub fn factor_prior(params: &KernelParams, t: &[f64], include_noise: bool) -> Result<Factor> {
    let k = cov_matrix(params, t, t, include_noise)?;
    linalg::robust_cholesky(&k, params.signal_variance(), "kernel matrix")
}

/// log N(y | 0, K_tt + σ_n² I).
pub fn log_marginal_likelihood(t: &[f64], y: &[f64], params: &KernelParams) -> Result<f64> {
    Ok(lml_and_grad(t, y, params)?.0)
}

/// Log marginal likelihood and its gradient with respect to
/// (log σ_f, log l, log σ_n).
pub fn lml_and_grad(t: &[f64], y: &[f64], params: &KernelParams) -> Result<(f64, [f64; 3])> {
    params.validate()?;
    if t.len() != y.len() {
        return Err(Error::Dimension(format!("|t| = {} but |y| = {}", t.len(), y.len())));
    }
    let q = t.len();
    let ky = cov_matrix(params, t, t, true)?;
    let fac = linalg::robust_cholesky(&ky, params.signal_variance(), "marginal likelihood")?;
    let yv = DVector::from_column_slice(y);
    let alpha = fac.solve_vec(&yv);
    let lml = -0.5 * (yv.dot(&alpha) + fac.log_det() + q as f64 * LN_2PI);

    // W = α αᵀ − K⁻¹ ; ∂L/∂θ = ½ tr(W ∂K/∂θ)
    let w = &alpha * alpha.transpose() - fac.inverse();
    let sf2 = params.signal_variance();
    let l2 = params.length_scale * params.length_scale;
    let mut g = [0.0; 3];
    for i in 0..q {
        for j in 0..q {
            let d2 = (t[i] - t[j]).powi(2);
            let e = (-0.5 * d2 / l2).exp();
            g[0] += w[(i, j)] * 2.0 * sf2 * e;
            g[1] += w[(i, j)] * sf2 * e * d2 / l2;
        }
        g[2] += w[(i, i)] * 2.0 * params.noise_variance();
    }
    for gi in g.iter_mut() {
        *gi *= 0.5;
    }
    Ok((lml, g))
}

/// Box bounds on kernel hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HyperBounds {
    pub lower: KernelParams,
    pub upper: KernelParams,
}

impl Default for HyperBounds {
    fn default() -> Self {
        Self {
            lower: KernelParams {
                sigma_f: 1e-3,
                length_scale: 1e-2,
                sigma_n: 1e-4,
            },
            upper: KernelParams {
                sigma_f: 1e5,
                length_scale: 1e5,
                sigma_n: 1e5,
            },
        }
    }
}

impl HyperBounds {
    pub fn contains(&self, p: &KernelParams) -> bool {
        let lo = self.lower.to_log();
        let hi = self.upper.to_log();
        p.to_log()
            .iter()
            .zip(lo.iter().zip(&hi))
            .all(|(v, (l, h))| *v >= *l - 1e-12 && *v <= *h + 1e-12)
    }
}

#[derive(Clone, Debug)]
pub struct HyperFit {
    pub params: KernelParams,
    pub log_likelihood: f64,
    pub initial_log_likelihood: f64,
    pub iterations: usize,
    /// False when the optimizer hit its iteration cap; `params` is then the
    /// best point found so far.
    pub converged: bool,
}

/// Maximize the marginal likelihood over log-parameters within `bounds`.
pub fn fit_hyperparams(t: &[f64], y: &[f64], init: &KernelParams, bounds: &HyperBounds) -> Result<HyperFit> {
    init.validate()?;
    if !bounds.contains(init) {
        return Err(Error::InvalidArgument(format!(
            "initial hyperparameters {init:?} lie outside the bounds"
        )));
    }
    // fail early on bad inputs rather than inside the optimizer
    let initial = log_marginal_likelihood(t, y, init)?;

    let opts = AscentOptions {
        max_iters: 200,
        rel_tol: 1e-10,
        grad_tol: 1e-7,
        lower: Some(bounds.lower.to_log().to_vec()),
        upper: Some(bounds.upper.to_log().to_vec()),
        max_step: 2.0,
        ..Default::default()
    };
    let res = optim::maximize(
        |x| match lml_and_grad(t, y, &KernelParams::from_log(x)) {
            Ok((v, g)) => (v, g.to_vec()),
            Err(_) => (f64::NEG_INFINITY, vec![0.0; 3]),
        },
        &init.to_log(),
        &opts,
    );
    if !res.converged {
        log::warn!(
            "hyperparameter fit stopped after {} iterations without converging",
            res.iterations
        );
    }
    Ok(HyperFit {
        params: KernelParams::from_log(&res.x),
        log_likelihood: res.value,
        initial_log_likelihood: initial,
        iterations: res.iterations,
        converged: res.converged,
    })
}
