//! Global HDP factors: Beta stick posteriors q(v) and Dirichlet transition
//! posteriors q(π).
//!
//! Transition rows run over j = 0..K (row 0 holds the initial-state
//! distribution) and columns over k = 1..K+1, the last column being the
//! aggregate mass of all inactive clusters.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::optim::{self, AscentOptions};
use crate::serde_mat;

pub const LAMBDA_BOUNDS: (f64, f64) = (1e-4, 1.0 - 1e-4);
pub const ETA_BOUNDS: (f64, f64) = (1e-2, 1e4);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HDPConfig {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for HDPConfig {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            alpha: 20.0,
        }
    }
}

impl HDPConfig {
    pub fn new(gamma: f64, alpha: f64) -> Result<Self> {
        let c = Self { gamma, alpha };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite() && self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "HDP concentrations must be positive, got gamma = {}, alpha = {}",
                self.gamma, self.alpha
            )));
        }
        Ok(())
    }
}

/// q(v_k) = Beta(λ_k η_k, (1 − λ_k) η_k).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StickPosterior {
    pub lambda: Vec<f64>,
    pub eta: Vec<f64>,
}

impl StickPosterior {
    pub fn new(lambda: Vec<f64>, eta: Vec<f64>) -> Result<Self> {
        let s = Self { lambda, eta };
        s.validate()?;
        Ok(s)
    }

    /// K sticks at the prior mean 1/(1+γ) with η = 1 + γ.
    pub fn prior(config: &HDPConfig, k: usize) -> Self {
        Self {
            lambda: vec![1.0 / (1.0 + config.gamma); k],
            eta: vec![1.0 + config.gamma; k],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.len() != self.eta.len() {
            return Err(Error::Dimension(format!(
                "{} stick means but {} concentrations",
                self.lambda.len(),
                self.eta.len()
            )));
        }
        if self.lambda.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(Error::InvalidArgument("stick means must lie in (0, 1)".into()));
        }
        if self.eta.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidArgument("stick concentrations must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    fn beta_params(&self, k: usize) -> (f64, f64) {
        (self.lambda[k] * self.eta[k], (1.0 - self.lambda[k]) * self.eta[k])
    }

    /// Append a fresh stick at the prior mean.
    pub fn push_prior(&mut self, config: &HDPConfig) {
        self.lambda.push(1.0 / (1.0 + config.gamma));
        self.eta.push(1.0 + config.gamma);
    }
}

/// Dirichlet parameters κ, shape (K+1) × (K+1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionPosterior {
    #[serde(with = "serde_mat::matrix")]
    pub kappa: DMatrix<f64>,
}

impl TransitionPosterior {
    pub fn num_active(&self) -> usize {
        self.kappa.ncols() - 1
    }
}

/// E[β_k] = λ_k Π_{j<k}(1 − λ_j); the remainder is the complement of the
/// active mass so the K+1 entries sum to one.
pub fn expected_beta(sticks: &StickPosterior) -> Vec<f64> {
    let mut out = Vec::with_capacity(sticks.len() + 1);
    let mut rest = 1.0;
    for l in &sticks.lambda {
        out.push(l * rest);
        rest *= 1.0 - l;
    }
    // the complement, not `rest`, so the entries sum to one
    let active: f64 = out.iter().sum();
    out.push((1.0 - active).max(0.0));
    out
}

/// κ_jk = α E[β_k] + N_jk. `counts` is (K+1) × (K+1) with a zero last column.
pub fn update_transition_posterior(
    config: &HDPConfig,
    sticks: &StickPosterior,
    counts: &DMatrix<f64>,
) -> Result<TransitionPosterior> {
    let k = sticks.len();
    if counts.nrows() != k + 1 || counts.ncols() != k + 1 {
        return Err(Error::Dimension(format!(
            "transition counts must be {0}x{0}, got {1}x{2}",
            k + 1,
            counts.nrows(),
            counts.ncols()
        )));
    }
    if counts.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "transition counts must be finite and non-negative".into(),
        ));
    }
    if counts.column(k).iter().any(|v| *v != 0.0) {
        return Err(Error::InvalidArgument("inactive column must carry no counts".into()));
    }
    let eb = expected_beta(sticks);
    let kappa = DMatrix::from_fn(k + 1, k + 1, |j, c| config.alpha * eb[c] + counts[(j, c)]);
    Ok(TransitionPosterior { kappa })
}

/// E[log π_jk] = ψ(κ_jk) − ψ(Σ_k κ_jk).
pub fn expected_log_pi(trans: &TransitionPosterior) -> DMatrix<f64> {
    let kap = &trans.kappa;
    let mut out = DMatrix::zeros(kap.nrows(), kap.ncols());
    for j in 0..kap.nrows() {
        let total = digamma(kap.row(j).sum());
        for c in 0..kap.ncols() {
            out[(j, c)] = digamma(kap[(j, c)]) - total;
        }
    }
    out
}

fn beta_entropy(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b)
        + (a + b - 2.0) * digamma(a + b)
}

fn dirichlet_entropy(row: &[f64]) -> f64 {
    let total: f64 = row.iter().sum();
    let ln_b: f64 = row.iter().map(|c| ln_gamma(*c)).sum::<f64>() - ln_gamma(total);
    ln_b + (total - row.len() as f64) * digamma(total) - row.iter().map(|c| (c - 1.0) * digamma(*c)).sum::<f64>()
}

/// E_q[log p(π | v, α)] with the plug-in normalizer
/// log Γ(α) − Σ_k log Γ(α E[β_k]).
pub fn expected_log_p_pi(config: &HDPConfig, sticks: &StickPosterior, elog_pi: &DMatrix<f64>) -> f64 {
    let eb = expected_beta(sticks);
    let a = config.alpha;
    let norm = ln_gamma(a) - eb.iter().map(|b| ln_gamma(a * b)).sum::<f64>();
    (0..elog_pi.nrows())
        .map(|j| norm + (0..eb.len()).map(|c| (a * eb[c] - 1.0) * elog_pi[(j, c)]).sum::<f64>())
        .sum()
}

/// E_q[log p(v | γ)] − E_q[log q(v)].
pub fn stick_prior_minus_entropy(config: &HDPConfig, sticks: &StickPosterior) -> f64 {
    (0..sticks.len())
        .map(|k| {
            let (a, b) = sticks.beta_params(k);
            let elog_1mv = digamma(b) - digamma(a + b);
            config.gamma.ln() + (config.gamma - 1.0) * elog_1mv + beta_entropy(a, b)
        })
        .sum()
}

/// The v-dependent part of the HDP bound.
pub fn stick_objective(config: &HDPConfig, trans: &TransitionPosterior, sticks: &StickPosterior) -> f64 {
    let elp = expected_log_pi(trans);
    expected_log_p_pi(config, sticks, &elp) + stick_prior_minus_entropy(config, sticks)
}

/// L_HDP = E log p(S|π) + E log p(π|v) − E log q(π) + E log p(v|γ) − E log q(v).
pub fn hdp_elbo(
    config: &HDPConfig,
    sticks: &StickPosterior,
    trans: &TransitionPosterior,
    counts: &DMatrix<f64>,
) -> f64 {
    let elp = expected_log_pi(trans);
    let e_log_s = counts.component_mul(&elp).sum();
    let h_pi: f64 = (0..trans.kappa.nrows())
        .map(|j| dirichlet_entropy(trans.kappa.row(j).iter().copied().collect::<Vec<_>>().as_slice()))
        .sum();
    e_log_s + expected_log_p_pi(config, sticks, &elp) + h_pi + stick_prior_minus_entropy(config, sticks)
}

#[derive(Clone, Debug)]
pub struct StickFit {
    pub sticks: StickPosterior,
    pub objective: f64,
    pub initial_objective: f64,
    pub converged: bool,
}

/// Per-stick bounded ascent over (λ_k, η_k), cycling over the sticks.
/// Never returns a posterior with a lower objective than `current`.
pub fn optimize_sticks(config: &HDPConfig, trans: &TransitionPosterior, current: &StickPosterior) -> Result<StickFit> {
    current.validate()?;
    if trans.num_active() != current.len() {
        return Err(Error::Dimension(format!(
            "{} sticks for {} active transition columns",
            current.len(),
            trans.num_active()
        )));
    }
    let elp = expected_log_pi(trans);
    let objective = |s: &StickPosterior| expected_log_p_pi(config, s, &elp) + stick_prior_minus_entropy(config, s);
    let initial = objective(current);
    let mut best = current.clone();
    let mut best_val = initial;
    let mut converged = false;
    let opts = AscentOptions {
        max_iters: 100,
        rel_tol: 1e-12,
        grad_tol: 1e-10,
        lower: Some(vec![LAMBDA_BOUNDS.0, ETA_BOUNDS.0.ln()]),
        upper: Some(vec![LAMBDA_BOUNDS.1, ETA_BOUNDS.1.ln()]),
        max_step: 0.5,
        ..Default::default()
    };
    for _sweep in 0..20 {
        let before = best_val;
        for k in 0..best.len() {
            let mut trial = best.clone();
            let mut f = |x: &[f64]| {
                trial.lambda[k] = x[0];
                trial.eta[k] = x[1].exp();
                objective(&trial)
            };
            let x0 = [
                best.lambda[k].clamp(LAMBDA_BOUNDS.0, LAMBDA_BOUNDS.1),
                best.eta[k].clamp(ETA_BOUNDS.0, ETA_BOUNDS.1).ln(),
            ];
            let res = optim::maximize(
                |x| {
                    let v = f(x);
                    let g = optim::numeric_gradient(&mut f, x, 1e-7);
                    (v, g)
                },
                &x0,
                &opts,
            );
            if res.value > best_val {
                best.lambda[k] = res.x[0];
                best.eta[k] = res.x[1].exp();
                best_val = objective(&best);
            }
        }
        if best_val - before <= 1e-10 * best_val.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("stick optimization stopped at the sweep cap");
    }
    Ok(StickFit {
        sticks: best,
        objective: best_val,
        initial_objective: initial,
        converged,
    })
}
