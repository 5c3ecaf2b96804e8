use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdp::HDPConfig;
use crate::kernel::KernelParams;
use crate::lds::{NoiseConvention, Weighting};
use crate::warp::MapWarpOptions;

/// Everything that steers a fit. Unknown JSON fields are rejected so typos
/// in config files surface immediately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub gamma: f64,
    pub alpha: f64,
    /// Scale on the data-driven noise priors S_ω and S_ε.
    pub varrho: f64,
    /// ϱ of the streaming pass that initializes an off-line fit.
    pub init_varrho: f64,
    /// Number of clusters to start from (the first segments seed them).
    pub k_init: usize,
    pub p_inducing: usize,
    /// Pseudo-observations behind the prior means A = C = I.
    pub prior_strength: f64,
    pub max_iters: usize,
    /// Relative ELBO change that ends the outer loop.
    pub elbo_tol: f64,
    /// Relative change of the observation bound that ends an inner loop.
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub seed: u64,
    /// A new cluster must beat the best existing one by this many nats.
    pub birth_margin: f64,
    pub births: bool,
    /// Segments used to calibrate the noise priors in streaming mode.
    pub calibration_segments: usize,
    /// Initial cluster kernel; defaults to (largest data deviation, 1,
    /// √mean diag S_ε).
    pub theta_init: Option<KernelParams>,
    pub fit_theta: bool,
    pub vartheta: KernelParams,
    pub warp_max_iters: usize,
    pub warp_rel_tol: f64,
    /// Pairs with responsibility below this keep their previous warp.
    pub warp_min_resp: f64,
    pub warps: bool,
    pub noise: NoiseConvention,
    pub weighting: Weighting,
    /// Clusters with at least this expected mass are counted.
    pub occupancy_threshold: f64,
    pub threads: Option<usize>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            alpha: 20.0,
            varrho: 1.0,
            init_varrho: 0.5,
            k_init: 1,
            p_inducing: 24,
            prior_strength: 100.0,
            max_iters: 50,
            elbo_tol: 1e-5,
            inner_tol: 1e-4,
            inner_max_iters: 10,
            seed: 0,
            birth_margin: 0.0,
            births: true,
            calibration_segments: 20,
            theta_init: None,
            fit_theta: true,
            vartheta: KernelParams {
                sigma_f: 1.0,
                length_scale: 4.0,
                sigma_n: 1.0,
            },
            warp_max_iters: 100,
            warp_rel_tol: 1e-6,
            warp_min_resp: 1e-3,
            warps: true,
            noise: NoiseConvention::default(),
            weighting: Weighting::default(),
            occupancy_threshold: 0.5,
            threads: None,
        }
    }
}

impl InferenceConfig {
    /// Defaults for streaming mode (ϱ = 0.5).
    pub fn streaming() -> Self {
        Self {
            varrho: 0.5,
            ..Self::default()
        }
    }

    pub fn warp_options(&self) -> MapWarpOptions {
        MapWarpOptions {
            max_iters: self.warp_max_iters,
            rel_tol: self.warp_rel_tol,
            ..Default::default()
        }
    }

    pub fn hdp(&self) -> HDPConfig {
        HDPConfig {
            gamma: self.gamma,
            alpha: self.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hdp().validate()?;
        let positive = [
            ("varrho", self.varrho),
            ("init_varrho", self.init_varrho),
            ("prior_strength", self.prior_strength),
            ("elbo_tol", self.elbo_tol),
            ("inner_tol", self.inner_tol),
            ("warp_rel_tol", self.warp_rel_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.k_init == 0 || self.p_inducing < 2 || self.max_iters == 0 || self.inner_max_iters == 0 {
            return Err(Error::InvalidArgument(
                "k_init, max_iters and inner_max_iters must be >= 1 and p_inducing >= 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warp_min_resp) {
            return Err(Error::InvalidArgument("warp_min_resp must lie in [0, 1)".into()));
        }
        if !self.birth_margin.is_finite() {
            return Err(Error::InvalidArgument("birth_margin must be finite".into()));
        }
        self.vartheta.validate()?;
        if let Some(t) = &self.theta_init {
            t.validate()?;
        }
        Ok(())
    }
}
