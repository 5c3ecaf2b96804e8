use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GPBelief, InducingSet};
use crate::hdp::{StickPosterior, TransitionPosterior};
use crate::inference::config::InferenceConfig;
use crate::kernel::KernelParams;
use crate::lds::{ChainBelief, Gaussian, MNIWPosterior, RegressionStats, XConditional};
use crate::segment::Segment;
use crate::serde_mat;
use crate::warp::WarpAux;

pub const MODEL_VERSION: &str = "hdpgpc-model/1";

/// Time stamps shifted to start at zero; clusters live on this axis.
pub fn relative_times(seg: &Segment) -> Vec<f64> {
    let t0 = seg.t[0];
    seg.t.iter().map(|t| t - t0).collect()
}

/// A copy of the segment on the relative axis.
pub fn relative_segment(seg: &Segment) -> Segment {
    Segment {
        id: seg.id.clone(),
        t: relative_times(seg),
        y: seg.y.clone(),
        label: seg.label.clone(),
    }
}

/// Linear interpolation with flat extrapolation.
pub fn interpolate(t: &[f64], y: &[f64], at: f64) -> f64 {
    if at <= t[0] {
        return y[0];
    }
    let last = t.len() - 1;
    if at >= t[last] {
        return y[last];
    }
    let i = t.partition_point(|v| *v <= at) - 1;
    let w = (at - t[i]) / (t[i + 1] - t[i]);
    y[i] * (1.0 - w) + y[i + 1] * w
}

/// Data-driven prior quantities shared by every cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub locations: Vec<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub s_omega: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub s_eps: DMatrix<f64>,
    /// Mean second moment of the data at the inducing points.
    pub v0: f64,
    /// V_A = V_C = strength·v0·I: pseudo-observations behind M_A = M_C = I.
    pub strength: f64,
    pub dof: f64,
    /// Largest absolute deviation of the data from its mean.
    pub y_scale: f64,
}

impl Priors {
    /// S_ω = ϱ·diag(½ mean squared successive difference) and
    /// S_ε = ϱ·diag(variance across segments), both at the inducing points.
    pub fn from_data(segments: &[Segment], config: &InferenceConfig) -> Result<Self> {
        let (p, varrho) = (config.p_inducing, config.varrho);
        if segments.is_empty() {
            return Err(Error::InvalidArgument("no segments to calibrate priors on".into()));
        }
        let span = segments.iter().map(|s| s.t[s.len() - 1] - s.t[0]).fold(0.0, f64::max);
        let locations: Vec<f64> = (0..p).map(|i| span * i as f64 / (p - 1) as f64).collect();
        let rows: Vec<Vec<f64>> = segments
            .iter()
            .map(|s| {
                let t = relative_times(s);
                locations.iter().map(|l| interpolate(&t, &s.y, *l)).collect()
            })
            .collect();
        let n = rows.len() as f64;
        let floor = 1e-6;
        let mut second = 0.0;
        let mut var = vec![0.0; p];
        let mut diff = vec![0.0; p];
        for i in 0..p {
            let mean = rows.iter().map(|r| r[i]).sum::<f64>() / n;
            var[i] = rows.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / n;
            second += rows.iter().map(|r| r[i] * r[i]).sum::<f64>() / n;
            if rows.len() > 1 {
                diff[i] = rows.windows(2).map(|w| (w[1][i] - w[0][i]).powi(2)).sum::<f64>() / (2.0 * (n - 1.0));
            }
        }
        let second = (second / p as f64).max(floor);
        let scale = var.iter().sum::<f64>() / p as f64;
        let fl = (scale * 1e-3).max(floor);
        let s_eps = DMatrix::from_diagonal(&DVector::from_iterator(p, var.iter().map(|v| varrho * v.max(fl))));
        let omega_fallback = if rows.len() > 1 { fl } else { scale.max(floor) };
        let s_omega = DMatrix::from_diagonal(&DVector::from_iterator(
            p,
            diff.iter()
                .map(|v| varrho * if rows.len() > 1 { v.max(fl) } else { omega_fallback }),
        ));
        let count: usize = segments.iter().map(|s| s.len()).sum();
        let ymean = segments.iter().flat_map(|s| s.y.iter()).sum::<f64>() / count as f64;
        let y_scale = segments
            .iter()
            .flat_map(|s| s.y.iter())
            .map(|y| (y - ymean).abs())
            .fold(0.0, f64::max)
            .max(1e-3);
        Ok(Self {
            locations,
            s_omega,
            s_eps,
            v0: second,
            strength: config.prior_strength,
            dof: p as f64 + 2.0,
            y_scale,
        })
    }

    pub fn p(&self) -> usize {
        self.locations.len()
    }

    /// Distance between neighbouring inducing points.
    pub fn spacing(&self) -> f64 {
        let p = self.p();
        if p < 2 {
            1.0
        } else {
            ((self.locations[p - 1] - self.locations[0]) / (p - 1) as f64).max(1e-6)
        }
    }

    pub fn mean_eps(&self) -> f64 {
        self.s_eps.diagonal().mean()
    }

    /// Kernel a fresh cluster starts from: the configured one, or
    /// (largest deviation, 1, √mean S_ε).
    pub fn initial_theta(&self, config: &InferenceConfig) -> KernelParams {
        config.theta_init.unwrap_or(KernelParams {
            sigma_f: self.y_scale,
            length_scale: self.spacing(),
            sigma_n: self.mean_eps().sqrt().max(1e-3),
        })
    }

    pub fn dynamics_prior(&self) -> MNIWPosterior {
        let p = self.p();
        MNIWPosterior {
            m: DMatrix::identity(p, p),
            v: DMatrix::identity(p, p) * (self.strength * self.v0),
            s: self.s_omega.clone(),
            dof: self.dof,
        }
    }

    pub fn emission_prior(&self) -> MNIWPosterior {
        let p = self.p();
        MNIWPosterior {
            m: DMatrix::identity(p, p),
            v: DMatrix::identity(p, p) * (self.strength * self.v0),
            s: self.s_eps.clone(),
            dof: self.dof,
        }
    }
}

/// One cluster: a GP morphology at inducing points evolving by an LDS.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterState {
    pub theta: KernelParams,
    pub inducing: InducingSet,
    pub dynamics_prior: MNIWPosterior,
    pub dynamics: MNIWPosterior,
    pub emission_prior: MNIWPosterior,
    pub emission: MNIWPosterior,
    /// Prior on the state before the first segment.
    pub init: Gaussian,
    /// Most recent (smoothed, or filtered when streaming) state belief.
    pub latest: Gaussian,
    /// Expected number of segments, Σ_n r_nk.
    pub mass: f64,
    #[serde(skip)]
    pub chain: Option<ChainBelief>,
    #[serde(skip)]
    pub xcond: Vec<XConditional>,
    #[serde(skip)]
    pub online: Option<OnlineStats>,
}

/// Running regression statistics for streaming updates.
#[derive(Clone, Debug)]
pub struct OnlineStats {
    pub dynamics: RegressionStats,
    pub emission: RegressionStats,
}

impl ClusterState {
    pub fn new(theta: KernelParams, priors: &Priors) -> Result<Self> {
        let inducing = InducingSet::new(priors.locations.clone(), theta)?;
        let init = Gaussian::new(DVector::zeros(priors.p()), inducing.prior_cov());
        Ok(Self {
            theta,
            dynamics_prior: priors.dynamics_prior(),
            dynamics: priors.dynamics_prior(),
            emission_prior: priors.emission_prior(),
            emission: priors.emission_prior(),
            latest: init.clone(),
            init,
            inducing,
            mass: 0.0,
            chain: None,
            xcond: Vec::new(),
            online: None,
        })
    }

    /// Pseudo-observation belief one step ahead of `latest`.
    pub fn predictive_x(&self, config: &InferenceConfig) -> Result<GPBelief> {
        let (q, _) = self.dynamics.plug_in(config.noise)?;
        let (s_eps, _) = self.emission.plug_in(config.noise)?;
        let a = &self.dynamics.m;
        let c = &self.emission.m;
        let mean = c * a * &self.latest.mean;
        let p = a * &self.latest.cov * a.transpose() + q;
        let cov = c * p * c.transpose() + s_eps;
        GPBelief::new(mean, cov, self.inducing.locations.clone(), self.theta)
    }

    /// Emission marginal at the latest state: the cluster's current
    /// morphology with its uncertainty.
    pub fn current_x(&self, config: &InferenceConfig) -> Result<GPBelief> {
        let (s_eps, _) = self.emission.plug_in(config.noise)?;
        let g = crate::lds::emission_marginal(&self.emission.m, &s_eps, &self.latest);
        GPBelief::new(g.mean, g.cov, self.inducing.locations.clone(), self.theta)
    }
}

/// q(S): per-segment responsibilities and pairwise terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    /// N × K.
    #[serde(with = "serde_mat::matrix")]
    pub r: DMatrix<f64>,
    /// ξ_n for n = 2..N; `xi[n-1]` is K × K with rows the previous state.
    #[serde(with = "serde_mat::matrix_vec")]
    pub xi: Vec<DMatrix<f64>>,
    /// H[q(S)] of the stored distribution.
    pub entropy: f64,
}

impl Responsibilities {
    pub fn empty(k: usize) -> Self {
        Self {
            r: DMatrix::zeros(0, k),
            xi: Vec::new(),
            entropy: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.r.nrows()
    }

    pub fn k(&self) -> usize {
        self.r.ncols()
    }

    /// N_k = Σ_n r_nk.
    pub fn masses(&self) -> Vec<f64> {
        (0..self.k()).map(|k| self.r.column(k).sum()).collect()
    }

    /// Transition counts of shape (K+1) × (K+1): row 0 from the first
    /// segment, rows 1..K from ξ, last column zero.
    pub fn counts(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut c = DMatrix::zeros(k + 1, k + 1);
        if self.n() == 0 {
            return c;
        }
        for j in 0..k {
            c[(0, j)] = self.r[(0, j)];
        }
        for x in &self.xi {
            for i in 0..k {
                for j in 0..k {
                    c[(i + 1, j)] += x[(i, j)];
                }
            }
        }
        c
    }

    /// Append a zero column (a new cluster) to r and ξ.
    pub fn grow(&mut self) {
        let k = self.k();
        let n = self.n();
        self.r = self.r.clone().resize(n, k + 1, 0.0);
        for x in self.xi.iter_mut() {
            *x = x.clone().resize(k + 1, k + 1, 0.0);
        }
    }

    /// Hard assignment per segment (index of the largest responsibility).
    pub fn hard(&self) -> Vec<usize> {
        (0..self.n())
            .map(|i| {
                let row = self.r.row(i);
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    Offline,
    Online,
}

/// Parts of the evidence lower bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboParts {
    pub total: f64,
    pub l_obs: f64,
    pub l_hdp: f64,
    pub entropy: f64,
}

impl ElboParts {
    pub fn assemble(l_obs: f64, l_hdp: f64, entropy: f64) -> Self {
        Self {
            total: l_obs + l_hdp + entropy,
            l_obs,
            l_hdp,
            entropy,
        }
    }
}

/// A fitted (or in-progress) model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelState {
    pub version: String,
    pub mode: FitMode,
    pub config: InferenceConfig,
    pub priors: Priors,
    pub clusters: Vec<ClusterState>,
    pub sticks: StickPosterior,
    pub transitions: TransitionPosterior,
    pub resp: Responsibilities,
    /// MAP warps per segment and cluster, `warps[n][k]`.
    pub warps: Vec<Vec<WarpAux>>,
    pub segment_ids: Vec<String>,
    pub elbo_trace: Vec<f64>,
    pub elbo: Option<ElboParts>,
    pub iterations: usize,
    pub converged: bool,
}

impl ModelState {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_VERSION {
            return Err(Error::ModelFile(format!(
                "unsupported model version {:?} (expected {MODEL_VERSION:?})",
                self.version
            )));
        }
        let k = self.k();
        if k == 0 {
            return Err(Error::ModelFile("model has no clusters (K = 0)".into()));
        }
        self.config.validate()?;
        self.sticks.validate()?;
        if self.sticks.len() != k || self.transitions.kappa.shape() != (k + 1, k + 1) {
            return Err(Error::ModelFile(format!(
                "HDP posteriors do not match K = {k}: {} sticks, kappa {:?}",
                self.sticks.len(),
                self.transitions.kappa.shape()
            )));
        }
        if self.transitions.kappa.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::ModelFile("transition parameters must be positive".into()));
        }
        if self.resp.k() != k || self.resp.n() != self.warps.len() || self.warps.iter().any(|w| w.len() != k) {
            return Err(Error::ModelFile("responsibilities or warps do not match K".into()));
        }
        for c in &self.clusters {
            c.theta.validate()?;
            c.dynamics.validate()?;
            c.emission.validate()?;
            let p = c.inducing.len();
            if c.dynamics.out_dim() != p || c.emission.out_dim() != p || c.latest.mean.len() != p {
                return Err(Error::ModelFile(
                    "cluster dimensions disagree with its inducing set".into(),
                ));
            }
        }
        Ok(())
    }

    /// Hard cluster per segment.
    pub fn assignments(&self) -> Vec<usize> {
        self.resp.hard()
    }

    /// Clusters with expected mass at or above the occupancy threshold.
    pub fn occupied(&self) -> Vec<usize> {
        self.resp
            .masses()
            .iter()
            .enumerate()
            .filter(|(_, m)| **m >= self.config.occupancy_threshold)
            .map(|(k, _)| k)
            .collect()
    }
}
