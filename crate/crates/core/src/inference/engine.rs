//! Per-cluster local updates shared by the off-line and streaming fits.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::Result;
use crate::gp::{GPBelief, Projection};
use crate::inference::assign::expected_loglik;
use crate::inference::config::InferenceConfig;
use crate::inference::state::{relative_segment, ClusterState};
use crate::kernel::{fit_hyperparams, log_marginal_likelihood, HyperBounds, KernelParams};
use crate::lds::{
    self, expected_regression_loglik, kalman_backward, kalman_forward, mniw_kl, mniw_update, ChainBelief, ChainModel,
    Gaussian, RegressionStats, StepObs, XConditional,
};
use crate::linalg::{self, Factor};
use crate::segment::Segment;
use crate::warp::{self, map_warp, MapWarpOptions, WarpAux};

/// Segments on the relative axis plus per-segment cached quantities.
pub struct Data {
    pub segs: Vec<Segment>,
    pub ys: Vec<DVector<f64>>,
    pub warp_priors: Vec<Factor>,
}

impl Data {
    pub fn new(segments: &[Segment], vartheta: &KernelParams) -> Result<Self> {
        let segs: Vec<Segment> = segments.iter().map(relative_segment).collect();
        let ys = segs.iter().map(|s| DVector::from_column_slice(&s.y)).collect();
        let warp_priors = segs
            .iter()
            .map(|s| warp::warp_prior_factor(vartheta, &s.t))
            .collect::<Result<_>>()?;
        Ok(Self { segs, ys, warp_priors })
    }

    pub fn push(&mut self, seg: &Segment, vartheta: &KernelParams) -> Result<()> {
        let s = relative_segment(seg);
        self.warp_priors.push(warp::warp_prior_factor(vartheta, &s.t)?);
        self.ys.push(DVector::from_column_slice(&s.y));
        self.segs.push(s);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.segs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segs.is_empty()
    }

    pub fn warp_log_prior(&self, n: usize, aux: &WarpAux) -> f64 {
        let times = warp::warp_for_grid(aux, &self.segs[n].t).times();
        let x = DVector::from_column_slice(&times);
        let m = DVector::from_column_slice(&self.segs[n].t);
        linalg::gaussian_log_density(&x, &m, &self.warp_priors[n])
    }
}

/// The projection of a cluster onto one segment's warped grid.
#[derive(Clone, Debug)]
pub struct PairCache {
    pub proj: Projection,
}

pub fn pair_cache(cluster: &ClusterState, seg: &Segment, aux: &WarpAux) -> Result<PairCache> {
    let times = warp::warp_for_grid(aux, &seg.t).times();
    Ok(PairCache {
        proj: Projection::onto(&cluster.inducing, &times)?,
    })
}

pub fn step_obs(cache: &PairCache, y: &DVector<f64>, r: f64) -> StepObs {
    StepObs {
        khat: cache.proj.khat.clone(),
        resid: cache.proj.resid.clone(),
        y: y.clone(),
        r,
    }
}

pub fn chain_model(cluster: &ClusterState, config: &InferenceConfig) -> Result<ChainModel> {
    ChainModel::from_posteriors(
        cluster.init.clone(),
        &cluster.dynamics,
        &cluster.emission,
        config.noise,
        config.weighting,
    )
}

/// q(F, X) for one cluster over all segments given responsibilities `r`.
pub fn chain_update(
    cluster: &mut ClusterState,
    data: &Data,
    caches: &[PairCache],
    r: &[f64],
    config: &InferenceConfig,
) -> Result<()> {
    let model = chain_model(cluster, config)?;
    let obs: Vec<Option<StepObs>> = (0..data.len())
        .map(|n| Some(step_obs(&caches[n], &data.ys[n], r[n])))
        .collect();
    let fwd = kalman_forward(&model, &obs)?;
    let chain = kalman_backward(&model, &fwd)?;
    let xcond = obs
        .iter()
        .map(|o| XConditional::new(&model.c, &model.s_eps, o.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    cluster.latest = chain.smoothed.last().cloned().unwrap_or_else(|| cluster.init.clone());
    cluster.chain = Some(chain);
    cluster.xcond = xcond;
    Ok(())
}

/// E[x_n] and Cov[x_n] for every segment.
pub fn x_marginals(cluster: &ClusterState) -> Vec<Gaussian> {
    let chain = cluster.chain.as_ref().expect("chain computed");
    cluster
        .xcond
        .iter()
        .enumerate()
        .map(|(i, xc)| xc.marginal(&chain.smoothed[i + 1]))
        .collect()
}

pub fn emission_stats(chain: &ChainBelief, xcond: &[XConditional]) -> RegressionStats {
    let p = chain.smoothed[0].mean.len();
    let mut st = RegressionStats::zeros(p, p);
    for (i, xc) in xcond.iter().enumerate() {
        let f = &chain.smoothed[i + 1];
        let x = xc.marginal(f);
        st.sxx += f.second_moment();
        st.syx += xc.cross(f);
        st.syy += x.second_moment();
        st.count += 1.0;
    }
    st
}

/// Conjugate q(φ) updates from the current chain.
pub fn phi_update(cluster: &mut ClusterState) -> Result<()> {
    let chain = cluster.chain.as_ref().expect("chain computed");
    let dstats = chain.dynamics_stats();
    let estats = emission_stats(chain, &cluster.xcond);
    cluster.dynamics = mniw_update(&cluster.dynamics_prior, &dstats, dstats.count)?;
    cluster.emission = mniw_update(&cluster.emission_prior, &estats, estats.count)?;
    Ok(())
}

/// E[log N(y_n; K̂x_n, R)] for every segment under the current q(x).
pub fn cluster_logliks(cluster: &ClusterState, data: &Data, caches: &[PairCache]) -> Result<Vec<f64>> {
    x_marginals(cluster)
        .iter()
        .enumerate()
        .map(|(n, x)| expected_loglik(&data.ys[n], &caches[n].proj, &x.mean, &x.cov))
        .collect()
}

/// The observation part of the bound contributed by one cluster, excluding
/// warp priors.
pub fn cluster_obs_bound(cluster: &ClusterState, loglik: &[f64], r: &[f64]) -> Result<f64> {
    let chain = cluster.chain.as_ref().expect("chain computed");
    let kfac = linalg::cholesky_auto(&cluster.init.cov, "initial state prior")?;
    let f0 = &chain.smoothed[0];
    let t0 =
        linalg::gaussian_log_density(&f0.mean, &cluster.init.mean, &kfac) - 0.5 * linalg::trace_solve(&kfac, &f0.cov);
    let dstats = chain.dynamics_stats();
    let estats = emission_stats(chain, &cluster.xcond);
    let ta = expected_regression_loglik(&cluster.dynamics, &dstats)?;
    let tc = expected_regression_loglik(&cluster.emission, &estats)?;
    let hx: f64 = cluster.xcond.iter().map(|x| x.entropy()).sum::<Result<f64>>()?;
    let hf = chain.entropy()?;
    let kl =
        mniw_kl(&cluster.dynamics, &cluster.dynamics_prior)? + mniw_kl(&cluster.emission, &cluster.emission_prior)?;
    let ty: f64 = loglik
        .iter()
        .zip(r)
        .filter(|(_, r)| **r > 0.0)
        .map(|(l, r)| r * l)
        .sum();
    Ok(t0 + ta + tc + hf + hx - kl + ty)
}

/// Kernel for a fresh cluster: fitted by marginal likelihood from `init`
/// and from a start scaled to the segment, keeping the better fit.
pub fn fit_theta(seg: &Segment, init: KernelParams, fit: bool) -> Result<KernelParams> {
    if !fit {
        return Ok(init);
    }
    let bounds = HyperBounds::default();
    let n = seg.len() as f64;
    let mean = seg.y.iter().sum::<f64>() / n;
    let sd = (seg.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-3);
    let span = (seg.t[seg.len() - 1] - seg.t[0]).max(1e-2);
    let scaled = KernelParams {
        sigma_f: (sd.powi(2) + mean * mean).sqrt().max(1e-3),
        length_scale: (span / 10.0).max(1e-2),
        sigma_n: (0.1 * sd).max(1e-3),
    };
    let mut best: Option<(KernelParams, f64)> = None;
    for start in [init, scaled] {
        let clamped = clamp_params(&start, &bounds);
        if let Ok(fit) = fit_hyperparams(&seg.t, &seg.y, &clamped, &bounds) {
            if best.as_ref().is_none_or(|(_, v)| fit.log_likelihood > *v) {
                best = Some((fit.params, fit.log_likelihood));
            }
        }
    }
    Ok(best.map_or(init, |b| b.0))
}

/// Log-likelihood of a segment under the prior GP of a fresh cluster.
pub fn fresh_score(seg: &Segment, init: &KernelParams) -> Result<f64> {
    log_marginal_likelihood(&seg.t, &seg.y, init)
}

fn clamp_params(p: &KernelParams, b: &HyperBounds) -> KernelParams {
    KernelParams {
        sigma_f: p.sigma_f.clamp(b.lower.sigma_f, b.upper.sigma_f),
        length_scale: p.length_scale.clamp(b.lower.length_scale, b.upper.length_scale),
        sigma_n: p.sigma_n.clamp(b.lower.sigma_n, b.upper.sigma_n),
    }
}

/// Re-optimize warps for pairs with enough responsibility, in parallel.
/// Returns the updated warps row by row; pairs below the threshold keep
/// their current warp.
pub fn update_warps(
    clusters: &[ClusterState],
    data: &Data,
    warps: &[Vec<WarpAux>],
    r: &nalgebra::DMatrix<f64>,
    config: &InferenceConfig,
) -> Result<Vec<Vec<WarpAux>>> {
    if !config.warps {
        return Ok(warps.to_vec());
    }
    let marg: Vec<Vec<Gaussian>> = clusters.iter().map(x_marginals).collect();
    let jobs: Vec<(usize, usize)> = (0..data.len())
        .flat_map(|n| (0..clusters.len()).map(move |k| (n, k)))
        .collect();
    let results: Vec<Result<Option<WarpAux>>> = jobs
        .par_iter()
        .map(|&(n, k)| {
            let w = r[(n, k)];
            if w < config.warp_min_resp {
                return Ok(None);
            }
            let c = &clusters[k];
            let x = &marg[k][n];
            let belief = GPBelief::new(x.mean.clone(), x.cov.clone(), c.inducing.locations.clone(), c.theta)?;
            let opts = MapWarpOptions {
                max_iters: config.warp_max_iters,
                rel_tol: config.warp_rel_tol,
                likelihood_weight: w,
                target: Default::default(),
            };
            let res = map_warp(
                &data.segs[n],
                &belief,
                &c.inducing,
                &config.vartheta,
                &warps[n][k],
                &opts,
            )?;
            Ok(Some(res.aux))
        })
        .collect();
    let mut out = warps.to_vec();
    for ((n, k), res) in jobs.into_iter().zip(results) {
        if let Some(a) = res? {
            out[n][k] = a;
        }
    }
    Ok(out)
}

/// Predictive x-belief for a cluster one step past its latest state, with
/// the emission noise plugged in under the configured convention.
pub fn predictive_gaussian(cluster: &ClusterState, config: &InferenceConfig) -> Result<(Gaussian, Gaussian)> {
    let model = chain_model(cluster, config)?;
    let mut cur = cluster.latest.clone();
    if let Some(pen) = &model.pen_a {
        if cluster.online.is_some() {
            cur = lds::apply_penalty(&cur, pen)?;
        }
    }
    let pred = Gaussian::new(
        &model.a * &cur.mean,
        &model.a * &cur.cov * model.a.transpose() + &model.q,
    );
    let x = lds::emission_marginal(&model.c, &model.s_eps, &pred);
    Ok((pred, x))
}
