//! Batch variational inference: coordinate ascent over q(S), the cluster
//! chains, q(φ), the warps and the HDP globals.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hdp::{self, expected_log_pi, optimize_sticks, update_transition_posterior};
use crate::inference::assign::update_assignments;
use crate::inference::config::InferenceConfig;
use crate::inference::engine::{
    self, chain_update, cluster_logliks, cluster_obs_bound, pair_cache, phi_update, Data, PairCache,
};
use crate::inference::online::fit_online;
use crate::inference::state::{ElboParts, FitMode, ModelState, Priors};
use crate::segment::Segment;

/// Projections for every cluster and segment, indexed `[k][n]`.
pub fn build_caches(model: &ModelState, data: &Data) -> Result<Vec<Vec<PairCache>>> {
    model
        .clusters
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            (0..data.len())
                .map(|n| pair_cache(c, &data.segs[n], &model.warps[n][k]))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

fn column(r: &DMatrix<f64>, k: usize) -> Vec<f64> {
    r.column(k).iter().copied().collect()
}

/// Chains then q(φ) for every cluster.
fn local_pass(model: &mut ModelState, data: &Data, caches: &[Vec<PairCache>]) -> Result<()> {
    let config = model.config.clone();
    let r = model.resp.r.clone();
    model
        .clusters
        .par_iter_mut()
        .enumerate()
        .map(|(k, c)| {
            chain_update(c, data, &caches[k], &column(&r, k), &config)?;
            phi_update(c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(())
}

/// N × K matrix of E[log N(y_n; K̂x_n, R)].
fn loglik_matrix(model: &ModelState, data: &Data, caches: &[Vec<PairCache>]) -> Result<DMatrix<f64>> {
    let cols: Vec<Vec<f64>> = model
        .clusters
        .par_iter()
        .enumerate()
        .map(|(k, c)| cluster_logliks(c, data, &caches[k]))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(data.len(), model.k(), |n, k| cols[k][n]))
}

/// Observation part of the bound, including the warp priors.
pub fn observation_bound(model: &ModelState, data: &Data, caches: &[Vec<PairCache>]) -> Result<f64> {
    let ll = loglik_matrix(model, data, caches)?;
    let mut total = 0.0;
    for (k, c) in model.clusters.iter().enumerate() {
        total += cluster_obs_bound(c, &column(&ll, k), &column(&model.resp.r, k))?;
    }
    for (n, row) in model.warps.iter().enumerate() {
        for aux in row {
            total += data.warp_log_prior(n, aux);
        }
    }
    Ok(total)
}

/// The full evidence lower bound at the current factors.
pub fn elbo(model: &ModelState, data: &Data, caches: &[Vec<PairCache>]) -> Result<ElboParts> {
    let l_obs = observation_bound(model, data, caches)?;
    let l_hdp = hdp::hdp_elbo(
        &model.config.hdp(),
        &model.sticks,
        &model.transitions,
        &model.resp.counts(),
    );
    Ok(ElboParts::assemble(l_obs, l_hdp, model.resp.entropy))
}

/// q(π) and q(v), alternated twice.
fn update_globals(model: &mut ModelState) -> Result<()> {
    let cfg = model.config.hdp();
    let counts = model.resp.counts();
    model.transitions = update_transition_posterior(&cfg, &model.sticks, &counts)?;
    for _ in 0..2 {
        model.sticks = optimize_sticks(&cfg, &model.transitions, &model.sticks)?.sticks;
        model.transitions = update_transition_posterior(&cfg, &model.sticks, &counts)?;
    }
    Ok(())
}

fn relative_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / old.abs().max(1.0)
}

/// Batch fit. A streaming pass (with `init_varrho`) supplies the clusters
/// and the initial responsibilities; the priors are then recalibrated on
/// all segments.
pub fn fit_offline(segments: &[Segment], config: &InferenceConfig) -> Result<ModelState> {
    config.validate()?;
    if segments.is_empty() {
        return Err(Error::InvalidArgument("fit_offline needs at least one segment".into()));
    }
    for s in segments {
        s.validate()?;
    }
    let init_config = InferenceConfig {
        varrho: config.init_varrho,
        ..config.clone()
    };
    let mut model = fit_online(segments, &init_config)?;
    let priors = Priors::from_data(segments, config)?;
    for c in model.clusters.iter_mut() {
        c.dynamics_prior = priors.dynamics_prior();
        c.emission_prior = priors.emission_prior();
    }
    model.priors = priors;
    model.config = config.clone();
    model.mode = FitMode::Offline;
    model.elbo_trace.clear();
    model.converged = false;
    model.iterations = 0;
    for c in model.clusters.iter_mut() {
        c.online = None;
    }
    log::info!("initialized with K = {}", model.k());
    let data = Data::new(segments, &config.vartheta)?;
    let mut caches = build_caches(&model, &data)?;
    local_pass(&mut model, &data, &caches)?;
    update_globals(&mut model)?;

    let mut prev = elbo(&model, &data, &caches)?.total;
    for it in 0..config.max_iters {
        // q(S)
        let ll = loglik_matrix(&model, &data, &caches)?;
        model.resp = update_assignments(&ll, &expected_log_pi(&model.transitions));

        // warps, chains and q(φ) until the observation bound settles
        let mut obs_prev = observation_bound(&model, &data, &caches)?;
        for _ in 0..config.inner_max_iters {
            model.warps = engine::update_warps(&model.clusters, &data, &model.warps, &model.resp.r, config)?;
            caches = build_caches(&model, &data)?;
            local_pass(&mut model, &data, &caches)?;
            let obs = observation_bound(&model, &data, &caches)?;
            let done = relative_change(obs, obs_prev) < config.inner_tol;
            obs_prev = obs;
            if done {
                break;
            }
        }

        update_globals(&mut model)?;
        let parts = elbo(&model, &data, &caches)?;
        model.elbo_trace.push(parts.total);
        model.elbo = Some(parts);
        model.iterations = it + 1;
        log::info!("iteration {}: elbo {:.6} (K = {})", it + 1, parts.total, model.k());
        if parts.total < prev - 1e-6 * prev.abs().max(1.0) {
            log::warn!("elbo decreased from {prev} to {}", parts.total);
        }
        let change = relative_change(parts.total, prev);
        prev = parts.total;
        if change < config.elbo_tol {
            model.converged = true;
            break;
        }
    }
    let masses = model.resp.masses();
    for (c, m) in model.clusters.iter_mut().zip(masses) {
        c.mass = m;
    }
    Ok(model)
}
