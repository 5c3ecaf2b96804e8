//! Single-pass streaming inference. Each segment is aligned against every
//! cluster's one-step predictive, assigned with the past frozen, and then
//! folded into each cluster's filter and the global posteriors.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gp::{GPBelief, Projection};
use crate::hdp::{self, expected_log_pi, optimize_sticks, update_transition_posterior, StickPosterior};
use crate::inference::assign::{filter_assignment, gaussian_log_zeta};
use crate::inference::config::InferenceConfig;
use crate::inference::engine::{self, chain_model, Data};
use crate::inference::state::{
    relative_segment, ClusterState, FitMode, ModelState, OnlineStats, Priors, Responsibilities, MODEL_VERSION,
};
use crate::lds::{self, measurement_update, mniw_update, Gaussian, RegressionStats, StepObs, XConditional};
use crate::linalg;
use crate::segment::Segment;
use crate::warp::{aligned_score, warp_for_grid, WarpAux};

/// Result of processing one streamed segment.
#[derive(Clone, Debug)]
pub struct SegmentReport {
    pub index: usize,
    pub responsibilities: Vec<f64>,
    pub spawned: bool,
    pub k: usize,
}

/// Incremental fitter. Segments pushed before the calibration prefix is
/// complete are buffered; `finish` flushes them.
pub struct OnlineFitter {
    config: InferenceConfig,
    priors: Option<Priors>,
    pending: Vec<Segment>,
    model: Option<ModelState>,
    data: Option<Data>,
    counts: DMatrix<f64>,
    obs_sum: f64,
}

impl OnlineFitter {
    /// Priors are calibrated on the first `config.calibration_segments`.
    pub fn new(config: InferenceConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            priors: None,
            pending: Vec::new(),
            model: None,
            data: None,
            counts: DMatrix::zeros(1, 1),
            obs_sum: 0.0,
        })
    }

    pub fn with_priors(config: InferenceConfig, priors: Priors) -> Result<Self> {
        let mut f = Self::new(config)?;
        f.priors = Some(priors);
        Ok(f)
    }

    pub fn model(&self) -> Option<&ModelState> {
        self.model.as_ref()
    }

    /// Feed one segment. Returns reports for every segment actually processed
    /// by this call (none while the calibration prefix is filling).
    pub fn push(&mut self, seg: Segment) -> Result<Vec<SegmentReport>> {
        seg.validate()?;
        if self.priors.is_none() {
            self.pending.push(seg);
            if self.pending.len() < self.config.calibration_segments.max(1) {
                return Ok(Vec::new());
            }
            return self.calibrate_and_flush();
        }
        Ok(vec![self.process(&seg)?])
    }

    fn calibrate_and_flush(&mut self) -> Result<Vec<SegmentReport>> {
        let priors = Priors::from_data(&self.pending, &self.config)?;
        self.priors = Some(priors);
        let pending = std::mem::take(&mut self.pending);
        pending.iter().map(|s| self.process(s)).collect()
    }

    pub fn finish(mut self) -> Result<ModelState> {
        if self.priors.is_none() && !self.pending.is_empty() {
            self.calibrate_and_flush()?;
        }
        let mut model = self
            .model
            .ok_or_else(|| Error::InvalidArgument("no segments were streamed".into()))?;
        for c in model.clusters.iter_mut() {
            c.mass = 0.0;
        }
        let masses = model.resp.masses();
        for (c, m) in model.clusters.iter_mut().zip(masses) {
            c.mass = m;
        }
        model.converged = true;
        Ok(model)
    }

    fn process(&mut self, raw: &Segment) -> Result<SegmentReport> {
        let priors = self.priors.clone().expect("calibrated");
        let config = self.config.clone();
        let seg = relative_segment(raw);
        match self.data.as_mut() {
            Some(d) => d.push(raw, &config.vartheta)?,
            None => self.data = Some(Data::new(std::slice::from_ref(raw), &config.vartheta)?),
        }
        let n = self.data.as_ref().unwrap().len() - 1;

        if self.model.is_none() {
            let theta = engine::fit_theta(&seg, priors.initial_theta(&config), config.fit_theta)?;
            let cluster = ClusterState::new(theta, &priors)?;
            let hdpc = config.hdp();
            let sticks = StickPosterior::prior(&hdpc, 1);
            let counts = DMatrix::zeros(2, 2);
            let transitions = update_transition_posterior(&hdpc, &sticks, &counts)?;
            self.counts = counts;
            self.model = Some(ModelState {
                version: MODEL_VERSION.to_string(),
                mode: FitMode::Online,
                config: config.clone(),
                priors: priors.clone(),
                clusters: vec![cluster],
                sticks,
                transitions,
                resp: Responsibilities::empty(1),
                warps: Vec::new(),
                segment_ids: Vec::new(),
                elbo_trace: Vec::new(),
                elbo: None,
                iterations: 0,
                converged: false,
            });
        }
        let model = self.model.as_mut().unwrap();
        let prev: Option<Vec<f64>> = (n > 0).then(|| model.resp.r.row(n - 1).iter().copied().collect());
        let y = DVector::from_column_slice(&seg.y);

        // align against every cluster's predictive and score it
        let scored: Vec<Result<(WarpAux, f64, Projection)>> = model
            .clusters
            .par_iter()
            .map(|c| score_cluster(c, &seg, &y, &config))
            .collect();
        let mut warps = Vec::with_capacity(scored.len());
        let mut ll = Vec::with_capacity(scored.len());
        let mut projs = Vec::with_capacity(scored.len());
        for s in scored {
            let (w, l, p) = s?;
            warps.push(w);
            ll.push(l);
            projs.push(p);
        }

        let elog = expected_log_pi(&model.transitions);
        let k = model.k();
        let first_segment = n == 0;
        let mut spawned = false;
        if first_segment && model.resp.n() == 0 && k == 1 && model.clusters[0].online.is_none() {
            // the first segment seeds the first cluster
            spawned = true;
        } else if k < config.k_init {
            let init = priors.initial_theta(&config);
            let lml = engine::fresh_score(&seg, &init)?;
            let theta = engine::fit_theta(&seg, init, config.fit_theta)?;
            spawn(model, &mut self.counts, theta, &priors)?;
            warps.push(WarpAux::identity(seg.len()));
            ll.push(lml);
            let c = model.clusters.last().unwrap();
            projs.push(Projection::onto(&c.inducing, &seg.t)?);
            spawned = true;
        } else if config.births {
            let prior_of = |col: usize| match &prev {
                None => elog[(0, col)],
                Some(p) => p.iter().enumerate().map(|(j, pj)| pj * elog[(j + 1, col)]).sum(),
            };
            let best = (0..k).map(|c| prior_of(c) + ll[c]).fold(f64::NEG_INFINITY, f64::max);
            let init = priors.initial_theta(&config);
            let lml = engine::fresh_score(&seg, &init)?;
            let fresh = prior_of(k) + lml;
            if fresh > best + config.birth_margin {
                let theta = engine::fit_theta(&seg, init, config.fit_theta)?;
                spawn(model, &mut self.counts, theta, &priors)?;
                warps.push(WarpAux::identity(seg.len()));
                ll.push(lml);
                let c = model.clusters.last().unwrap();
                projs.push(Projection::onto(&c.inducing, &seg.t)?);
                spawned = true;
                log::debug!(
                    "segment {n}: new cluster {} (fresh {fresh:.3} vs best {best:.3})",
                    model.k() - 1
                );
            }
        }
        let k = model.k();

        // q(s_n) with the past frozen, alternating with the global factors
        let (r, xi, h) = if spawned {
            let mut r = vec![0.0; k];
            r[k - 1] = 1.0;
            let xi = prev
                .as_ref()
                .map(|p| DMatrix::from_fn(k, k, |j, c| p.get(j).copied().unwrap_or(0.0) * r[c]));
            (r, xi, 0.0)
        } else {
            let mut state = filter_assignment(prev.as_deref(), &ll, &elog);
            for _ in 0..config.inner_max_iters {
                let trial = with_contribution(&self.counts, n, &state.0, state.1.as_ref());
                let (_, trans) = globals(model, &trial)?;
                let e2 = expected_log_pi(&trans);
                let next = filter_assignment(prev.as_deref(), &ll, &e2);
                let delta = next
                    .0
                    .iter()
                    .zip(&state.0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                state = next;
                if delta < config.inner_tol {
                    break;
                }
            }
            state
        };

        // cluster filters advance one step each
        let updates: Vec<Result<()>> = model
            .clusters
            .par_iter_mut()
            .enumerate()
            .map(|(c, cl)| {
                let obs = StepObs {
                    khat: projs[c].khat.clone(),
                    resid: projs[c].resid.clone(),
                    y: y.clone(),
                    r: r[c],
                };
                online_step(cl, &obs, &config)
            })
            .collect();
        for u in updates {
            u?;
        }

        // record q(s_n) and refresh the globals
        let row = model.resp.n();
        model.resp.r = model.resp.r.clone().resize(row + 1, k, 0.0);
        for (c, v) in r.iter().enumerate() {
            model.resp.r[(row, c)] = *v;
        }
        if let Some(x) = &xi {
            model.resp.xi.push(x.clone());
        }
        model.resp.entropy += h;
        self.counts = with_contribution(&self.counts, n, &r, xi.as_ref());
        let (sticks, trans) = globals(model, &self.counts)?;
        model.sticks = sticks;
        model.transitions = trans;
        model.warps.push(warps);
        model.segment_ids.push(raw.id.clone());

        self.obs_sum += r
            .iter()
            .zip(&ll)
            .filter(|(r, _)| **r > 0.0)
            .map(|(r, l)| r * l)
            .sum::<f64>();
        let l_hdp = hdp::hdp_elbo(&config.hdp(), &model.sticks, &model.transitions, &self.counts);
        model.elbo_trace.push(self.obs_sum + l_hdp + model.resp.entropy);
        model.iterations = model.resp.n();

        Ok(SegmentReport {
            index: n,
            responsibilities: r,
            spawned,
            k,
        })
    }
}

/// Counts with one more segment's contribution added.
fn with_contribution(counts: &DMatrix<f64>, n: usize, r: &[f64], xi: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let k = r.len();
    let mut c = counts.clone().resize(k + 1, k + 1, 0.0);
    if n == 0 {
        for (j, v) in r.iter().enumerate() {
            c[(0, j)] += v;
        }
    } else if let Some(x) = xi {
        for i in 0..k {
            for j in 0..k {
                c[(i + 1, j)] += x[(i, j)];
            }
        }
    }
    c
}

/// q(π) and q(v) for the given counts, alternating twice.
fn globals(model: &ModelState, counts: &DMatrix<f64>) -> Result<(StickPosterior, crate::hdp::TransitionPosterior)> {
    let cfg = model.config.hdp();
    let mut sticks = model.sticks.clone();
    let mut trans = update_transition_posterior(&cfg, &sticks, counts)?;
    for _ in 0..2 {
        sticks = optimize_sticks(&cfg, &trans, &sticks)?.sticks;
        trans = update_transition_posterior(&cfg, &sticks, counts)?;
    }
    Ok((sticks, trans))
}

/// Add a cluster seeded with `theta` and extend the HDP posteriors.
pub fn spawn(
    model: &mut ModelState,
    counts: &mut DMatrix<f64>,
    theta: crate::kernel::KernelParams,
    priors: &Priors,
) -> Result<()> {
    let cluster = ClusterState::new(theta, priors)?;
    model.clusters.push(cluster);
    let cfg = model.config.hdp();
    model.sticks.push_prior(&cfg);
    model.resp.grow();
    let k = model.k();
    *counts = counts.clone().resize(k + 1, k + 1, 0.0);
    // the old inactive column held no counts, so the new last column is zero
    model.transitions = update_transition_posterior(&cfg, &model.sticks, counts)?;
    for row in model.warps.iter_mut() {
        let q = row.first().map_or(0, |w| w.len());
        row.push(WarpAux::identity(q));
    }
    Ok(())
}

/// Birth test for a segment against a model: returns the fitted kernel when
/// a fresh cluster explains the segment better than the best existing one.
pub fn birth_candidate(
    model: &ModelState,
    segment: &Segment,
    prev: Option<&[f64]>,
    best_log_zeta: f64,
) -> Result<Option<crate::kernel::KernelParams>> {
    let seg = relative_segment(segment);
    let elog = expected_log_pi(&model.transitions);
    let k = model.k();
    let prior = match prev {
        None => elog[(0, k)],
        Some(p) => p.iter().enumerate().map(|(j, pj)| pj * elog[(j + 1, k)]).sum(),
    };
    let init = model.priors.initial_theta(&model.config);
    let lml = engine::fresh_score(&seg, &init)?;
    if prior + lml > best_log_zeta + model.config.birth_margin {
        Ok(Some(engine::fit_theta(&seg, init, model.config.fit_theta)?))
    } else {
        Ok(None)
    }
}

/// Spawn a cluster for `segment` if the birth criterion fires. K grows by at
/// most one.
pub fn maybe_spawn_cluster(
    model: &mut ModelState,
    segment: &Segment,
    prev: Option<&[f64]>,
    best_log_zeta: f64,
) -> Result<bool> {
    match birth_candidate(model, segment, prev, best_log_zeta)? {
        Some(theta) => {
            let mut counts = model.resp.counts();
            let priors = model.priors.clone();
            spawn(model, &mut counts, theta, &priors)?;
            Ok(true)
        }
        None => Ok(false),
    }
}

/// Warp against the cluster's one-step predictive and score the segment by
/// its predictive density there, net of the warp's prior cost.
fn score_cluster(
    c: &ClusterState,
    seg: &Segment,
    y: &DVector<f64>,
    config: &InferenceConfig,
) -> Result<(WarpAux, f64, Projection)> {
    let (_, x) = engine::predictive_gaussian(c, config)?;
    let belief = GPBelief::new(x.mean.clone(), x.cov.clone(), c.inducing.locations.clone(), c.theta)?;
    if config.warps && c.online.is_some() {
        let (aux, score) = aligned_score(seg, &belief, &c.inducing, &config.vartheta, &config.warp_options())?;
        let proj = Projection::onto(&c.inducing, &warp_for_grid(&aux, &seg.t).times())?;
        return Ok((aux, score, proj));
    }
    let aux = WarpAux::identity(seg.len());
    let proj = Projection::onto(&c.inducing, &seg.t)?;
    let (m, cov) = proj.push(&x.mean, &x.cov);
    let ll = gaussian_log_zeta(y, &m, &cov, 0.0)?;
    Ok((aux, ll, proj))
}

/// Advance one cluster's filter by one segment and refresh its q(φ) from
/// running statistics built with one-step smoothing.
fn online_step(c: &mut ClusterState, obs: &StepObs, config: &InferenceConfig) -> Result<()> {
    let model = chain_model(c, config)?;
    let p = c.inducing.len();
    let mut prev = c.latest.clone();
    if c.online.is_some() {
        if let Some(pen) = &model.pen_a {
            prev = lds::apply_penalty(&prev, pen)?;
        }
    }
    let pred = Gaussian::new(
        &model.a * &prev.mean,
        &model.a * &prev.cov * model.a.transpose() + &model.q,
    );
    let mut post = pred.clone();
    if let Some(pen) = &model.pen_c {
        post = lds::apply_penalty(&post, pen)?;
    }
    post = measurement_update(&model, &post, obs)?;

    let pfac = linalg::cholesky_auto(&pred.cov, "predicted covariance")?;
    let j = pfac.solve(&(&model.a * &prev.cov)).transpose();
    let sm_prev = Gaussian::new(
        &prev.mean + &j * (&post.mean - &pred.mean),
        &prev.cov + &j * (&post.cov - &pred.cov) * j.transpose(),
    );
    let lag = &post.cov * j.transpose();
    let xc = XConditional::new(&model.c, &model.s_eps, Some(obs))?;

    let stats = c.online.get_or_insert_with(|| OnlineStats {
        dynamics: RegressionStats::zeros(p, p),
        emission: RegressionStats::zeros(p, p),
    });
    stats.dynamics.sxx += sm_prev.second_moment();
    stats.dynamics.syx += &lag + &post.mean * sm_prev.mean.transpose();
    stats.dynamics.syy += post.second_moment();
    stats.dynamics.count += 1.0;
    stats.emission.sxx += post.second_moment();
    stats.emission.syx += xc.cross(&post);
    stats.emission.syy += xc.marginal(&post).second_moment();
    stats.emission.count += 1.0;
    c.dynamics = mniw_update(&c.dynamics_prior, &stats.dynamics, stats.dynamics.count)?;
    c.emission = mniw_update(&c.emission_prior, &stats.emission, stats.emission.count)?;
    c.latest = post;
    Ok(())
}

/// Streaming fit over an ordered sequence of segments.
pub fn fit_online(segments: &[Segment], config: &InferenceConfig) -> Result<ModelState> {
    if segments.is_empty() {
        return Err(Error::InvalidArgument("fit_online needs at least one segment".into()));
    }
    let mut f = OnlineFitter::new(config.clone())?;
    for s in segments {
        f.push(s.clone())?;
    }
    f.finish()
}

/// Streaming pass with priors supplied up front (used to initialize the
/// off-line fit).
pub fn fit_online_with_priors(segments: &[Segment], config: &InferenceConfig, priors: Priors) -> Result<ModelState> {
    let mut f = OnlineFitter::with_priors(config.clone(), priors)?;
    for s in segments {
        f.push(s.clone())?;
    }
    f.finish()
}
