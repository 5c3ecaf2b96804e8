//! Assigning held-out segments to a fitted model.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gp::Projection;
use crate::hdp::expected_log_pi;
use crate::inference::assign::{filter_assignment, gaussian_log_zeta};
use crate::inference::state::{relative_segment, ModelState};
use crate::segment::Segment;
use crate::warp::{aligned_score, warp_for_grid, WarpAux};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub cluster: usize,
    pub responsibilities: Vec<f64>,
    /// Predictive log-density of the segment under each cluster.
    pub log_likelihoods: Vec<f64>,
    /// Warped times (relative to the segment start) under `cluster`.
    pub warped_times: Vec<f64>,
}

/// Score each segment against every cluster's current morphology and filter
/// the assignments forward, continuing from the last fitted segment.
pub fn predict(model: &ModelState, segments: &[Segment]) -> Result<Vec<Prediction>> {
    model.validate()?;
    let config = &model.config;
    let beliefs = model
        .clusters
        .iter()
        .map(|c| c.current_x(config))
        .collect::<Result<Vec<_>>>()?;
    let elog = expected_log_pi(&model.transitions);
    let mut prev: Option<Vec<f64>> =
        (model.resp.n() > 0).then(|| model.resp.r.row(model.resp.n() - 1).iter().copied().collect());
    let mut out = Vec::with_capacity(segments.len());
    for raw in segments {
        raw.validate()?;
        let seg = relative_segment(raw);
        let y = DVector::from_column_slice(&seg.y);
        let scored = model
            .clusters
            .par_iter()
            .zip(&beliefs)
            .map(|(c, b)| {
                if config.warps {
                    return aligned_score(&seg, b, &c.inducing, &config.vartheta, &config.warp_options());
                }
                let proj = Projection::onto(&c.inducing, &seg.t)?;
                let (m, cov) = proj.push(&b.mean, &b.cov);
                Ok((WarpAux::identity(seg.len()), gaussian_log_zeta(&y, &m, &cov, 0.0)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let ll: Vec<f64> = scored.iter().map(|s| s.1).collect();
        let (r, _, _) = filter_assignment(prev.as_deref(), &ll, &elog);
        let cluster = r
            .iter()
            .enumerate()
            .fold(0, |best, (k, v)| if *v > r[best] { k } else { best });
        out.push(Prediction {
            id: raw.id.clone(),
            cluster,
            responsibilities: r.clone(),
            log_likelihoods: ll,
            warped_times: warp_for_grid(&scored[cluster].0, &seg.t).times(),
        });
        prev = Some(r);
    }
    Ok(out)
}
