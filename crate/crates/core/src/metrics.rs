//! Clustering evaluation: purity, adjusted Rand index, occupied-cluster
//! counts and the JSON report written after every fit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{FitMode, ModelState, Prediction};
use crate::segment::Segment;

/// One segment's predicted cluster and (optional) ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledAssignment {
    pub cluster: usize,
    pub label: Option<String>,
}

/// Size-weighted majority-label fraction, Σ_k max_l |cluster_k ∩ l| / N.
pub fn purity(assignments: &[LabeledAssignment]) -> Result<f64> {
    if assignments.is_empty() {
        return Err(Error::InvalidArgument("purity of an empty assignment set".into()));
    }
    let mut table: BTreeMap<usize, BTreeMap<&str, usize>> = BTreeMap::new();
    for (i, a) in assignments.iter().enumerate() {
        let label = a
            .label
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("segment {i} has no label")))?;
        *table.entry(a.cluster).or_default().entry(label).or_default() += 1;
    }
    let hits: usize = table.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(hits as f64 / assignments.len() as f64)
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two partitions given as label sequences.
pub fn adjusted_rand_index<A: Ord, B: Ord>(pred: &[A], truth: &[B]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "partitions have different lengths ({} vs {})",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut cells: BTreeMap<(&A, &B), usize> = BTreeMap::new();
    let mut rows: BTreeMap<&A, usize> = BTreeMap::new();
    let mut cols: BTreeMap<&B, usize> = BTreeMap::new();
    for (a, b) in pred.iter().zip(truth) {
        *cells.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: f64 = cells.values().map(|v| choose2(*v)).sum();
    let sa: f64 = rows.values().map(|v| choose2(*v)).sum();
    let sb: f64 = cols.values().map(|v| choose2(*v)).sum();
    let expected = sa * sb / choose2(n);
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-12 {
        // both partitions trivial in the same way
        return Ok(if (index - expected).abs() < 1e-12 { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Clusters whose expected mass reaches the model's occupancy threshold.
/// A model that has seen no data counts all of its clusters.
pub fn cluster_count(model: &ModelState) -> usize {
    if model.resp.n() == 0 {
        return model.k();
    }
    model.occupied().len()
}

fn label_scores(assignments: &[usize], segments: &[Segment]) -> Result<(Option<f64>, Option<f64>)> {
    let labels: Option<Vec<&str>> = segments.iter().map(|s| s.label.as_deref()).collect();
    match labels {
        Some(l) if !l.is_empty() && l.len() == assignments.len() => {
            let la: Vec<LabeledAssignment> = assignments
                .iter()
                .zip(&l)
                .map(|(c, s)| LabeledAssignment {
                    cluster: *c,
                    label: Some(s.to_string()),
                })
                .collect();
            Ok((Some(purity(&la)?), Some(adjusted_rand_index(assignments, &l)?)))
        }
        _ => Ok((None, None)),
    }
}

/// Machine-readable summary of a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: FitMode,
    pub n_segments: usize,
    pub k: usize,
    pub cluster_count: usize,
    /// Expected number of segments per cluster.
    pub cluster_sizes: Vec<f64>,
    pub assignments: Vec<usize>,
    pub purity: Option<f64>,
    pub ari: Option<f64>,
    pub elbo: Option<f64>,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl MetricsReport {
    /// Purity and ARI are filled in when every segment carries a label.
    pub fn new(model: &ModelState, segments: &[Segment]) -> Result<Self> {
        let assignments = model.assignments();
        let (purity, ari) = label_scores(&assignments, segments)?;
        Ok(Self {
            mode: model.mode,
            n_segments: model.resp.n(),
            k: model.k(),
            cluster_count: cluster_count(model),
            cluster_sizes: model.resp.masses(),
            assignments,
            purity,
            ari,
            elbo: model.elbo.map(|e| e.total).or_else(|| model.elbo_trace.last().copied()),
            elbo_trace: model.elbo_trace.clone(),
            iterations: model.iterations,
            converged: model.converged,
        })
    }

    /// Replace the fitted assignments by predictions on other segments.
    pub fn fill_predictions(&mut self, preds: &[Prediction], segments: &[Segment]) -> Result<()> {
        if preds.len() != segments.len() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} segments",
                preds.len(),
                segments.len()
            )));
        }
        self.assignments = preds.iter().map(|p| p.cluster).collect();
        self.n_segments = preds.len();
        let mut sizes = vec![0.0; self.k];
        for p in preds {
            for (s, r) in sizes.iter_mut().zip(&p.responsibilities) {
                *s += r;
            }
        }
        self.cluster_sizes = sizes;
        (self.purity, self.ari) = label_scores(&self.assignments, segments)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
