//! Synthetic segment sets drawn from a switching, drifting, warped
//! morphology model with known labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::Segment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub k_true: usize,
    pub n: usize,
    /// Samples per segment.
    pub q: usize,
    /// Observation noise standard deviation.
    pub noise: f64,
    /// Largest warp displacement, in grid steps.
    pub warp_strength: f64,
    /// Standard deviation of the per-visit random walk on morphology
    /// coefficients.
    pub drift: f64,
    /// Probability of staying in the same cluster between segments.
    pub stay: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            k_true: 3,
            n: 60,
            q: 40,
            noise: 0.05,
            warp_strength: 1.0,
            drift: 0.02,
            stay: 0.8,
            seed: 0,
        }
    }
}

/// Generated segments plus the ground truth behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub segments: Vec<Segment>,
    pub labels: Vec<usize>,
    /// Noise-free, unwarped latent curve of each segment's cluster at the
    /// time it was emitted.
    pub latent: Vec<Vec<f64>>,
    /// Warped sampling positions (relative grid units) of each segment.
    pub warps: Vec<Vec<f64>>,
}

const BASIS: usize = 8;
const WIDTH: f64 = 0.09;

fn basis(u: f64) -> [f64; BASIS] {
    let mut b = [0.0; BASIS];
    for (i, v) in b.iter_mut().enumerate() {
        let c = (i as f64 + 0.5) / BASIS as f64;
        *v = (-0.5 * ((u - c) / WIDTH).powi(2)).exp();
    }
    b
}

fn curve(coef: &[f64], u: f64) -> f64 {
    basis(u).iter().zip(coef).map(|(b, c)| b * c).sum()
}

fn validate(spec: &SynthSpec) -> Result<()> {
    if spec.k_true == 0 || spec.n == 0 || spec.q < 2 {
        return Err(Error::InvalidArgument("k_true, n must be >= 1 and q >= 2".into()));
    }
    for (name, v) in [
        ("noise", spec.noise),
        ("warp_strength", spec.warp_strength),
        ("drift", spec.drift),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0")));
        }
    }
    if !(0.0..=1.0).contains(&spec.stay) {
        return Err(Error::InvalidArgument("stay must lie in [0, 1]".into()));
    }
    Ok(())
}

fn sample_labels(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = spec.k_true;
    let mut labels = Vec::with_capacity(spec.n);
    let mut cur = rng.random_range(0..k);
    for i in 0..spec.n {
        if i > 0 && k > 1 && rng.random::<f64>() >= spec.stay {
            let step = rng.random_range(1..k);
            cur = (cur + step) % k;
        }
        labels.push(cur);
    }
    labels
}

/// Draw a labelled segment set. Deterministic for a given spec.
pub fn synth_generate_full(spec: &SynthSpec) -> Result<SynthData> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.k_true;
    let q = spec.q;

    // templates: a small random background plus one dominant bump per
    // cluster; bump positions are spread over the span so that no warp
    // near the identity maps one cluster onto another
    let mut order: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let bg = Normal::new(0.0, 0.3).expect("valid normal");
    let mut coef: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let mut v: Vec<f64> = (0..BASIS).map(|_| bg.sample(&mut rng)).collect();
            let pos = order[c];
            let slot = (((pos as f64 + 0.5) * BASIS as f64 / k as f64) - 0.5).round() as usize;
            let sign = if pos.is_multiple_of(2) { 1.0 } else { -1.0 };
            v[slot.min(BASIS - 1)] += sign * 2.5;
            v
        })
        .collect();

    let mut labels = sample_labels(spec, &mut rng);
    if spec.n >= 3 * k {
        for _ in 0..1000 {
            if (0..k).all(|c| labels.iter().filter(|l| **l == c).count() >= 3) {
                break;
            }
            labels = sample_labels(spec, &mut rng);
        }
    }

    let max_disp = spec.warp_strength.min(0.9 * (q - 1) as f64 / std::f64::consts::PI);
    let drift = Normal::new(0.0, spec.drift.max(0.0)).expect("valid normal");
    let noise = Normal::new(0.0, spec.noise).expect("valid normal");
    let mut segments = Vec::with_capacity(spec.n);
    let mut latent = Vec::with_capacity(spec.n);
    let mut warps = Vec::with_capacity(spec.n);
    for (n, &c) in labels.iter().enumerate() {
        if spec.drift > 0.0 {
            for v in coef[c].iter_mut() {
                *v += drift.sample(&mut rng);
            }
        }
        let amp = if max_disp > 0.0 {
            rng.random_range(-1.0..=1.0)
        } else {
            0.0
        };
        let span = (q - 1) as f64;
        let g: Vec<f64> = (0..q)
            .map(|j| {
                let u = j as f64 / span;
                j as f64 + max_disp * amp * (std::f64::consts::PI * u).sin()
            })
            .collect();
        let clean: Vec<f64> = (0..q).map(|j| curve(&coef[c], j as f64 / span)).collect();
        let y: Vec<f64> = g
            .iter()
            .map(|gj| {
                let e = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                curve(&coef[c], gj / span) + e
            })
            .collect();
        let offset = (n * q) as f64;
        let t: Vec<f64> = (0..q).map(|j| offset + j as f64).collect();
        segments.push(Segment::new(format!("s{n:04}"), t, y, Some(format!("c{c}")))?);
        latent.push(clean);
        warps.push(g);
    }
    Ok(SynthData {
        segments,
        labels,
        latent,
        warps,
    })
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Segment>> {
    Ok(synth_generate_full(spec)?.segments)
}
