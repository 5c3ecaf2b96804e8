//! Linear reconstruction of a slow driving signal (respiration) from the
//! per-segment warps, r_n = M_w t_n^w.

use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RespirationModel {
    /// Output-window length × warp length.
    #[serde(with = "serde_mat::matrix")]
    pub m_w: DMatrix<f64>,
    pub train_pairs: usize,
    pub rank: usize,
}

impl RespirationModel {
    pub fn input_dim(&self) -> usize {
        self.m_w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.m_w.nrows()
    }

    /// M_w·t^w for one window.
    pub fn apply(&self, warp: &[f64]) -> Result<Vec<f64>> {
        if warp.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "warp has length {}, model expects {}",
                warp.len(),
                self.input_dim()
            )));
        }
        Ok((&self.m_w * DVector::from_column_slice(warp)).iter().copied().collect())
    }
}

fn stack(cols: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let d = cols[0].len();
    if d == 0 || cols.iter().any(|c| c.len() != d) {
        return Err(Error::Dimension(format!(
            "{what} windows must all have the same non-zero length"
        )));
    }
    Ok(DMatrix::from_fn(d, cols.len(), |i, j| cols[j][i]))
}

/// Least-squares M_w over training pairs; minimum-norm when the system is
/// underdetermined.
pub fn respiration_fit(warps: &[Vec<f64>], resp: &[Vec<f64>]) -> Result<RespirationModel> {
    if warps.is_empty() || warps.len() != resp.len() {
        return Err(Error::Dimension(format!(
            "need matching, non-empty training pairs ({} warps, {} windows)",
            warps.len(),
            resp.len()
        )));
    }
    let t = stack(warps, "warp")?;
    let r = stack(resp, "respiration")?;
    let svd = t.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-12 * t.nrows().max(t.ncols()) as f64;
    let rank = svd.singular_values.iter().filter(|s| **s > eps).count();
    let pinv = svd
        .pseudo_inverse(eps)
        .map_err(|e| Error::InvalidArgument(format!("pseudo-inverse failed: {e}")))?;
    Ok(RespirationModel {
        m_w: r * pinv,
        train_pairs: warps.len(),
        rank,
    })
}

/// Centered moving average; the window shrinks at the edges.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 || x.is_empty() {
        return x.to_vec();
    }
    let half = window / 2;
    let mut prefix = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Per-window predictions stitched end to end and smoothed.
pub fn respiration_predict(model: &RespirationModel, warps: &[Vec<f64>], smoothing: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(warps.len() * model.output_dim());
    for w in warps {
        out.extend(model.apply(w)?);
    }
    Ok(moving_average(&out, smoothing))
}

/// Period of the strongest non-constant frequency, in units of `dt`.
/// The peak is refined by parabolic interpolation on the magnitude.
pub fn dominant_period(signal: &[f64], dt: f64) -> Result<f64> {
    let n = signal.len();
    if n < 4 {
        return Err(Error::InvalidArgument(
            "need at least 4 samples for a period estimate".into(),
        ));
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let len = (4 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = signal
        .iter()
        .map(|v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(len)
        .collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let mag: Vec<f64> = buf[..len / 2].iter().map(|c| c.norm()).collect();
    // skip the bins blurred into DC by the zero padding
    let start = (len / n).max(1);
    let (k, _) =
        mag.iter().enumerate().skip(start).fold(
            (start, f64::NEG_INFINITY),
            |best, (i, v)| if *v > best.1 { (i, *v) } else { best },
        );
    let mut kf = k as f64;
    if k > 0 && k + 1 < mag.len() {
        let (a, b, c) = (mag[k - 1], mag[k], mag[k + 1]);
        let denom = a - 2.0 * b + c;
        if denom.abs() > 0.0 {
            kf += 0.5 * (a - c) / denom;
        }
    }
    Ok(len as f64 / kf * dt)
}

/// Pearson correlation.
pub fn correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Dimension("correlation needs two equal-length series".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    Ok(sab / (saa * sbb).sqrt())
}
