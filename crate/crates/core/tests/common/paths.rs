//! Exhaustive path enumeration for the assignment chain.

use nalgebra::DMatrix;

/// Path enumeration over all K^N assignments.
pub fn enumerate(ll: &DMatrix<f64>, e: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>, f64) {
    let (n, k) = ll.shape();
    let mut paths = Vec::new();
    for code in 0..k.pow(n as u32) {
        let mut s = vec![0; n];
        let mut c = code;
        for v in s.iter_mut() {
            *v = c % k;
            c /= k;
        }
        let mut score = e[(0, s[0])] + ll[(0, s[0])];
        for i in 1..n {
            score += e[(s[i - 1] + 1, s[i])] + ll[(i, s[i])];
        }
        paths.push((s, score));
    }
    let mx = paths.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = paths.iter().map(|p| (p.1 - mx).exp()).sum();
    let mut r = DMatrix::zeros(n, k);
    let mut xi = vec![DMatrix::zeros(k, k); n - 1];
    let mut h = 0.0;
    for (s, score) in &paths {
        let p = (score - mx).exp() / z;
        for i in 0..n {
            r[(i, s[i])] += p;
        }
        for i in 1..n {
            xi[i - 1][(s[i - 1], s[i])] += p;
        }
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    (r, xi, h)
}
