//! Dense joint-Gaussian reference for the Kalman passes.

use hdpgpc::lds::{
    kalman_backward, kalman_forward, mniw_update, ChainModel, Gaussian, MNIWPosterior, RegressionStats, StepObs,
    Weighting,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{condition, max_abs, max_abs_vec, random_matrix, random_spd, random_vector, rng};

pub struct Instance {
    pub model: ChainModel,
    pub obs: Vec<StepObs>,
}

pub fn random_instance(r: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize, q: usize, weighted: bool) -> Instance {
    let model = ChainModel {
        init: Gaussian::new(random_vector(r, d, 1.0), random_spd(r, d, 0.3)),
        a: random_matrix(r, d, d, 0.8),
        q: random_spd(r, d, 0.2) * 0.3,
        c: DMatrix::identity(d, d) + random_matrix(r, d, d, 0.3),
        s_eps: random_spd(r, d, 0.1) * 0.2,
        pen_a: None,
        pen_c: None,
        weighting: Weighting::Likelihood,
    };
    let obs = (0..n)
        .map(|_| StepObs {
            khat: random_matrix(r, q, d, 1.0),
            resid: random_spd(r, q, 0.2) * 0.3,
            y: random_vector(r, q, 2.0),
            r: if weighted { r.random_range(0.2..1.0) } else { 1.0 },
        })
        .collect();
    Instance { model, obs }
}

/// Joint Gaussian over (f_0..f_N, y_1..y_N) built from the linear model
/// y_n = K̂(C f_n + e_n) + v_n / √r, then conditioned on the observations.
pub fn dense_chain(inst: &Instance) -> (DVector<f64>, DMatrix<f64>) {
    let m = &inst.model;
    let d = m.dim();
    let n = inst.obs.len();
    let q = inst.obs[0].y.len();
    let nf = d * (n + 1);
    let total = nf + q * n;
    // express every variable as a linear map of independent standard pieces
    // ξ = (f_0, w_1..w_N, e_1..e_N, v_1..v_N), each with its own covariance
    let n_xi = d + d * n + d * n + q * n;
    let mut lin = DMatrix::zeros(total, n_xi);
    let mut xi_cov = DMatrix::zeros(n_xi, n_xi);
    let mut mean = DVector::zeros(total);
    xi_cov.view_mut((0, 0), (d, d)).copy_from(&m.init.cov);
    lin.view_mut((0, 0), (d, d)).copy_from(&DMatrix::identity(d, d));
    mean.rows_mut(0, d).copy_from(&m.init.mean);
    for i in 1..=n {
        let prev = lin.rows((i - 1) * d, d).into_owned();
        let mut row = &m.a * prev;
        let w0 = d + (i - 1) * d;
        row.view_mut((0, w0), (d, d)).copy_from(&DMatrix::identity(d, d));
        xi_cov.view_mut((w0, w0), (d, d)).copy_from(&m.q);
        lin.rows_mut(i * d, d).copy_from(&row);
        let pm = mean.rows((i - 1) * d, d).into_owned();
        mean.rows_mut(i * d, d).copy_from(&(&m.a * pm));
    }
    for i in 1..=n {
        let o = &inst.obs[i - 1];
        let f_row = lin.rows(i * d, d).into_owned();
        let mut row = &o.khat * &m.c * f_row;
        let e0 = d + d * n + (i - 1) * d;
        let v0 = d + 2 * d * n + (i - 1) * q;
        row.view_mut((0, e0), (q, d)).copy_from(&o.khat);
        row.view_mut((0, v0), (q, q)).copy_from(&DMatrix::identity(q, q));
        xi_cov.view_mut((e0, e0), (d, d)).copy_from(&m.s_eps);
        xi_cov.view_mut((v0, v0), (q, q)).copy_from(&(&o.resid / o.r));
        lin.rows_mut(nf + (i - 1) * q, q).copy_from(&row);
        let fm = mean.rows(i * d, d).into_owned();
        mean.rows_mut(nf + (i - 1) * q, q).copy_from(&(&o.khat * &m.c * fm));
    }
    let cov = &lin * xi_cov * lin.transpose();
    let y = DVector::from_iterator(q * n, inst.obs.iter().flat_map(|o| o.y.iter().copied()));
    condition(&mean, &cov, nf, &y)
}

pub fn check(inst: &Instance, tol: f64) {
    let obs: Vec<Option<StepObs>> = inst.obs.iter().cloned().map(Some).collect();
    let fwd = kalman_forward(&inst.model, &obs).unwrap();
    let sm = kalman_backward(&inst.model, &fwd).unwrap();
    let (mean, cov) = dense_chain(inst);
    let d = inst.model.dim();
    let n = inst.obs.len();
    for i in 0..=n {
        let m = mean.rows(i * d, d).into_owned();
        let c = cov.view((i * d, i * d), (d, d)).into_owned();
        let scale = 1.0 + c.abs().max() + m.abs().max();
        assert!(max_abs_vec(&sm.smoothed[i].mean, &m) <= tol * scale, "mean step {i}");
        assert!(max_abs(&sm.smoothed[i].cov, &c) <= tol * scale, "cov step {i}");
        if i >= 1 {
            let lag = cov.view((i * d, (i - 1) * d), (d, d)).into_owned();
            assert!(max_abs(&sm.lag_one[i - 1], &lag) <= tol * scale, "lag step {i}");
        }
    }
    // the final filtered belief equals the final smoothed one
    let last = &fwd.filtered[n];
    assert!(max_abs_vec(&last.mean, &sm.smoothed[n].mean) <= 1e-12);
    // filtered beliefs equal the dense posterior given the prefix
    for k in 1..=n {
        let prefix = Instance {
            model: inst.model.clone(),
            obs: inst.obs[..k].to_vec(),
        };
        let (pm, pc) = dense_chain(&prefix);
        let m = pm.rows(k * d, d).into_owned();
        let c = pc.view((k * d, k * d), (d, d)).into_owned();
        let scale = 1.0 + c.abs().max() + m.abs().max();
        assert!(max_abs_vec(&fwd.filtered[k].mean, &m) <= tol * scale);
        assert!(max_abs(&fwd.filtered[k].cov, &c) <= tol * scale);
    }
}

/// Scalar chain, 10 steps: the conjugate posterior equals ordinary least
/// squares on the data stacked under a prior pseudo-row √V·(1, M).
pub fn check_mniw(seed: u64, trials: usize) {
    let mut r = rng(seed);
    for _ in 0..trials {
        let (m0, v0, s0, nu0) = (
            r.random_range(-1.0..1.0),
            r.random_range(0.1..3.0),
            r.random_range(0.1..2.0),
            3.0,
        );
        let mut x = vec![r.random_range(-1.0..1.0)];
        for _ in 0..10 {
            let prev = *x.last().unwrap();
            x.push(0.8 * prev + r.random_range(-0.3..0.3));
        }
        let (xs, ys) = (&x[..10], &x[1..]);
        let prior = MNIWPosterior::new(
            DMatrix::from_element(1, 1, m0),
            DMatrix::from_element(1, 1, v0),
            DMatrix::from_element(1, 1, s0),
            nu0,
        )
        .unwrap();
        let stats = RegressionStats {
            sxx: DMatrix::from_element(1, 1, xs.iter().map(|v| v * v).sum()),
            syx: DMatrix::from_element(1, 1, xs.iter().zip(ys).map(|(a, b)| a * b).sum()),
            syy: DMatrix::from_element(1, 1, ys.iter().map(|v| v * v).sum()),
            count: 10.0,
        };
        let post = mniw_update(&prior, &stats, 10.0).unwrap();

        let mut design = vec![v0.sqrt()];
        design.extend_from_slice(xs);
        let mut target = vec![v0.sqrt() * m0];
        target.extend_from_slice(ys);
        let xm = DMatrix::from_column_slice(11, 1, &design);
        let ym = DVector::from_column_slice(&target);
        let xtx = (xm.transpose() * &xm)[(0, 0)];
        let m_ls = (xm.transpose() * &ym)[(0, 0)] / xtx;
        let rss: f64 = (&ym - &xm * m_ls).iter().map(|e| e * e).sum();
        assert!((post.m[(0, 0)] - m_ls).abs() <= 1e-9);
        assert!((post.v[(0, 0)] - xtx).abs() <= 1e-9);
        assert!((post.s[(0, 0)] - (s0 + rss)).abs() <= 1e-9);
        assert_eq!(post.dof, 10.0 + nu0);
    }
}
