//! Box-constrained L-BFGS ascent.
//!
//! Only strictly improving steps are accepted, so the returned value is never
//! below the value at the starting point.

use std::collections::VecDeque;

#[derive(Clone, Debug)]
pub struct AscentOptions {
    pub max_iters: usize,
    /// Stop when the relative improvement of one accepted step falls below this.
    pub rel_tol: f64,
    /// Stop when the projected gradient max-norm falls below this.
    pub grad_tol: f64,
    pub memory: usize,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    /// Largest allowed max-abs step in parameter space.
    pub max_step: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tol: 1e-6,
            grad_tol: 1e-8,
            memory: 8,
            lower: None,
            upper: None,
            max_step: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AscentResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

fn project(x: &mut [f64], opts: &AscentOptions) {
    if let Some(lo) = &opts.lower {
        for (xi, l) in x.iter_mut().zip(lo) {
            *xi = xi.max(*l);
        }
    }
    if let Some(hi) = &opts.upper {
        for (xi, h) in x.iter_mut().zip(hi) {
            *xi = xi.min(*h);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient with components that point out of an active bound zeroed.
fn projected_gradient(x: &[f64], g: &[f64], opts: &AscentOptions) -> Vec<f64> {
    let mut pg = g.to_vec();
    for i in 0..x.len() {
        if let Some(lo) = &opts.lower {
            if x[i] <= lo[i] && pg[i] < 0.0 {
                pg[i] = 0.0;
            }
        }
        if let Some(hi) = &opts.upper {
            if x[i] >= hi[i] && pg[i] > 0.0 {
                pg[i] = 0.0;
            }
        }
    }
    pg
}

/// Maximize `f`, which returns the objective and its gradient.
pub fn maximize<F>(mut f: F, x0: &[f64], opts: &AscentOptions) -> AscentResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0.to_vec();
    project(&mut x, opts);
    let (mut fx, mut gx) = f(&x);
    let initial_value = fx;
    let mut trace = vec![fx];
    if !fx.is_finite() {
        return AscentResult {
            x,
            value: fx,
            initial_value,
            iterations: 0,
            converged: false,
            trace,
        };
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        iterations += 1;
        let pg = projected_gradient(&x, &gx, opts);
        if pg.iter().all(|v| v.is_finite()) && pg.iter().fold(0.0_f64, |m, v| m.max(v.abs())) < opts.grad_tol {
            converged = true;
            break;
        }

        // two-loop recursion on the negated objective, expressed for ascent
        let mut d = pg.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            for di in d.iter_mut() {
                *di *= gamma;
            }
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        if history.is_empty() || dot(&d, &pg) <= 0.0 || d.iter().any(|v| !v.is_finite()) {
            d = pg.clone();
            history.clear();
        }
        let dmax = d.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut step = if dmax > opts.max_step {
            opts.max_step / dmax
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..40 {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            project(&mut xt, opts);
            let dx: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            if dx.iter().all(|v| *v == 0.0) {
                break;
            }
            let (ft, gt) = f(&xt);
            if ft.is_finite() && ft > fx + 1e-4 * dot(&gx, &dx).max(0.0) && gt.iter().all(|v| v.is_finite()) {
                accepted = Some((xt, ft, gt, dx));
                break;
            }
            step *= 0.5;
        }

        let Some((xt, ft, gt, dx)) = accepted else {
            // no improving step along the search direction
            converged = true;
            break;
        };
        // curvature pair for the minimization of -f
        let y: Vec<f64> = gx.iter().zip(&gt).map(|(a, b)| a - b).collect();
        let sy = dot(&dx, &y);
        if sy > 1e-12 {
            history.push_back((dx, y, 1.0 / sy));
            if history.len() > opts.memory {
                history.pop_front();
            }
        }
        let improvement = ft - fx;
        x = xt;
        fx = ft;
        gx = gt;
        trace.push(fx);
        if improvement <= opts.rel_tol * fx.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    AscentResult {
        x,
        value: fx,
        initial_value,
        iterations,
        converged,
        trace,
    }
}

/// Central finite-difference gradient, for low-dimensional objectives.
pub fn numeric_gradient<F>(f: &mut F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let hi = h * x[i].abs().max(1.0);
        xp[i] = x[i] + hi;
        let fp = f(&xp);
        xp[i] = x[i] - hi;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * hi);
    }
    g
}
