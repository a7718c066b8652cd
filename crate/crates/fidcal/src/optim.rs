//! Limited-memory BFGS with Armijo backtracking.
//!
//! Private workhorse for the likelihood fits. The objective closure
//! returns the value and gradient together; a non-finite value is treated
//! as "outside the domain" and rejected by the line search rather than
//! propagated.

use crate::error::{Error, Result};

pub(crate) struct OptimOptions {
    pub max_iter: usize,
    /// Convergence on the gradient infinity norm.
    pub grad_tol: f64,
    /// Number of curvature pairs retained.
    pub memory: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-8,
            memory: 8,
        }
    }
}

pub(crate) struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub n_iter: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimize `f` from `x0`. Stops when the gradient infinity norm falls
/// below `grad_tol`, progress stalls, or `max_iter` is hit; the best point
/// seen is always returned, with `converged` reporting which way it ended.
pub(crate) fn minimize<F>(mut f: F, x0: &[f64], opts: &OptimOptions) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() {
        return Err(Error::Numerical(
            "objective is not finite at the starting point".into(),
        ));
    }

    // Curvature history, newest last.
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    for iter in 0..opts.max_iter {
        if inf_norm(&g) <= opts.grad_tol {
            return Ok(OptimResult {
                x,
                f: fx,
                n_iter: iter,
                converged: true,
            });
        }

        // Two-loop recursion for d = -H g.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let m = s_hist.len();
        let mut alphas = vec![0.0; m];
        for k in (0..m).rev() {
            let a = rho_hist[k] * dot(&s_hist[k], &d);
            alphas[k] = a;
            for (di, yi) in d.iter_mut().zip(&y_hist[k]) {
                *di -= a * yi;
            }
        }
        if m > 0 {
            let k = m - 1;
            let gamma = dot(&s_hist[k], &y_hist[k]) / dot(&y_hist[k], &y_hist[k]);
            for di in d.iter_mut() {
                *di *= gamma;
            }
        }
        for k in 0..m {
            let b = rho_hist[k] * dot(&y_hist[k], &d);
            for (di, si) in d.iter_mut().zip(&s_hist[k]) {
                *di += (alphas[k] - b) * si;
            }
        }

        let mut gd = dot(&g, &d);
        if gd >= 0.0 {
            // Stale curvature produced a non-descent direction.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = g.iter().map(|v| -v).collect();
            gd = dot(&g, &d);
        }

        // Backtracking Armijo search; the first iteration limits the raw
        // steepest-descent step to unit length.
        let mut step = if m == 0 {
            (1.0 / inf_norm(&d).max(1.0)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..50 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = f(&xt);
            if ft.is_finite() && ft <= fx + 1e-4 * step * gd {
                accepted = Some((xt, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xt, ft, gt)) = accepted else {
            // No acceptable step along a descent direction: we are at
            // numerical resolution, call it converged.
            return Ok(OptimResult {
                x,
                f: fx,
                n_iter: iter,
                converged: true,
            });
        };

        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-10 * inf_norm(&s) * inf_norm(&yv) {
            if s_hist.len() == opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            rho_hist.push(1.0 / sy);
            s_hist.push(s);
            y_hist.push(yv);
        }

        let stalled = (fx - ft).abs() <= 1e-14 * (1.0 + fx.abs());
        x = xt;
        fx = ft;
        g = gt;
        if stalled {
            return Ok(OptimResult {
                x,
                f: fx,
                n_iter: iter + 1,
                converged: inf_norm(&g) <= 1e3 * opts.grad_tol,
            });
        }
    }
    Ok(OptimResult {
        x,
        f: fx,
        n_iter: opts.max_iter,
        converged: false,
    })
}
