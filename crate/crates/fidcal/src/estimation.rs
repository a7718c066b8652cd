//! Likelihood and point estimation.
//!
//! The log-likelihood of the calibration model has no closed form at
//! nonzero concentrations: the lognormal recovery effect must be
//! integrated out of every observation,
//!
//! ```text
//! p(y_ijk) = E_u[ phi(y_ijk; alpha_i + beta_i x_j exp(sigma_eta u), sigma_eps) ]
//! ```
//!
//! with `u ~ N(0,1)`. [`loglik`] evaluates the integral per observation by
//! Gauss-Hermite quadrature recentered at the integrand's peak (blank
//! observations use the exact normal density), [`loglik_gradient`] adds
//! the analytic score, and [`fit_mle`] maximizes over
//! `(alpha_i, beta_i, log sigma_eta, log sigma_eps)` by L-BFGS on an
//! internally standardized response scale. Standard errors come from
//! inverting a finite-difference observed-information matrix in the
//! natural parameterization.
//!
//! Closed-form method-of-moments estimators complement the MLE: blank
//! replicates give the intercepts and the additive error, and replicated
//! nonzero cells give `sigma_eta` through the variance growth law. They
//! serve as fit initializers, as the plug-in `sigma_eta` for the fiducial
//! pivots, and as the basis of the conservative moment-based intervals.

use serde::{Deserialize, Serialize};

use crate::data::InterlabDataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::optim::{minimize, OptimOptions};
use crate::quadrature::GaussHermite;
use crate::stats::{mean, sd};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Minimum admitted standard deviation, relative to the response scale.
/// Keeps the log-scale optimizer off the singular boundary.
const SIGMA_FLOOR: f64 = 1e-10;

/// Log-density of one response `y` of lab `lab` at concentration `x`.
///
/// Degenerate boundaries are handled exactly: with `sigma_eps == 0` the
/// blank density is a point mass (log-density is an infinite sentinel)
/// and the nonzero-level density reduces to a one-dimensional change of
/// variables of the recovery effect.
pub fn response_log_density(
    params: &ModelParams,
    lab: usize,
    x: f64,
    y: f64,
    quad: &GaussHermite,
) -> Result<f64> {
    params.validate()?;
    if lab >= params.n_labs() {
        return Err(Error::Config(format!(
            "lab index {lab} out of range for {} labs",
            params.n_labs()
        )));
    }
    if !(x.is_finite() && x >= 0.0) {
        return Err(Error::Config(format!(
            "concentration must be finite and nonnegative, got {x}"
        )));
    }
    let eng = LoglikEngine::new(params, quad);
    let mut scratch = vec![0.0; quad.order()];
    Ok(eng.log_density(lab, x, y, &mut scratch))
}

/// Log-likelihood of a dataset under `params`.
pub fn loglik(data: &InterlabDataset, params: &ModelParams, quad: &GaussHermite) -> Result<f64> {
    check_dims(data, params)?;
    let eng = LoglikEngine::new(params, quad);
    let mut scratch = vec![0.0; quad.order()];
    let mut total = 0.0;
    for (i, j, reps) in data.cells() {
        let x = data.concentrations()[j];
        for &y in reps {
            total += eng.log_density(i, x, y, &mut scratch);
            if total == f64::NEG_INFINITY {
                return Ok(total);
            }
        }
    }
    Ok(total)
}

/// Log-likelihood together with its gradient in the natural order
/// `[alpha_1..alpha_q, beta_1..beta_q, sigma_eta, sigma_eps]`.
///
/// Requires strictly positive standard deviations.
pub fn loglik_gradient(
    data: &InterlabDataset,
    params: &ModelParams,
    quad: &GaussHermite,
) -> Result<(f64, Vec<f64>)> {
    check_dims(data, params)?;
    if params.sigma_eps <= 0.0 {
        return Err(Error::Config(
            "the score requires sigma_eps > 0".into(),
        ));
    }
    let q = params.n_labs();
    let eng = LoglikEngine::new(params, quad);
    let mut total = 0.0;
    let mut grad = vec![0.0; 2 * q + 2];
    let mut node_terms = vec![0.0; quad.order()];
    for (i, j, reps) in data.cells() {
        let x = data.concentrations()[j];
        for &y in reps {
            total += eng.log_density_grad(i, x, y, &mut grad, &mut node_terms);
        }
    }
    Ok((total, grad))
}

/// Per-evaluation state shared across observations.
///
/// Nonzero-level densities are integrals over the latent recovery draw
/// `u`. A fixed Gauss-Hermite rule is inaccurate here: at large `x` the
/// integrand can be a bump much narrower than the node spacing. Each
/// observation's rule is therefore recentered at the integrand's peak and
/// rescaled by its curvature before the nodes are applied, which keeps a
/// moderate order accurate across the whole parameter range and is exact
/// when `sigma_eta == 0`.
pub(crate) struct LoglikEngine<'a> {
    params: &'a ModelParams,
    quad: &'a GaussHermite,
}

impl<'a> LoglikEngine<'a> {
    pub(crate) fn new(params: &'a ModelParams, quad: &'a GaussHermite) -> Self {
        Self { params, quad }
    }

    /// Log-integrand `g(u) = -u^2/2 + ln phi(y; mu(u), sigma_eps)` and its
    /// first two derivatives, with `mu(u) = alpha + beta x exp(sigma_eta u)`.
    #[inline]
    fn log_integrand(&self, lab: usize, x: f64, y: f64, u: f64) -> (f64, f64, f64) {
        let p = self.params;
        let (a, b, sn, se) = (p.alpha[lab], p.beta[lab], p.sigma_eta, p.sigma_eps);
        let e = (sn * u).exp();
        let mu = a + b * x * e;
        let d = y - mu;
        let mp = b * x * sn * e;
        let mpp = mp * sn;
        let inv_var = 1.0 / (se * se);
        let g = -0.5 * u * u - 0.5 * d * d * inv_var - se.ln() - LN_SQRT_2PI;
        let g1 = -u + d * mp * inv_var;
        let g2 = -1.0 + (d * mpp - mp * mp) * inv_var;
        (g, g1, g2)
    }

    /// Peak location and curvature scale of the log-integrand, by damped
    /// Newton from the prior center.
    fn recenter(&self, lab: usize, x: f64, y: f64) -> (f64, f64) {
        let mut u = 0.0;
        let (mut g, mut g1, mut g2) = self.log_integrand(lab, x, y, u);
        for _ in 0..60 {
            if !(g.is_finite() && g1.is_finite()) {
                return (0.0, 1.0);
            }
            if g1.abs() <= 1e-10 * (1.0 + u.abs()) {
                break;
            }
            let mut step = if g2 < -1e-12 { -g1 / g2 } else { g1.signum() };
            step = step.clamp(-2.0, 2.0);
            let mut lambda = 1.0;
            let mut moved = false;
            for _ in 0..30 {
                let un = u + lambda * step;
                let (gn, g1n, g2n) = self.log_integrand(lab, x, y, un);
                if gn > g {
                    (u, g, g1, g2) = (un, gn, g1n, g2n);
                    moved = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !moved {
                break;
            }
        }
        let sh = if g2 < -1e-8 { (-g2).sqrt().recip() } else { 1.0 };
        (u, sh.min(100.0))
    }

    pub(crate) fn log_density(&self, lab: usize, x: f64, y: f64, node_terms: &mut [f64]) -> f64 {
        let p = self.params;
        let (a, se) = (p.alpha[lab], p.sigma_eps);
        if se == 0.0 {
            return self.degenerate_log_density(lab, x, y);
        }
        if x == 0.0 {
            let r = (y - a) / se;
            return -0.5 * r * r - se.ln() - LN_SQRT_2PI;
        }
        let (uh, sh) = self.recenter(lab, x, y);
        let nodes = self.quad.nodes();
        let mut t_max = f64::NEG_INFINITY;
        for (m, &lw) in self.quad.log_weights().iter().enumerate() {
            let (g, _, _) = self.log_integrand(lab, x, y, uh + sh * nodes[m]);
            let t = lw + g + 0.5 * nodes[m] * nodes[m];
            t_max = t_max.max(t);
            node_terms[m] = t;
        }
        if !t_max.is_finite() {
            return f64::NEG_INFINITY;
        }
        let s: f64 = node_terms.iter().map(|&t| (t - t_max).exp()).sum();
        sh.ln() + t_max + s.ln()
    }

    /// Exact limiting density at `sigma_eps == 0`.
    fn degenerate_log_density(&self, lab: usize, x: f64, y: f64) -> f64 {
        let p = self.params;
        let (a, b, sn) = (p.alpha[lab], p.beta[lab], p.sigma_eta);
        if x == 0.0 || sn == 0.0 || b == 0.0 {
            // Point mass at the deterministic response.
            let mu = a + b * x * 1.0;
            return if y == mu {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            };
        }
        let ratio = (y - a) / (b * x);
        if ratio <= 0.0 {
            return f64::NEG_INFINITY;
        }
        // y = a + b x exp(sn u): one-to-one in u.
        let u = ratio.ln() / sn;
        -0.5 * u * u - LN_SQRT_2PI - sn.ln() - (y - a).abs().ln()
    }

    /// Adds this observation's score to `grad` and returns its log-density.
    ///
    /// The score is the posterior expectation of the per-node score under
    /// the same recentered rule as [`Self::log_density`]; the dependence of
    /// the recentering itself on the parameters only contributes at the
    /// order of the quadrature error.
    fn log_density_grad(
        &self,
        lab: usize,
        x: f64,
        y: f64,
        grad: &mut [f64],
        node_terms: &mut [f64],
    ) -> f64 {
        let p = self.params;
        let q = p.n_labs();
        let (a, b, sn, se) = (p.alpha[lab], p.beta[lab], p.sigma_eta, p.sigma_eps);
        if x == 0.0 {
            let r = (y - a) / se;
            grad[lab] += r / se;
            grad[2 * q + 1] += (r * r - 1.0) / se;
            return -0.5 * r * r - se.ln() - LN_SQRT_2PI;
        }
        let (uh, sh) = self.recenter(lab, x, y);
        let nodes = self.quad.nodes();
        let mut t_max = f64::NEG_INFINITY;
        for (m, &lw) in self.quad.log_weights().iter().enumerate() {
            let (g, _, _) = self.log_integrand(lab, x, y, uh + sh * nodes[m]);
            let t = lw + g + 0.5 * nodes[m] * nodes[m];
            node_terms[m] = t;
            t_max = t_max.max(t);
        }
        if !t_max.is_finite() {
            return f64::NEG_INFINITY;
        }
        let mut s = 0.0;
        let (mut ga, mut gb, mut gn, mut gse) = (0.0, 0.0, 0.0, 0.0);
        for m in 0..nodes.len() {
            let w = (node_terms[m] - t_max).exp();
            if w == 0.0 {
                continue;
            }
            s += w;
            let u = uh + sh * nodes[m];
            let e = (sn * u).exp();
            let mu = a + b * x * e;
            let d = y - mu;
            let rr = d / (se * se);
            ga += w * rr;
            gb += w * rr * x * e;
            gn += w * rr * b * x * u * e;
            gse += w * (d * d / (se * se * se) - 1.0 / se);
        }
        grad[lab] += ga / s;
        grad[q + lab] += gb / s;
        grad[2 * q] += gn / s;
        grad[2 * q + 1] += gse / s;
        sh.ln() + t_max + s.ln()
    }
}

fn check_dims(data: &InterlabDataset, params: &ModelParams) -> Result<()> {
    params.validate()?;
    if data.n_labs() != params.n_labs() {
        return Err(Error::Config(format!(
            "dataset has {} labs but params have {}",
            data.n_labs(),
            params.n_labs()
        )));
    }
    Ok(())
}

/// Blank-level moment estimates: per-lab intercepts and the pooled
/// additive error.
#[derive(Debug, Clone, PartialEq)]
pub struct BlankEstimates {
    pub alpha: Vec<f64>,
    pub sigma_eps: f64,
}

/// Method-of-moments estimation at the blank level: `alpha_i` is the lab
/// mean of the blank replicates and `sigma_eps^2` pools their within-lab
/// sums of squares over `sum_i (N_i1 - 1)` degrees of freedom.
///
/// Requires at least one lab with replicated blanks.
pub fn mme_zero_level(data: &InterlabDataset) -> Result<BlankEstimates> {
    if data.blank_df() == 0 {
        return Err(Error::InsufficientData(
            "estimating sigma_eps needs replicated blank measurements in at least one lab".into(),
        ));
    }
    let mut alpha = Vec::with_capacity(data.n_labs());
    let mut ss = 0.0;
    for i in 0..data.n_labs() {
        let blanks = data.cell(i, 0);
        let m = mean(blanks);
        alpha.push(m);
        ss += blanks.iter().map(|y| (y - m) * (y - m)).sum::<f64>();
    }
    Ok(BlankEstimates {
        alpha,
        sigma_eps: (ss / data.blank_df() as f64).sqrt(),
    })
}

/// Method-of-moments estimate of `sigma_eta` from the variance growth law.
///
/// In every replicated nonzero cell the sample variance estimates
/// `beta_i^2 x_j^2 (w - 1) w + sigma_eps^2` with `w = exp(sigma_eta^2)`,
/// so `v_ij = max(0, S_ij^2 - sigma_eps^2) / (beta_i x_j)^2` solves
/// `w (w - 1) = v` cell by cell. The cell roots are pooled by a
/// replicate-weighted mean before inverting `w` back to `sigma_eta`.
pub fn mme_sigma_eta(data: &InterlabDataset, beta: &[f64], sigma_eps: f64) -> Result<f64> {
    if beta.len() != data.n_labs() {
        return Err(Error::Config(format!(
            "expected {} slopes, got {}",
            data.n_labs(),
            beta.len()
        )));
    }
    let mut wsum = 0.0;
    let mut nsum = 0.0;
    for (i, j, reps) in data.cells() {
        let x = data.concentrations()[j];
        if j == 0 || reps.len() < 2 || beta[i] == 0.0 {
            continue;
        }
        let m = mean(reps);
        let s2 = reps.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / (reps.len() - 1) as f64;
        let v = (s2 - sigma_eps * sigma_eps).max(0.0) / (beta[i] * beta[i] * x * x);
        let w = 0.5 * (1.0 + (1.0 + 4.0 * v).sqrt());
        wsum += reps.len() as f64 * w;
        nsum += reps.len() as f64;
    }
    if nsum == 0.0 {
        return Err(Error::InsufficientData(
            "estimating sigma_eta needs a replicated nonzero-concentration cell".into(),
        ));
    }
    Ok((wsum / nsum).ln().max(0.0).sqrt())
}

/// Per-lab ordinary least-squares slopes of response on concentration.
pub fn per_lab_ols_slopes(data: &InterlabDataset) -> Vec<f64> {
    (0..data.n_labs())
        .map(|i| {
            let mut n = 0.0;
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut sxx = 0.0;
            let mut sxy = 0.0;
            for (_, j, reps) in data.cells().filter(|&(l, _, _)| l == i) {
                let x = data.concentrations()[j];
                for &y in reps {
                    n += 1.0;
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    sxy += x * y;
                }
            }
            (sxy - sx * sy / n) / (sxx - sx * sx / n)
        })
        .collect()
}

/// Full method-of-moments parameter vector: blank moments for intercepts
/// and additive error, OLS slopes, and the variance-growth `sigma_eta`.
pub fn mme_params(data: &InterlabDataset) -> Result<ModelParams> {
    let blank = mme_zero_level(data)?;
    let beta = per_lab_ols_slopes(data);
    let sigma_eta = mme_sigma_eta(data, &beta, blank.sigma_eps)?;
    ModelParams::new(blank.alpha, beta, sigma_eta, blank.sigma_eps)
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub quad_order: usize,
    pub max_iter: usize,
    /// Convergence threshold on the gradient infinity norm in the
    /// optimization coordinates.
    pub grad_tol: f64,
    /// Starting point; defaults to the method-of-moments chain.
    pub init: Option<ModelParams>,
    /// Compute the observed information and standard errors at the
    /// optimum. Skipped in bulk refits where only the point matters.
    pub observed_info: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            quad_order: 30,
            max_iter: 500,
            grad_tol: 1e-6,
            init: None,
            observed_info: true,
        }
    }
}

/// Per-parameter asymptotic standard errors, in natural units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStdErrors {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma_eta: f64,
    pub sigma_eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub loglik: f64,
    pub converged: bool,
    pub n_iter: usize,
    pub quad_order: usize,
    /// Observed information (negative log-likelihood Hessian) in the
    /// order `[alpha.., beta.., sigma_eta, sigma_eps]`, row-major.
    pub observed_info: Option<Vec<Vec<f64>>>,
    /// Square roots of the inverse information diagonal, when the
    /// information matrix is invertible.
    pub stderr: Option<ParamStdErrors>,
}

/// Maximum-likelihood fit of the calibration model.
///
/// The responses are standardized internally (the model is equivariant
/// under `y -> c y` with `alpha, beta, sigma_eps` scaling along), so step
/// sizes and stopping rules do not depend on measurement units. The search
/// runs in `(alpha, beta, log sigma_eta, log sigma_eps)`; the standard
/// deviations are floored far below data scale rather than allowed to
/// reach the singular boundary, so noise-free data come back with
/// estimates at the floor instead of an error. Non-convergence within
/// `max_iter` returns the best point found with `converged == false`.
pub fn fit_mle(data: &InterlabDataset, opts: &FitOptions) -> Result<FitResult> {
    let quad = GaussHermite::new(opts.quad_order)?;
    let q = data.n_labs();
    let scale = response_scale(data);
    let sdata = scale_responses(data, 1.0 / scale);
    let floor_eps = SIGMA_FLOOR;
    let floor_eta = SIGMA_FLOOR;

    let init = match &opts.init {
        Some(p) => {
            check_dims(data, p)?;
            scale_params(p, 1.0 / scale)
        }
        None => default_init(&sdata, 1.0),
    };
    let mut x0 = Vec::with_capacity(2 * q + 2);
    x0.extend_from_slice(&init.alpha);
    x0.extend_from_slice(&init.beta);
    x0.push(init.sigma_eta.max(floor_eta * 10.0).ln());
    x0.push(init.sigma_eps.max(floor_eps * 10.0).ln());

    let objective = |t: &[f64]| -> (f64, Vec<f64>) {
        let (params, on_floor) = decode(t, q, floor_eta, floor_eps, 1.0);
        match loglik_gradient(&sdata, &params, &quad) {
            Ok((l, g)) => {
                let mut ng = vec![0.0; 2 * q + 2];
                for k in 0..2 * q {
                    ng[k] = -g[k];
                }
                // Chain rule to log scale; a clamped coordinate is flat.
                ng[2 * q] = if on_floor.0 { 0.0 } else { -g[2 * q] * params.sigma_eta };
                ng[2 * q + 1] = if on_floor.1 {
                    0.0
                } else {
                    -g[2 * q + 1] * params.sigma_eps
                };
                (-l, ng)
            }
            Err(_) => (f64::INFINITY, vec![0.0; 2 * q + 2]),
        }
    };

    let res = minimize(
        objective,
        &x0,
        &OptimOptions {
            max_iter: opts.max_iter,
            grad_tol: opts.grad_tol,
            memory: 8,
        },
    )?;
    let (sparams, _) = decode(&res.x, q, floor_eta, floor_eps, 1.0);
    let params = scale_params(&sparams, scale);
    // Densities transform as p(y) = p'(y / c) / c under y -> c y.
    let loglik_hat = -res.f - data.n_measurements() as f64 * scale.ln();

    let (observed_info, stderr) = if opts.observed_info {
        match observed_information(data, &params, opts.quad_order) {
            Ok(info) => {
                let se = invert_for_stderr(&info, q);
                (Some(info), se)
            }
            Err(_) => (None, None),
        }
    } else {
        (None, None)
    };

    Ok(FitResult {
        params,
        loglik: loglik_hat,
        converged: res.converged,
        n_iter: res.n_iter,
        quad_order: opts.quad_order,
        observed_info,
        stderr,
    })
}

fn response_scale(data: &InterlabDataset) -> f64 {
    let all: Vec<f64> = data
        .cells()
        .flat_map(|(_, _, reps)| reps.iter().copied())
        .collect();
    sd(&all).max(1e-12)
}

fn scale_responses(data: &InterlabDataset, c: f64) -> InterlabDataset {
    let cells = (0..data.n_labs())
        .map(|i| {
            (0..data.n_levels())
                .map(|j| data.cell(i, j).iter().map(|y| c * y).collect())
                .collect()
        })
        .collect();
    InterlabDataset::new(
        data.labs().to_vec(),
        data.concentrations().to_vec(),
        cells,
    )
    .expect("scaling responses preserves validity")
}

fn scale_params(p: &ModelParams, c: f64) -> ModelParams {
    ModelParams {
        alpha: p.alpha.iter().map(|a| c * a).collect(),
        beta: p.beta.iter().map(|b| c * b).collect(),
        sigma_eta: p.sigma_eta,
        sigma_eps: c * p.sigma_eps,
    }
}

fn default_init(data: &InterlabDataset, scale: f64) -> ModelParams {
    let (alpha, sigma_eps) = match mme_zero_level(data) {
        Ok(b) => (b.alpha, b.sigma_eps),
        Err(_) => (
            (0..data.n_labs()).map(|i| mean(data.cell(i, 0))).collect(),
            0.2 * scale,
        ),
    };
    let beta = per_lab_ols_slopes(data);
    let sigma_eta = mme_sigma_eta(data, &beta, sigma_eps)
        .unwrap_or(0.05)
        .max(1e-3);
    ModelParams {
        alpha,
        beta,
        sigma_eta,
        sigma_eps: sigma_eps.max(1e-3 * scale),
    }
}

/// Map optimization coordinates back to natural parameters, reporting
/// which standard deviations sit on their floors.
fn decode(t: &[f64], q: usize, floor_eta: f64, floor_eps: f64, scale: f64) -> (ModelParams, (bool, bool)) {
    let cap_eta = (1e3f64).ln();
    let cap_eps = (1e6 * scale).ln();
    let u = t[2 * q].clamp(floor_eta.ln(), cap_eta);
    let v = t[2 * q + 1].clamp(floor_eps.ln(), cap_eps);
    let params = ModelParams {
        alpha: t[..q].to_vec(),
        beta: t[q..2 * q].to_vec(),
        sigma_eta: u.exp(),
        sigma_eps: v.exp(),
    };
    (params, (t[2 * q] < floor_eta.ln(), t[2 * q + 1] < floor_eps.ln()))
}

/// Observed information at `params`: the central finite-difference
/// Hessian of the negative log-likelihood in natural parameters, order
/// `[alpha.., beta.., sigma_eta, sigma_eps]`, symmetrized.
///
/// Steps are `1e-4 (1 + |theta|)`, shrunk near zero for the standard
/// deviations so every probe stays in the parameter space; both must be
/// strictly positive.
pub fn observed_information(
    data: &InterlabDataset,
    params: &ModelParams,
    quad_order: usize,
) -> Result<Vec<Vec<f64>>> {
    check_dims(data, params)?;
    if params.sigma_eta <= 0.0 || params.sigma_eps <= 0.0 {
        return Err(Error::Numerical(
            "observed information is undefined on the zero-variance boundary".into(),
        ));
    }
    let quad = GaussHermite::new(quad_order)?;
    let q = params.n_labs();
    let p = 2 * q + 2;
    let mut theta = Vec::with_capacity(p);
    theta.extend_from_slice(&params.alpha);
    theta.extend_from_slice(&params.beta);
    theta.push(params.sigma_eta);
    theta.push(params.sigma_eps);

    let mut h = vec![0.0; p];
    for k in 0..p {
        let base = 1e-4 * (1.0 + theta[k].abs());
        h[k] = if k >= 2 * q { base.min(0.5 * theta[k]) } else { base };
    }
    let f = |t: &[f64]| -> Result<f64> {
        let pr = ModelParams {
            alpha: t[..q].to_vec(),
            beta: t[q..2 * q].to_vec(),
            sigma_eta: t[2 * q],
            sigma_eps: t[2 * q + 1],
        };
        Ok(-loglik(data, &pr, &quad)?)
    };

    let f0 = f(&theta)?;
    let mut info = vec![vec![0.0; p]; p];
    let mut probe = theta.clone();
    for k in 0..p {
        probe[k] = theta[k] + h[k];
        let fp = f(&probe)?;
        probe[k] = theta[k] - h[k];
        let fm = f(&probe)?;
        probe[k] = theta[k];
        info[k][k] = (fp - 2.0 * f0 + fm) / (h[k] * h[k]);
    }
    for k in 0..p {
        for l in (k + 1)..p {
            probe[k] = theta[k] + h[k];
            probe[l] = theta[l] + h[l];
            let fpp = f(&probe)?;
            probe[l] = theta[l] - h[l];
            let fpm = f(&probe)?;
            probe[k] = theta[k] - h[k];
            let fmm = f(&probe)?;
            probe[l] = theta[l] + h[l];
            let fmp = f(&probe)?;
            probe[k] = theta[k];
            probe[l] = theta[l];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[k] * h[l]);
            info[k][l] = v;
            info[l][k] = v;
        }
    }
    if info.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "non-finite observed information entries".into(),
        ));
    }
    Ok(info)
}

/// Invert the information matrix; `None` when it is not positive definite.
fn invert_for_stderr(info: &[Vec<f64>], q: usize) -> Option<ParamStdErrors> {
    let cov = invert_spd(info)?;
    let p = info.len();
    let diag: Vec<f64> = (0..p).map(|k| cov[k][k]).collect();
    if diag.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return None;
    }
    let se: Vec<f64> = diag.iter().map(|v| v.sqrt()).collect();
    Some(ParamStdErrors {
        alpha: se[..q].to_vec(),
        beta: se[q..2 * q].to_vec(),
        sigma_eta: se[2 * q],
        sigma_eps: se[2 * q + 1],
    })
}

/// Inverse of a symmetric positive-definite matrix given as rows.
pub(crate) fn invert_spd(m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let p = m.len();
    let dm = nalgebra::DMatrix::from_fn(p, p, |r, c| m[r][c]);
    let inv = dm
        .clone()
        .cholesky()
        .map(|ch| ch.inverse())
        .or_else(|| dm.try_inverse())?;
    Some((0..p).map(|r| (0..p).map(|c| inv[(r, c)]).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StudyDesign;
    use crate::model::simulate_dataset;
    use crate::rng::{stream, tag};
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn scenario_a_data(seed: u64) -> InterlabDataset {
        let p = ModelParams::homogeneous(3, 1.0, 1.0, 0.1, 1.0).unwrap();
        let d = StudyDesign::balanced(3, vec![0.0, 10.0, 30.0], 5);
        simulate_dataset(&p, &d, seed).unwrap()
    }

    #[test]
    fn blank_moment_estimates_match_hand_values() {
        let d = InterlabDataset::new(
            vec!["a".into(), "b".into()],
            vec![0.0, 1.0],
            vec![
                vec![vec![0.0, 2.0], vec![1.0]],
                vec![vec![1.0, 3.0], vec![2.0]],
            ],
        )
        .unwrap();
        let b = mme_zero_level(&d).unwrap();
        assert_eq!(b.alpha, vec![1.0, 2.0]);
        // SS = 2 + 2 = 4 over 2 degrees of freedom.
        assert_relative_eq!(b.sigma_eps, 2.0f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn sigma_eta_moment_solves_the_growth_law() {
        // One replicated cell at x = 2 with S^2 = 3, sigma_eps^2 = 2 and
        // beta = 1 gives v = 1/4, w = (1 + sqrt(2))/2.
        let h = (1.5f64).sqrt();
        let d = InterlabDataset::new(
            vec!["a".into()],
            vec![0.0, 2.0],
            vec![vec![vec![-1.0, 1.0], vec![5.0 - h, 5.0 + h]]],
        )
        .unwrap();
        let got = mme_sigma_eta(&d, &[1.0], 2.0f64.sqrt()).unwrap();
        let w = 0.5 * (1.0 + 2.0f64.sqrt());
        assert_relative_eq!(got, w.ln().sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn sigma_eta_moment_needs_replication() {
        let d = InterlabDataset::new(
            vec!["a".into()],
            vec![0.0, 2.0],
            vec![vec![vec![-1.0, 1.0], vec![5.0]]],
        )
        .unwrap();
        assert!(matches!(
            mme_sigma_eta(&d, &[1.0], 1.0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn ols_slope_is_exact_on_a_line() {
        let d = InterlabDataset::new(
            vec!["a".into()],
            vec![0.0, 1.0, 2.0],
            vec![vec![vec![1.0, 1.0], vec![4.0], vec![7.0]]],
        )
        .unwrap();
        assert_relative_eq!(per_lab_ols_slopes(&d)[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn blank_density_is_exact_normal() {
        let p = ModelParams::homogeneous(1, 2.0, 1.0, 0.3, 0.5).unwrap();
        let quad = GaussHermite::new(30).unwrap();
        let got = response_log_density(&p, 0, 0.0, 2.7, &quad).unwrap();
        let r = 0.7f64 / 0.5;
        let want = -0.5 * r * r - 0.5f64.ln() - LN_SQRT_2PI;
        assert_relative_eq!(got, want, epsilon = 1e-14);
    }

    #[test]
    fn quadrature_density_matches_monte_carlo() {
        // E_u phi(y; a + b x e^{s u}, se) estimated from 2e6 draws.
        let p = ModelParams::new(vec![0.0], vec![1.0], 0.5, 0.3).unwrap();
        let quad = GaussHermite::new(60).unwrap();
        let (x, y) = (1.0, 1.0);
        let got = response_log_density(&p, 0, x, y, &quad).unwrap();
        let mut rng = stream(2024, &[tag::SIMULATE, 1]);
        let n = 2_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let u: f64 = StandardNormal.sample(&mut rng);
            let r = (y - x * (0.5 * u).exp()) / 0.3;
            acc += (-0.5 * r * r).exp() / (0.3 * (2.0 * std::f64::consts::PI).sqrt());
        }
        let mc = (acc / n as f64).ln();
        assert!((got - mc).abs() < 1e-3, "quad {got} vs mc {mc}");
    }

    #[test]
    fn loglik_is_the_sum_of_observation_densities() {
        let data = scenario_a_data(5);
        let p = ModelParams::homogeneous(3, 0.9, 1.1, 0.12, 0.8).unwrap();
        let quad = GaussHermite::new(30).unwrap();
        let total = loglik(&data, &p, &quad).unwrap();
        let mut sum = 0.0;
        for (i, j, reps) in data.cells() {
            for &y in reps {
                sum +=
                    response_log_density(&p, i, data.concentrations()[j], y, &quad).unwrap();
            }
        }
        assert_relative_eq!(total, sum, epsilon = 1e-10);
    }

    #[test]
    fn analytic_score_matches_finite_differences() {
        let data = scenario_a_data(17);
        let quad = GaussHermite::new(30).unwrap();
        let p = ModelParams::new(
            vec![0.8, 1.1, 1.3],
            vec![0.9, 1.0, 1.2],
            0.15,
            0.7,
        )
        .unwrap();
        let (_, g) = loglik_gradient(&data, &p, &quad).unwrap();
        let mut theta = Vec::new();
        theta.extend_from_slice(&p.alpha);
        theta.extend_from_slice(&p.beta);
        theta.push(p.sigma_eta);
        theta.push(p.sigma_eps);
        for k in 0..theta.len() {
            let h = 1e-6 * (1.0 + theta[k].abs());
            let mut tp = theta.clone();
            tp[k] += h;
            let mut tm = theta.clone();
            tm[k] -= h;
            let make = |t: &[f64]| ModelParams {
                alpha: t[..3].to_vec(),
                beta: t[3..6].to_vec(),
                sigma_eta: t[6],
                sigma_eps: t[7],
            };
            let fd = (loglik(&data, &make(&tp), &quad).unwrap()
                - loglik(&data, &make(&tm), &quad).unwrap())
                / (2.0 * h);
            assert_relative_eq!(g[k], fd, max_relative = 1e-5, epsilon = 1e-8);
        }
    }

    #[test]
    fn sigma_eps_zero_with_residual_is_minus_infinity() {
        let d = InterlabDataset::new(
            vec!["a".into()],
            vec![0.0, 1.0],
            vec![vec![vec![0.3, 0.0], vec![1.0]]],
        )
        .unwrap();
        let p = ModelParams::new(vec![0.0], vec![1.0], 0.1, 0.0).unwrap();
        let quad = GaussHermite::new(30).unwrap();
        assert_eq!(loglik(&d, &p, &quad).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn fit_recovers_simulation_parameters_loosely() {
        let p = ModelParams::homogeneous(10, 0.0, 1.0, 0.1, 1.0).unwrap();
        let d = StudyDesign::balanced(
            10,
            vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0],
            5,
        );
        let data = simulate_dataset(&p, &d, 303).unwrap();
        let fit = fit_mle(&data, &FitOptions::default()).unwrap();
        assert!(fit.converged, "stopped after {} iters", fit.n_iter);
        // Loose tolerances: one simulated dataset, q = 10, 450 obs.
        for i in 0..10 {
            assert!(fit.params.alpha[i].abs() < 1.0, "alpha {:?}", fit.params.alpha);
            assert!((fit.params.beta[i] - 1.0).abs() < 0.15, "beta {:?}", fit.params.beta);
        }
        assert!((fit.params.sigma_eta - 0.1).abs() < 0.05);
        assert!((fit.params.sigma_eps - 1.0).abs() < 0.2);
        let se = fit.stderr.expect("information should invert");
        assert!(se.sigma_eta > 0.0 && se.sigma_eps > 0.0);
    }

    #[test]
    fn noise_free_fit_recovers_the_lines() {
        let p = ModelParams::new(vec![1.0, -0.5], vec![2.0, 3.0], 0.0, 0.0).unwrap();
        let d = StudyDesign::balanced(2, vec![0.0, 4.0, 8.0], 3);
        let data = simulate_dataset(&p, &d, 1).unwrap();
        let fit = fit_mle(
            &data,
            &FitOptions {
                observed_info: false,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert_relative_eq!(fit.params.alpha[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(fit.params.alpha[1], -0.5, epsilon = 1e-6);
        assert_relative_eq!(fit.params.beta[0], 2.0, epsilon = 1e-6);
        assert_relative_eq!(fit.params.beta[1], 3.0, epsilon = 1e-6);
        assert!(fit.params.sigma_eps < 1e-6, "sigma_eps {}", fit.params.sigma_eps);
        assert!(fit.params.sigma_eta < 1e-3, "sigma_eta {}", fit.params.sigma_eta);
    }

    #[test]
    fn quadrature_order_has_converged_by_twenty_nodes() {
        let data = scenario_a_data(23);
        let p = ModelParams::homogeneous(3, 1.0, 1.0, 0.1, 1.0).unwrap();
        let l20 = loglik(&data, &p, &GaussHermite::new(20).unwrap()).unwrap();
        let l40 = loglik(&data, &p, &GaussHermite::new(40).unwrap()).unwrap();
        assert!((l20 - l40).abs() < 1e-6, "l20={l20} l40={l40}");
    }

    #[test]
    fn rescaling_responses_rescales_the_fit() {
        let data = scenario_a_data(41);
        let scaled = InterlabDataset::new(
            data.labs().to_vec(),
            data.concentrations().to_vec(),
            (0..data.n_labs())
                .map(|i| {
                    (0..data.n_levels())
                        .map(|j| data.cell(i, j).iter().map(|y| 10.0 * y).collect())
                        .collect()
                })
                .collect(),
        )
        .unwrap();
        let opts = FitOptions {
            observed_info: false,
            ..FitOptions::default()
        };
        let f1 = fit_mle(&data, &opts).unwrap();
        let f2 = fit_mle(&scaled, &opts).unwrap();
        for i in 0..3 {
            assert_relative_eq!(10.0 * f1.params.alpha[i], f2.params.alpha[i], max_relative = 1e-4);
            assert_relative_eq!(10.0 * f1.params.beta[i], f2.params.beta[i], max_relative = 1e-4);
        }
        assert_relative_eq!(f1.params.sigma_eta, f2.params.sigma_eta, max_relative = 1e-4);
        assert_relative_eq!(10.0 * f1.params.sigma_eps, f2.params.sigma_eps, max_relative = 1e-4);
    }

    #[test]
    fn moment_estimates_tighten_with_more_labs() {
        // Mean absolute error of sigma_eta over 200 simulated studies
        // should fall as labs are added.
        let mut errs = Vec::new();
        for &q in &[3usize, 10, 30] {
            let p = ModelParams::homogeneous(q, 1.0, 1.0, 0.1, 1.0).unwrap();
            let d = StudyDesign::balanced(q, vec![0.0, 10.0, 30.0], 5);
            let mut acc = 0.0;
            for rep in 0..200u64 {
                let data = simulate_dataset(&p, &d, 9000 + rep).unwrap();
                let est = mme_params(&data).unwrap();
                acc += (est.sigma_eta - 0.1).abs();
            }
            errs.push(acc / 200.0);
        }
        assert!(
            errs[0] > errs[1] && errs[1] > errs[2],
            "errors not decreasing: {errs:?}"
        );
    }

    #[test]
    fn observed_information_is_usable_at_the_mle() {
        let data = scenario_a_data(7);
        let fit = fit_mle(&data, &FitOptions::default()).unwrap();
        let info = fit.observed_info.as_ref().unwrap();
        let p = info.len();
        assert_eq!(p, 8);
        for r in 0..p {
            for c in 0..p {
                assert_relative_eq!(info[r][c], info[c][r], epsilon = 1e-9);
            }
        }
        assert!(invert_spd(info).is_some());
    }
}
