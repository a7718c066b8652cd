//! Comparator methods for unknown-concentration estimation, and the
//! decision rules built on interval estimates.
//!
//! The fiducial sample (module [`crate::fiducial`]) is the primary
//! machinery; this module provides the standard alternatives it is
//! benchmarked against, plus the applied outputs shared by all methods:
//!
//! - [`mle_concentration`]: maximum-likelihood inversion of new
//!   measurements with the model parameters held at a fit.
//! - [`wald_mle_interval`] / [`wald_mme_interval`]: normal-theory
//!   intervals around the mean-response inversion, propagating parameter
//!   uncertainty by the delta method (observed information for the MLE,
//!   Monte Carlo re-estimation for the moment estimator).
//! - [`bootstrap_intervals`]: full parametric bootstrap of the pipeline
//!   (simulate training data and new measurements, refit, re-invert).
//! - [`assess_exceedance`]: regulatory-threshold decision from any
//!   interval.
//! - [`detection_limit`] / [`quantification_limit`]: smallest true
//!   concentration at which the fiducial interval clears zero, or is
//!   narrow relative to its point estimate, in the median simulated
//!   measurement batch.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data::{CalibrationQuery, CellArray, InterlabDataset, QueryDesign};
use crate::error::{Error, Result};
use crate::estimation::{
    fit_mle, invert_spd, mme_params, FitOptions, FitResult, LoglikEngine,
};
use crate::fiducial::{
    concentration_pivots, draw_parameter_fiducials, hdi, DrawOptions, PivotOptions, MIN_SAMPLE,
};
use crate::interval::{IntervalEstimate, IntervalMethod};
use crate::model::{simulate_dataset, simulate_query, ModelParams};
use crate::quadrature::GaussHermite;
use crate::rng::{child_seed, stream, tag};
use crate::stats::{median, quantile_sorted, sd};

fn z_quantile(level: f64) -> Result<f64> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!(
            "interval level must lie in (0, 1), got {level}"
        )));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(0.5 * (1.0 + level)))
}

fn t_quantile(level: f64, df: usize) -> Result<f64> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!(
            "interval level must lie in (0, 1), got {level}"
        )));
    }
    let t = StudentsT::new(0.0, 1.0, df.max(1) as f64).expect("valid t distribution");
    Ok(t.inverse_cdf(0.5 * (1.0 + level)))
}

fn check_query(params: &ModelParams, query: &CalibrationQuery, unknown: usize) -> Result<()> {
    params.validate()?;
    if unknown >= query.n_unknowns() {
        return Err(Error::Query(format!(
            "unknown index {unknown} out of range for {} unknowns",
            query.n_unknowns()
        )));
    }
    for &lab in query.lab_indices() {
        if lab >= params.n_labs() {
            return Err(Error::Query(format!(
                "query lab index {lab} out of range for {} labs",
                params.n_labs()
            )));
        }
    }
    Ok(())
}

/// Maximum-likelihood estimate of one unknown's concentration.
///
/// Maximizes the integrated likelihood of the unknown's measurements over
/// `X >= 0` with the model parameters held fixed, by golden-section search
/// on an adaptively expanded bracket. With both error components zero the
/// likelihood degenerates to point masses and the estimate is the
/// least-squares line inversion instead.
pub fn mle_concentration(
    params: &ModelParams,
    query: &CalibrationQuery,
    unknown: usize,
    quad: &GaussHermite,
) -> Result<f64> {
    check_query(params, query, unknown)?;
    let obs: Vec<(usize, f64)> = query
        .measurements(unknown)
        .flat_map(|(lab, reps)| reps.iter().map(move |&y| (lab, y)))
        .collect();
    if params.sigma_eta == 0.0 && params.sigma_eps == 0.0 {
        let num: f64 = obs
            .iter()
            .map(|&(l, y)| params.beta[l] * (y - params.alpha[l]))
            .sum();
        let den: f64 = obs.iter().map(|&(l, _)| params.beta[l] * params.beta[l]).sum();
        if den <= 0.0 {
            return Err(Error::Numerical(
                "all slopes are zero; the concentration is unidentified".into(),
            ));
        }
        return Ok((num / den).max(0.0));
    }
    let eng = LoglikEngine::new(params, quad);
    let mut scratch = vec![0.0; quad.order()];
    let mut f = |x: f64| -> f64 {
        obs.iter()
            .map(|&(l, y)| eng.log_density(l, x, y, &mut scratch))
            .sum()
    };
    // First bracket from the mean-response inversion, expanded until the
    // maximizer is interior.
    let x0 = moment_inversion(params, query, unknown).map_or(0.0, |(x, _)| x.max(0.0));
    let mut hi = (4.0 * x0).max(1.0);
    let cap = 1e12 * (1.0 + x0);
    loop {
        let (xm, fm) = golden_max(&mut f, 0.0, hi, 1e-9 * (1.0 + hi));
        if xm < 0.999 * hi {
            // Golden section never lands on the bracket edge; snap to the
            // boundary when the constrained maximum sits there.
            return Ok(if f(0.0) >= fm { 0.0 } else { xm });
        }
        hi *= 4.0;
        if hi > cap {
            return Err(Error::Numerical(
                "the concentration likelihood keeps increasing; no interior maximum".into(),
            ));
        }
    }
}

/// Golden-section maximization on `[lo, hi]` to absolute tolerance `tol`.
fn golden_max<F: FnMut(f64) -> f64>(f: &mut F, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    const INVPHI2: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (lo, hi);
    let mut h = b - a;
    let mut c = a + INVPHI2 * h;
    let mut d = a + INVPHI * h;
    let mut fc = f(c);
    let mut fd = f(d);
    while h > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            h = b - a;
            c = a + INVPHI2 * h;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            h = b - a;
            d = a + INVPHI * h;
            fd = f(d);
        }
    }
    if fc > fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Mean-response inversion of one unknown: solves
/// `sum y = sum(alpha_i) + X sum(beta_i e^{sigma_eta^2/2})` over the
/// unknown's measurements. Returns the (unclamped) estimate and the slope
/// denominator.
fn moment_inversion(
    params: &ModelParams,
    query: &CalibrationQuery,
    unknown: usize,
) -> Result<(f64, f64)> {
    let m = (0.5 * params.sigma_eta * params.sigma_eta).exp();
    let mut num = 0.0;
    let mut den = 0.0;
    for (lab, reps) in query.measurements(unknown) {
        for &y in reps {
            num += y - params.alpha[lab];
            den += params.beta[lab] * m;
        }
    }
    if !(den.is_finite() && den.abs() > 1e-300) {
        return Err(Error::Numerical(
            "degenerate slope denominator in the mean-response inversion".into(),
        ));
    }
    Ok((num / den, den))
}

/// Gradient of the mean-response inversion in the parameter order
/// `[alpha.., beta.., sigma_eta, sigma_eps]`, at estimate `x` with slope
/// denominator `den`.
fn inversion_gradient(
    params: &ModelParams,
    query: &CalibrationQuery,
    unknown: usize,
    x: f64,
    den: f64,
) -> Vec<f64> {
    let q = params.n_labs();
    let m = (0.5 * params.sigma_eta * params.sigma_eta).exp();
    let mut g = vec![0.0; 2 * q + 2];
    for (lab, reps) in query.measurements(unknown) {
        let n = reps.len() as f64;
        g[lab] -= n / den;
        g[q + lab] -= n * m * x / den;
    }
    g[2 * q] = -x * params.sigma_eta;
    g
}

/// Variance of the summed measurement noise, mapped through the inversion:
/// `sum_i Var(y*_i; x) / den^2` with the variance growth law evaluated at
/// the estimated concentration (clamped into the domain).
fn measurement_variance(
    params: &ModelParams,
    query: &CalibrationQuery,
    unknown: usize,
    x: f64,
    den: f64,
) -> Result<f64> {
    let xc = x.max(0.0);
    let mut v = 0.0;
    for (lab, reps) in query.measurements(unknown) {
        let (_, var) = params.response_moments(lab, xc)?;
        v += reps.len() as f64 * var;
    }
    Ok(v / (den * den))
}

fn quadratic_form(g: &[f64], cov: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (r, gr) in g.iter().enumerate() {
        for (c, gc) in g.iter().enumerate() {
            s += gr * gc * cov[r][c];
        }
    }
    s.max(0.0)
}

fn symmetric_interval(method: IntervalMethod, level: f64, x: f64, se: f64) -> IntervalEstimate {
    let z = z_quantile(level).expect("level validated by caller");
    IntervalEstimate {
        method,
        level,
        lower: (x - z * se).max(0.0),
        upper: (x + z * se).max(0.0),
        point: x.max(0.0),
    }
}

/// Normal-theory interval around the mean-response inversion, with the
/// parameter uncertainty taken from the fit's observed information.
///
/// `Var(X) = Var_meas + g' I^{-1} g`: the measurement part maps the
/// variance growth law through the inversion, the parameter part is the
/// delta method. Requires a fit carrying an invertible information matrix.
pub fn wald_mle_interval(
    fit: &FitResult,
    query: &CalibrationQuery,
    unknown: usize,
    level: f64,
) -> Result<IntervalEstimate> {
    z_quantile(level)?;
    check_query(&fit.params, query, unknown)?;
    let info = fit.observed_info.as_ref().ok_or_else(|| {
        Error::Config("the fit carries no observed information; refit with observed_info".into())
    })?;
    let cov = invert_spd(info).ok_or_else(|| {
        Error::Numerical("the observed information matrix is singular".into())
    })?;
    let (x, den) = moment_inversion(&fit.params, query, unknown)?;
    let g = inversion_gradient(&fit.params, query, unknown, x, den);
    if g.len() != cov.len() {
        return Err(Error::Config(format!(
            "information matrix is {}x{} but the model has {} parameters",
            cov.len(),
            cov.len(),
            g.len()
        )));
    }
    let var = measurement_variance(&fit.params, query, unknown, x, den)? + quadratic_form(&g, &cov);
    Ok(symmetric_interval(
        IntervalMethod::WaldMle,
        level,
        x,
        var.sqrt(),
    ))
}

#[derive(Debug, Clone)]
pub struct MmeWaldOptions {
    /// Simulated re-estimations used to measure the moment estimator's
    /// sampling covariance.
    pub n_mc: usize,
    pub seed: u64,
}

impl MmeWaldOptions {
    pub fn new(seed: u64) -> Self {
        Self { n_mc: 200, seed }
    }
}

/// Conservative interval around the moment-based fit.
///
/// The parameter covariance of the moment estimator has no practical
/// closed form, so it is measured by re-estimating on `n_mc` datasets
/// simulated from the moment fit itself. Two choices deliberately err
/// wide, which is the role this method plays among the comparators: the
/// measurement and parameter standard deviations are combined additively
/// rather than in quadrature (a worst-case-correlation bound), and the
/// quantile is Student-t with the pooled blank degrees of freedom rather
/// than normal, since the additive-error variance that dominates at low
/// concentration is estimated from those few blank replicates.
pub fn wald_mme_interval(
    data: &InterlabDataset,
    query: &CalibrationQuery,
    unknown: usize,
    level: f64,
    opts: &MmeWaldOptions,
) -> Result<IntervalEstimate> {
    z_quantile(level)?;
    if opts.n_mc < 2 {
        return Err(Error::Config(format!(
            "estimating the moment covariance needs n_mc >= 2, got {}",
            opts.n_mc
        )));
    }
    let params = mme_params(data)?;
    check_query(&params, query, unknown)?;
    let (x, den) = moment_inversion(&params, query, unknown)?;
    let g = inversion_gradient(&params, query, unknown, x, den);

    let design = data.design();
    let dim = 2 * params.n_labs() + 2;
    let estimates: Vec<Vec<f64>> = (0..opts.n_mc)
        .into_par_iter()
        .filter_map(|k| {
            let s = child_seed(opts.seed, &[tag::MME_COV, k as u64]);
            let data_k = simulate_dataset(&params, &design, s).ok()?;
            let p = mme_params(&data_k).ok()?;
            let mut v = Vec::with_capacity(dim);
            v.extend_from_slice(&p.alpha);
            v.extend_from_slice(&p.beta);
            v.push(p.sigma_eta);
            v.push(p.sigma_eps);
            Some(v)
        })
        .collect();
    if estimates.len() < opts.n_mc / 2 || estimates.len() < 2 {
        return Err(Error::Numerical(format!(
            "only {} of {} moment re-estimations succeeded",
            estimates.len(),
            opts.n_mc
        )));
    }
    let k = estimates.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|c| estimates.iter().map(|e| e[c]).sum::<f64>() / k)
        .collect();
    let mut cov = vec![vec![0.0; dim]; dim];
    for e in &estimates {
        for r in 0..dim {
            for c in r..dim {
                cov[r][c] += (e[r] - mean[r]) * (e[c] - mean[c]);
            }
        }
    }
    for r in 0..dim {
        for c in r..dim {
            cov[r][c] /= k - 1.0;
            cov[c][r] = cov[r][c];
        }
    }

    let sd_meas = measurement_variance(&params, query, unknown, x, den)?.sqrt();
    let sd_param = quadratic_form(&g, &cov).sqrt();
    let t = t_quantile(level, data.blank_df())?;
    let se = sd_meas + sd_param;
    Ok(IntervalEstimate {
        method: IntervalMethod::WaldMme,
        level,
        lower: (x - t * se).max(0.0),
        upper: (x + t * se).max(0.0),
        point: x.max(0.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapVariant {
    /// Quantiles of the bootstrap estimates (the default).
    Percentile,
    /// Reflected quantiles `2 x_hat - q`.
    Basic,
    /// Normal interval with the bootstrap standard deviation.
    Normal,
}

#[derive(Debug, Clone)]
pub struct BootstrapOptions {
    pub n_boot: usize,
    pub level: f64,
    pub variant: BootstrapVariant,
    pub seed: u64,
    pub quad_order: usize,
}

impl BootstrapOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            n_boot: 1000,
            level: 0.95,
            variant: BootstrapVariant::Percentile,
            seed,
            quad_order: 30,
        }
    }
}

/// One unknown's bootstrap interval with its replicate accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapOutcome {
    pub interval: IntervalEstimate,
    pub n_boot: usize,
    pub n_skipped: usize,
    /// More than 5% of replicates were skipped (refit or inversion
    /// failures); the interval is reported but flagged.
    pub unreliable: bool,
}

/// Parametric bootstrap intervals for every unknown in the query.
///
/// Each replicate simulates a full training dataset and fresh unknown
/// measurements from the fitted parameters (the measurements at the MLE
/// inversion of the real ones), refits by maximum likelihood, and
/// re-inverts. One refit serves all unknowns, which is what makes the
/// whole-query form cheaper than per-unknown calls. Failed replicates are
/// skipped and counted. Deterministic in `seed`.
pub fn bootstrap_intervals(
    data: &InterlabDataset,
    fit: &FitResult,
    query: &CalibrationQuery,
    opts: &BootstrapOptions,
) -> Result<Vec<BootstrapOutcome>> {
    if opts.n_boot < 200 {
        return Err(Error::Config(format!(
            "the parametric bootstrap needs at least 200 replicates, got {}",
            opts.n_boot
        )));
    }
    let z = z_quantile(opts.level)?;
    let quad = GaussHermite::new(opts.quad_order)?;
    let params = &fit.params;
    check_query(params, query, 0)?;
    if data.n_labs() != params.n_labs() {
        return Err(Error::Config(format!(
            "dataset has {} labs but the fit has {}",
            data.n_labs(),
            params.n_labs()
        )));
    }
    let design = data.design();
    let n_unknowns = query.n_unknowns();
    let centers: Vec<f64> = (0..n_unknowns)
        .map(|u| mle_concentration(params, query, u, &quad))
        .collect::<Result<_>>()?;
    let shapes: Vec<QueryDesign> = (0..n_unknowns)
        .map(|u| QueryDesign {
            lab_indices: query.lab_indices().to_vec(),
            replicates: (0..query.lab_indices().len())
                .map(|p| query.position_replicates(u, p).len())
                .collect(),
        })
        .collect();

    let refit_opts = FitOptions {
        quad_order: opts.quad_order,
        init: Some(params.clone()),
        observed_info: false,
        ..FitOptions::default()
    };
    let replicates: Vec<Option<Vec<f64>>> = (0..opts.n_boot)
        .into_par_iter()
        .map(|b| {
            let dseed = child_seed(opts.seed, &[tag::BOOT, b as u64, 0]);
            let data_b = simulate_dataset(params, &design, dseed).ok()?;
            // A refit that stops on its iteration budget still yields its
            // best point, which is what the replicate needs; only hard
            // failures skip.
            let fit_b = fit_mle(&data_b, &refit_opts).ok()?;
            let mut xs = Vec::with_capacity(n_unknowns);
            for u in 0..n_unknowns {
                let qseed = child_seed(opts.seed, &[tag::BOOT, b as u64, 1, u as u64]);
                let q_b = simulate_query(params, data, &shapes[u], &[centers[u]], qseed).ok()?;
                xs.push(mle_concentration(&fit_b.params, &q_b, 0, &quad).ok()?);
            }
            Some(xs)
        })
        .collect();

    let n_skipped = replicates.iter().filter(|r| r.is_none()).count();
    let kept = opts.n_boot - n_skipped;
    if kept < 2 {
        return Err(Error::Numerical(format!(
            "only {kept} of {} bootstrap replicates succeeded",
            opts.n_boot
        )));
    }
    let unreliable = n_skipped as f64 > 0.05 * opts.n_boot as f64;
    let a = 0.5 * (1.0 - opts.level);
    Ok((0..n_unknowns)
        .map(|u| {
            let mut draws: Vec<f64> = replicates
                .iter()
                .filter_map(|r| r.as_ref().map(|xs| xs[u]))
                .collect();
            draws.sort_by(f64::total_cmp);
            let x = centers[u];
            let (lower, upper) = match opts.variant {
                BootstrapVariant::Percentile => {
                    (quantile_sorted(&draws, a), quantile_sorted(&draws, 1.0 - a))
                }
                BootstrapVariant::Basic => (
                    2.0 * x - quantile_sorted(&draws, 1.0 - a),
                    2.0 * x - quantile_sorted(&draws, a),
                ),
                BootstrapVariant::Normal => {
                    let s = sd(&draws);
                    (x - z * s, x + z * s)
                }
            };
            BootstrapOutcome {
                interval: IntervalEstimate {
                    method: IntervalMethod::Bootstrap,
                    level: opts.level,
                    lower: lower.max(0.0),
                    upper: upper.max(0.0),
                    point: x,
                },
                n_boot: opts.n_boot,
                n_skipped,
                unreliable,
            }
        })
        .collect())
}

/// Regulatory-threshold decision: an exceedance is declared only when the
/// interval's lower limit lies strictly above the threshold.
pub fn assess_exceedance(interval: &IntervalEstimate, threshold: f64) -> bool {
    interval.lower > threshold
}

#[derive(Debug, Clone)]
pub struct LimitOptions {
    pub level: f64,
    /// Parameter draws behind the fiducial intervals.
    pub n_draws: usize,
    /// Simulated measurement batches per candidate concentration; odd
    /// counts give a unique median.
    pub n_sim: usize,
    /// Top of the search bracket `[0, search_max]`.
    pub search_max: f64,
    /// Absolute bisection tolerance on the limit.
    pub tol: f64,
    /// Quantification target: interval width over point estimate.
    pub rel_width_target: f64,
    pub seed: u64,
}

impl LimitOptions {
    pub fn new(search_max: f64, seed: u64) -> Self {
        Self {
            level: 0.95,
            n_draws: 1000,
            n_sim: 51,
            search_max,
            tol: search_max / 1024.0,
            rel_width_target: 0.10,
            seed,
        }
    }
}

/// Outcome of a limit search over `[0, search_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum LimitResult {
    Found { value: f64 },
    /// The criterion is not met even at the top of the bracket.
    NotAttainable { search_max: f64 },
}

impl LimitResult {
    pub fn value(&self) -> Option<f64> {
        match self {
            LimitResult::Found { value } => Some(*value),
            LimitResult::NotAttainable { .. } => None,
        }
    }
}

#[derive(Clone, Copy)]
enum LimitKind {
    Detection,
    Quantification,
}

/// Smallest true concentration whose median fiducial lower limit, over
/// simulated measurement batches under `design`, lies strictly above zero.
///
/// `params` drives the measurement simulation (typically a fitted value);
/// the fiducial intervals themselves come from `data`. The same parameter
/// draws and measurement noise are reused across candidate concentrations,
/// so the median criterion is monotone along the bisection path and the
/// result is deterministic in `seed`.
pub fn detection_limit(
    data: &InterlabDataset,
    params: &ModelParams,
    design: &QueryDesign,
    opts: &LimitOptions,
) -> Result<LimitResult> {
    limit_search(data, params, design, opts, LimitKind::Detection)
}

/// Smallest true concentration whose median relative fiducial interval
/// width (width over point estimate) drops to `rel_width_target`, over
/// simulated measurement batches under `design`. Often not attainable:
/// the relative width can plateau above the target, which is reported
/// rather than raised as an error.
pub fn quantification_limit(
    data: &InterlabDataset,
    params: &ModelParams,
    design: &QueryDesign,
    opts: &LimitOptions,
) -> Result<LimitResult> {
    limit_search(data, params, design, opts, LimitKind::Quantification)
}

fn limit_search(
    data: &InterlabDataset,
    params: &ModelParams,
    design: &QueryDesign,
    opts: &LimitOptions,
    kind: LimitKind,
) -> Result<LimitResult> {
    params.validate()?;
    design.validate(data)?;
    if params.n_labs() != data.n_labs() {
        return Err(Error::Config(format!(
            "dataset has {} labs but params have {}",
            data.n_labs(),
            params.n_labs()
        )));
    }
    if !(opts.search_max.is_finite() && opts.search_max > 0.0) {
        return Err(Error::Config(format!(
            "search_max must be positive, got {}",
            opts.search_max
        )));
    }
    if !(opts.tol.is_finite() && opts.tol > 0.0) {
        return Err(Error::Config(format!("tol must be positive, got {}", opts.tol)));
    }
    if opts.n_sim == 0 {
        return Err(Error::Config("n_sim must be positive".into()));
    }
    if !(opts.rel_width_target > 0.0) {
        return Err(Error::Config(format!(
            "rel_width_target must be positive, got {}",
            opts.rel_width_target
        )));
    }
    z_quantile(opts.level)?;

    let batch = draw_parameter_fiducials(
        data,
        opts.n_draws,
        child_seed(opts.seed, &[tag::LIMIT, 1]),
        &DrawOptions::default(),
    )?;
    if batch.n_usable() < MIN_SAMPLE {
        return Err(Error::InsufficientData(format!(
            "only {} of {} parameter draws are usable; the limit search needs at least {MIN_SAMPLE}",
            batch.n_usable(),
            opts.n_draws
        )));
    }
    // Fixed measurement noise per simulated batch: reusing it across
    // candidate concentrations keeps the criterion monotone along the
    // search.
    let normals: Vec<Vec<Vec<(f64, f64)>>> = (0..opts.n_sim)
        .map(|s| {
            let mut rng = stream(opts.seed, &[tag::LIMIT, 2, s as u64]);
            design
                .replicates
                .iter()
                .map(|&n| {
                    (0..n)
                        .map(|_| (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
                        .collect()
                })
                .collect()
        })
        .collect();
    let pivot_seed = child_seed(opts.seed, &[tag::LIMIT, 3]);
    let labs: Vec<String> = design
        .lab_indices
        .iter()
        .map(|&i| data.labs()[i].clone())
        .collect();

    let met = |x: f64| -> Result<bool> {
        let cells: CellArray = normals
            .iter()
            .map(|sim| {
                sim.iter()
                    .enumerate()
                    .map(|(p, reps)| {
                        let lab = design.lab_indices[p];
                        reps.iter()
                            .map(|&(ze, zp)| {
                                params.alpha[lab]
                                    + params.beta[lab] * x * (params.sigma_eta * ze).exp()
                                    + params.sigma_eps * zp
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let ids = (1..=opts.n_sim).map(|s| format!("s{s}")).collect();
        let q = CalibrationQuery::new(data, &labs, ids, cells)?;
        let samples = concentration_pivots(&q, &batch, pivot_seed, &PivotOptions::default())?;
        let stats: Vec<f64> = samples
            .par_iter()
            .map(|s| {
                let iv = hdi(s, opts.level)?;
                Ok(match kind {
                    LimitKind::Detection => iv.lower,
                    LimitKind::Quantification => {
                        if iv.point > 0.0 {
                            iv.width() / iv.point
                        } else {
                            f64::INFINITY
                        }
                    }
                })
            })
            .collect::<Result<_>>()?;
        Ok(match kind {
            LimitKind::Detection => median(&stats) > 0.0,
            LimitKind::Quantification => median(&stats) <= opts.rel_width_target,
        })
    };

    if !met(opts.search_max)? {
        return Ok(LimitResult::NotAttainable {
            search_max: opts.search_max,
        });
    }
    let (mut lo, mut hi) = (0.0, opts.search_max);
    while hi - lo > opts.tol {
        let mid = 0.5 * (lo + hi);
        if met(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(LimitResult::Found { value: hi })
}
