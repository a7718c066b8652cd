//! Fiducial inference for the calibration model.
//!
//! Each draw starts from an independent standard-normal array shaped like
//! the dataset, one pair `(z_eta, z_eps)` per observation, and inverts the
//! data-generating equation for the parameters in three closed-form stages
//! (blank noise and intercepts, slopes, refined intercepts) followed by a
//! two-equation numeric solve for the error spreads. Draws for which the
//! dispersion system has no root are recorded as failed rather than
//! silently dropped, so failure rates stay observable.
//!
//! Given a batch of parameter draws, the concentration of an unknown
//! sample is read off each draw through one more pivot inversion, and the
//! resulting sample of concentration values is summarized by a kernel
//! density: point estimate at the density mode, interval as the shortest
//! region holding the requested mass (one-sided from zero when the mode
//! sits on the zero boundary of a truncated sample).

pub mod pivots;
pub mod solve;

pub use pivots::{alpha_pivots_updated, beta_pivots, init_pivots, InitialPivots};
pub use solve::{solve_variance_system, SolveOptions, VarianceSolution};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CalibrationQuery, CellArray, InterlabDataset};
use crate::error::{Error, Result};
use crate::estimation::{mme_sigma_eta, mme_zero_level, per_lab_ols_slopes};
use crate::interval::{IntervalEstimate, IntervalMethod};
use crate::kde::{kde_density, DensityGrid, DEFAULT_GRID};
use crate::rng::{stream, tag};

/// Outcome of one draw, or of one concentration readout within a draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawStatus {
    /// A single root of the dispersion system.
    Solved,
    /// Several distinct roots; the one reproducing the data best was kept.
    MultipleSolutionsResolved,
    /// No root, or a degenerate pivot; the draw carries no parameters.
    NoSolution,
}

/// The standard-normal array underlying a draw, kept so downstream
/// consumers can reuse exactly the errors that produced the parameters.
#[derive(Debug, Clone)]
pub struct AuxNormals {
    pub z_eta: CellArray,
    pub z_eps: CellArray,
}

/// One joint parameter draw. Parameter fields are meaningful only when
/// `status` is not `NoSolution`.
#[derive(Debug, Clone)]
pub struct FiducialDraw {
    pub status: DrawStatus,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma_eta: f64,
    pub sigma_eps: f64,
    /// Blank-stage noise pivot, before the dispersion solve refines it.
    pub sigma_eps_init: f64,
    /// Scaled residuals of the dispersion system at the accepted root.
    pub residual: (f64, f64),
    pub n_roots: usize,
    pub aux: AuxNormals,
}

impl FiducialDraw {
    pub fn is_usable(&self) -> bool {
        self.status != DrawStatus::NoSolution
    }
}

#[derive(Debug, Clone)]
pub struct DrawOptions {
    /// Plug-in value for the response-spread growth rate used by the slope
    /// pivots; estimated from the data when absent.
    pub sigma_eta_hat: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub start_factors: Vec<f64>,
}

impl Default for DrawOptions {
    fn default() -> Self {
        Self {
            sigma_eta_hat: None,
            tol: 1e-10,
            max_iter: 200,
            start_factors: vec![0.5, 1.0, 2.0],
        }
    }
}

/// A batch of parameter draws from one dataset.
#[derive(Debug, Clone)]
pub struct FiducialBatch {
    pub draws: Vec<FiducialDraw>,
    /// The plug-in growth-rate value the slope pivots used.
    pub sigma_eta_hat: f64,
}

impl FiducialBatch {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn n_failed(&self) -> usize {
        self.draws.iter().filter(|d| !d.is_usable()).count()
    }

    pub fn n_usable(&self) -> usize {
        self.draws.len() - self.n_failed()
    }

    fn n_labs(&self) -> Option<usize> {
        self.draws.iter().find(|d| d.is_usable()).map(|d| d.alpha.len())
    }
}

/// Draw `n_draws` joint parameter values. Deterministic in `seed`; the
/// result does not depend on how the work is scheduled across threads.
pub fn draw_parameter_fiducials(
    data: &InterlabDataset,
    n_draws: usize,
    seed: u64,
    opts: &DrawOptions,
) -> Result<FiducialBatch> {
    if n_draws == 0 {
        return Err(Error::Config("n_draws must be positive".into()));
    }
    if data.blank_df() == 0 {
        return Err(Error::InsufficientData(
            "fiducial draws need a replicated blank in at least one lab".into(),
        ));
    }
    let sigma_eta_hat = match opts.sigma_eta_hat {
        Some(v) if v >= 0.0 && v.is_finite() => v,
        Some(_) => {
            return Err(Error::Config(
                "sigma_eta_hat must be finite and nonnegative".into(),
            ))
        }
        None => {
            let blank = mme_zero_level(data)?;
            let beta = per_lab_ols_slopes(data);
            mme_sigma_eta(data, &beta, blank.sigma_eps)?
        }
    };
    let draws: Result<Vec<FiducialDraw>> = (0..n_draws)
        .into_par_iter()
        .map(|d| one_draw(data, sigma_eta_hat, seed, d as u64, opts))
        .collect();
    Ok(FiducialBatch {
        draws: draws?,
        sigma_eta_hat,
    })
}

fn one_draw(
    data: &InterlabDataset,
    sigma_eta_hat: f64,
    seed: u64,
    index: u64,
    opts: &DrawOptions,
) -> Result<FiducialDraw> {
    let mut rng = stream(seed, &[tag::PARAM_DRAW, index]);
    let mut z_eta = data.zeros_like();
    let mut z_eps = data.zeros_like();
    for i in 0..data.n_labs() {
        for j in 0..data.n_levels() {
            for k in 0..data.n_replicates(i, j) {
                z_eta[i][j][k] = StandardNormal.sample(&mut rng);
                z_eps[i][j][k] = StandardNormal.sample(&mut rng);
            }
        }
    }
    let aux = AuxNormals { z_eta, z_eps };
    let failed = |aux: AuxNormals| FiducialDraw {
        status: DrawStatus::NoSolution,
        alpha: Vec::new(),
        beta: Vec::new(),
        sigma_eta: f64::NAN,
        sigma_eps: f64::NAN,
        sigma_eps_init: f64::NAN,
        residual: (f64::NAN, f64::NAN),
        n_roots: 0,
        aux,
    };
    // Degenerate draws are a property of the draw, not the request: count
    // them as failures. Structural errors still propagate.
    let init = match init_pivots(data, &aux.z_eps) {
        Ok(v) => v,
        Err(Error::Numerical(_)) => return Ok(failed(aux)),
        Err(e) => return Err(e),
    };
    let beta = match pivots::beta_pivots(data, &init, sigma_eta_hat, &aux.z_eta, &aux.z_eps) {
        Ok(v) => v,
        Err(Error::Numerical(_)) => return Ok(failed(aux)),
        Err(e) => return Err(e),
    };
    let alpha = match pivots::alpha_pivots_updated(
        data,
        &beta,
        init.sigma_eps,
        sigma_eta_hat,
        &aux.z_eta,
        &aux.z_eps,
    ) {
        Ok(v) => v,
        Err(Error::Numerical(_)) => return Ok(failed(aux)),
        Err(e) => return Err(e),
    };
    let mut solve_opts = SolveOptions::around(sigma_eta_hat.max(1e-4), init.sigma_eps);
    solve_opts.tol = opts.tol;
    solve_opts.max_iter = opts.max_iter;
    solve_opts.start_factors = opts.start_factors.clone();
    let sol = solve_variance_system(data, &alpha, &beta, &aux.z_eta, &aux.z_eps, &solve_opts)?;
    Ok(match sol {
        None => failed(aux),
        Some(sol) => FiducialDraw {
            status: if sol.n_roots > 1 {
                DrawStatus::MultipleSolutionsResolved
            } else {
                DrawStatus::Solved
            },
            alpha,
            beta,
            sigma_eta: sol.sigma_eta,
            sigma_eps: sol.sigma_eps,
            sigma_eps_init: init.sigma_eps,
            residual: sol.residual,
            n_roots: sol.n_roots,
            aux,
        },
    })
}

#[derive(Debug, Clone)]
pub struct PivotOptions {
    /// Clamp each concentration value at zero before summarizing. The
    /// estimand is a nonnegative concentration, so this is the default.
    pub truncate_at_zero: bool,
}

impl Default for PivotOptions {
    fn default() -> Self {
        Self {
            truncate_at_zero: true,
        }
    }
}

/// One concentration value per parameter draw, in draw order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub draw_index: usize,
    /// Absent when the draw failed or the readout was degenerate.
    pub value: Option<f64>,
    pub status: DrawStatus,
}

/// The fiducial sample of an unknown's concentration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiducialSample {
    pub unknown_id: String,
    pub records: Vec<SampleRecord>,
    pub truncated_at_zero: bool,
}

impl FiducialSample {
    /// Usable values, in draw order.
    pub fn values(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.value).collect()
    }

    pub fn n_requested(&self) -> usize {
        self.records.len()
    }

    pub fn n_failed(&self) -> usize {
        self.records.iter().filter(|r| r.value.is_none()).count()
    }
}

/// Read an unknown's concentration off one parameter draw, given the
/// draw's measurement errors. `positions` indexes the query's lab list;
/// `z_*_star[p][k]` matches `query.cells[u][p][k]`. Returns `None` when
/// the slope denominator degenerates.
pub fn concentration_pivot_value(
    query: &CalibrationQuery,
    unknown: usize,
    draw: &FiducialDraw,
    z_eta_star: &[Vec<f64>],
    z_eps_star: &[Vec<f64>],
) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, &lab) in query.lab_indices().iter().enumerate() {
        let reps = query.position_replicates(unknown, p);
        for (k, &y) in reps.iter().enumerate() {
            num += y - draw.alpha[lab] - draw.sigma_eps * z_eps_star[p][k];
            den += draw.beta[lab] * (draw.sigma_eta * z_eta_star[p][k]).exp();
        }
    }
    let value: f64 = num / den;
    value.is_finite().then_some(value)
}

/// Turn a batch of parameter draws into one concentration sample per
/// unknown in the query. Fresh measurement errors are drawn per
/// (draw, unknown) from streams independent of the parameter stage, so
/// adding unknowns or draws never perturbs existing values.
pub fn concentration_pivots(
    query: &CalibrationQuery,
    batch: &FiducialBatch,
    seed: u64,
    opts: &PivotOptions,
) -> Result<Vec<FiducialSample>> {
    if let Some(q) = batch.n_labs() {
        if query.lab_indices().iter().any(|&i| i >= q) {
            return Err(Error::Query(
                "query lab index out of range for this draw batch".into(),
            ));
        }
    }
    let samples = query
        .unknown_ids()
        .iter()
        .enumerate()
        .map(|(u, id)| {
            let records = batch
                .draws
                .par_iter()
                .enumerate()
                .map(|(d, draw)| {
                    if !draw.is_usable() {
                        return SampleRecord {
                            draw_index: d,
                            value: None,
                            status: DrawStatus::NoSolution,
                        };
                    }
                    let mut rng = stream(seed, &[tag::CONC_DRAW, d as u64, u as u64]);
                    let n_pos = query.lab_indices().len();
                    let mut z_eta_star = Vec::with_capacity(n_pos);
                    let mut z_eps_star = Vec::with_capacity(n_pos);
                    for p in 0..n_pos {
                        let n_rep = query.position_replicates(u, p).len();
                        let mut ze = Vec::with_capacity(n_rep);
                        let mut zp = Vec::with_capacity(n_rep);
                        for _ in 0..n_rep {
                            ze.push(StandardNormal.sample(&mut rng));
                            zp.push(StandardNormal.sample(&mut rng));
                        }
                        z_eta_star.push(ze);
                        z_eps_star.push(zp);
                    }
                    match concentration_pivot_value(query, u, draw, &z_eta_star, &z_eps_star) {
                        Some(v) => SampleRecord {
                            draw_index: d,
                            value: Some(if opts.truncate_at_zero { v.max(0.0) } else { v }),
                            status: draw.status,
                        },
                        None => SampleRecord {
                            draw_index: d,
                            value: None,
                            status: DrawStatus::NoSolution,
                        },
                    }
                })
                .collect();
            FiducialSample {
                unknown_id: id.clone(),
                records,
                truncated_at_zero: opts.truncate_at_zero,
            }
        })
        .collect();
    Ok(samples)
}

pub(crate) const MIN_SAMPLE: usize = 100;

fn sample_values(sample: &FiducialSample) -> Result<Vec<f64>> {
    let values = sample.values();
    if values.len() < MIN_SAMPLE {
        return Err(Error::InsufficientData(format!(
            "only {} usable fiducial values for unknown {} (need at least {MIN_SAMPLE})",
            values.len(),
            sample.unknown_id
        )));
    }
    Ok(values)
}

/// Kernel density of a concentration sample, for export and plotting.
pub fn sample_density(sample: &FiducialSample) -> Result<DensityGrid> {
    let values = sample_values(sample)?;
    Ok(kde_density(&values, sample.truncated_at_zero, DEFAULT_GRID))
}

/// Mode of the smoothed concentration sample.
pub fn fiducial_mode(sample: &FiducialSample) -> Result<f64> {
    Ok(sample_density(sample)?.mode())
}

/// Highest-density interval of the smoothed concentration sample.
///
/// The interval is the shortest region of the kernel density holding
/// `level` mass. When the sample is truncated and the density peaks at the
/// zero boundary, the interval is anchored at zero instead. Reported lower
/// bounds are clamped at zero: the estimand cannot be negative.
pub fn hdi(sample: &FiducialSample, level: f64) -> Result<IntervalEstimate> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config("interval level must be in (0, 1)".into()));
    }
    let density = sample_density(sample)?;
    let mode = density.mode();
    let at_zero_boundary = sample.truncated_at_zero && mode == density.xs[0];
    let (lower, upper) = if at_zero_boundary {
        density.left_anchored_interval(level)
    } else {
        density.shortest_interval(level)
    };
    Ok(IntervalEstimate {
        method: IntervalMethod::Fiducial,
        level,
        lower: lower.max(0.0),
        upper,
        point: mode,
    })
}
