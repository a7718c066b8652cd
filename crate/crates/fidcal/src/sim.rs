//! Monte Carlo scenario runner: coverage, interval width, and point
//! estimation summaries for the calibration methods at configurable scale.
//!
//! A [`Scenario`] bundles a generating truth (training design, model
//! parameters, query design, unknown concentrations) with an experiment
//! budget. [`run_scenario`] simulates a training dataset per replicate,
//! refits it, measures fresh unknowns, computes the requested intervals
//! and point estimates, and pools everything into a [`MetricsTable`].
//!
//! Replicates run in parallel, but every random stream is keyed on
//! (scenario seed, replicate index), so the statistical content of the
//! output never depends on the thread count. Only the wall clock fields
//! vary between runs.

use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{
    bootstrap_intervals, mle_concentration, wald_mle_interval, wald_mme_interval,
    BootstrapOptions, MmeWaldOptions,
};
use crate::data::{QueryDesign, StudyDesign};
use crate::error::{Error, Result};
use crate::estimation::{fit_mle, FitOptions, FitResult};
use crate::fiducial::{
    concentration_pivots, draw_parameter_fiducials, fiducial_mode, hdi, DrawOptions, PivotOptions,
};
use crate::interval::{IntervalEstimate, IntervalMethod};
use crate::model::{simulate_dataset, simulate_query, ModelParams};
use crate::quadrature::GaussHermite;
use crate::rng::{child_seed, tag};

/// Point estimators the runner can score against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointEstimator {
    /// Mode of the smoothed fiducial sample.
    FiducialMode,
    /// Maximizer of the integrated likelihood in the concentration.
    Mle,
}

impl PointEstimator {
    pub fn name(&self) -> &'static str {
        match self {
            PointEstimator::FiducialMode => "fiducial_mode",
            PointEstimator::Mle => "mle",
        }
    }
}

fn default_estimators() -> Vec<PointEstimator> {
    vec![PointEstimator::FiducialMode, PointEstimator::Mle]
}

fn default_level() -> f64 {
    0.95
}

/// One Monte Carlo experiment: the generating truth plus the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Training study simulated afresh in every replicate.
    pub train: StudyDesign,
    /// Generating parameters; also the truth that coverage is scored on.
    pub params: ModelParams,
    /// Where the unknown samples are measured.
    pub test: QueryDesign,
    /// True concentrations of the unknowns, one query per replicate.
    pub truths: Vec<f64>,
    pub n_datasets: usize,
    pub n_fiducial: usize,
    pub n_boot: usize,
    pub methods: Vec<IntervalMethod>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<PointEstimator>,
    #[serde(default = "default_level")]
    pub level: f64,
    pub seed: u64,
}

impl Scenario {
    /// Built-in designs at desk scale (500 datasets, 2000 fiducial draws,
    /// 1000 bootstrap replicates).
    ///
    /// Small training studies `1.A`/`2.A` use three labs at
    /// concentrations {0, 10, 30} with intercept and slope 1; moderate
    /// studies `1.B`/`2.B` use ten labs on the grid {0, 5, ..., 40} with
    /// intercept 0. All use five replicates per cell, measurement spread
    /// 1, and response-spread growth rate 0.1. The `1.x` variants measure
    /// each unknown in one lab with five replicates; `2.A` spreads three
    /// single-replicate measurements over three labs and `2.B` six over
    /// six labs.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let small = (
            StudyDesign::balanced(3, vec![0.0, 10.0, 30.0], 5),
            ModelParams::homogeneous(3, 1.0, 1.0, 0.1, 1.0)?,
            vec![5.0, 20.0, 50.0],
        );
        let grid: Vec<f64> = (0..9).map(|j| 5.0 * j as f64).collect();
        let moderate = (
            StudyDesign::balanced(10, grid.clone(), 5),
            ModelParams::homogeneous(10, 0.0, 1.0, 0.1, 1.0)?,
            grid.iter().copied().chain([50.0]).collect::<Vec<f64>>(),
        );
        let all = vec![
            IntervalMethod::Fiducial,
            IntervalMethod::Bootstrap,
            IntervalMethod::WaldMle,
            IntervalMethod::WaldMme,
        ];
        let no_mme = all[..3].to_vec();
        let ((train, params, truths), test, methods) = match name {
            "1.A" => (small, QueryDesign::uniform(vec![0], 5), all),
            "2.A" => (small, QueryDesign::uniform(vec![0, 1, 2], 1), no_mme),
            "1.B" => (moderate, QueryDesign::uniform(vec![0], 5), all),
            "2.B" => (
                moderate,
                QueryDesign::uniform(vec![0, 1, 2, 3, 4, 5], 1),
                no_mme,
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected 1.A, 2.A, 1.B, or 2.B"
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            train,
            params,
            test,
            truths,
            n_datasets: 500,
            n_fiducial: 2000,
            n_boot: 1000,
            methods,
            estimators: default_estimators(),
            level: 0.95,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.train.validate()?;
        if self.train.n_labs() != self.params.n_labs() {
            return Err(Error::Config(format!(
                "training design has {} labs but params have {}",
                self.train.n_labs(),
                self.params.n_labs()
            )));
        }
        if let Some(&i) = self
            .test
            .lab_indices
            .iter()
            .find(|&&i| i >= self.train.n_labs())
        {
            return Err(Error::Config(format!(
                "test design references lab index {i} outside the training study"
            )));
        }
        if self.truths.is_empty() || self.truths.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config(
                "truths must be nonempty, finite, and nonnegative".into(),
            ));
        }
        if self.methods.is_empty() && self.estimators.is_empty() {
            return Err(Error::Config(
                "nothing to do: no methods and no estimators requested".into(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config("interval level must be in (0, 1)".into()));
        }
        if self.n_datasets == 0 {
            return Err(Error::Config("n_datasets must be positive".into()));
        }
        if self.needs_fiducial() && self.n_fiducial == 0 {
            return Err(Error::Config("n_fiducial must be positive".into()));
        }
        if self.methods.contains(&IntervalMethod::Bootstrap) && self.n_boot < 200 {
            return Err(Error::Config(format!(
                "the parametric bootstrap needs at least 200 replicates, got {}",
                self.n_boot
            )));
        }
        Ok(())
    }

    pub fn from_json_str(raw: &str) -> Result<Self> {
        let sc: Self =
            serde_json::from_str(raw).map_err(|e| Error::Config(format!("bad scenario: {e}")))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_json_path(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&raw)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    fn needs_fiducial(&self) -> bool {
        self.methods.contains(&IntervalMethod::Fiducial)
            || self.estimators.contains(&PointEstimator::FiducialMode)
    }

    fn needs_fit(&self) -> bool {
        self.methods
            .iter()
            .any(|m| matches!(m, IntervalMethod::Bootstrap | IntervalMethod::WaldMle))
            || self.estimators.contains(&PointEstimator::Mle)
    }
}

/// Pooled interval behavior for one (true concentration, method) pair.
///
/// Averages run over the replicates where the method produced an
/// interval; a row with `n_intervals` 0 reports zeroes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub truth: f64,
    pub method: IntervalMethod,
    pub n_intervals: usize,
    pub avg_lower: f64,
    pub avg_upper: f64,
    pub avg_width: f64,
    pub coverage: f64,
    /// Binomial Monte Carlo standard error sqrt(p(1-p)/n).
    pub coverage_se: f64,
}

/// Pooled point estimation error for one (true concentration, estimator)
/// pair. `normalized` records whether the metrics were divided by the
/// truth (positive truth) or left on the raw scale (truth zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub truth: f64,
    pub estimator: PointEstimator,
    pub n_estimates: usize,
    pub bias: f64,
    pub abs_bias: f64,
    pub rmse: f64,
    pub normalized: bool,
}

/// Per-method failure and cost accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDiagnostics {
    pub method: IntervalMethod,
    /// Missing intervals across usable replicates, counted per unknown.
    pub n_failures: usize,
    /// Computation time summed across replicates, so parallel runs
    /// report total thread time rather than elapsed time.
    pub wall_clock_s: f64,
}

/// Everything [`run_scenario`] measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub scenario: String,
    pub n_datasets: usize,
    /// Replicates dropped whole because simulation or the shared
    /// maximum-likelihood fit failed.
    pub n_failed_replicates: usize,
    /// First few replicate-level failure messages, for diagnosis.
    pub replicate_errors: Vec<String>,
    pub intervals: Vec<IntervalRow>,
    pub points: Vec<PointRow>,
    pub diagnostics: Vec<MethodDiagnostics>,
    /// Shared fit cost, summed across replicates.
    pub fit_wall_clock_s: f64,
}

impl MetricsTable {
    pub fn interval_row(&self, truth: f64, method: IntervalMethod) -> Option<&IntervalRow> {
        self.intervals
            .iter()
            .find(|r| r.truth == truth && r.method == method)
    }

    pub fn point_row(&self, truth: f64, estimator: PointEstimator) -> Option<&PointRow> {
        self.points
            .iter()
            .find(|r| r.truth == truth && r.estimator == estimator)
    }

    pub fn diagnostics_for(&self, method: IntervalMethod) -> Option<&MethodDiagnostics> {
        self.diagnostics.iter().find(|d| d.method == method)
    }
}

/// Bias, absolute bias, and root-mean-square error of `estimates`
/// against `truth`. Each is divided by the truth when it is positive;
/// at truth zero relative error is undefined, so the raw values are
/// returned instead.
pub fn point_metrics(estimates: &[f64], truth: f64) -> (f64, f64, f64) {
    assert!(!estimates.is_empty(), "point_metrics needs estimates");
    let n = estimates.len() as f64;
    let (mut sum, mut sum_abs, mut sum_sq) = (0.0, 0.0, 0.0);
    for &e in estimates {
        let d = e - truth;
        sum += d;
        sum_abs += d.abs();
        sum_sq += d * d;
    }
    let scale = if truth > 0.0 { truth } else { 1.0 };
    (
        sum / n / scale,
        sum_abs / n / scale,
        (sum_sq / n).sqrt() / scale,
    )
}

/// One completed replicate: `intervals[m][u]` and `points[e][u]` follow
/// the scenario's method and estimator order; `None` marks a failure.
struct Replicate {
    intervals: Vec<Vec<Option<IntervalEstimate>>>,
    points: Vec<Vec<Option<f64>>>,
    fit_time: Duration,
    method_times: Vec<Duration>,
}

fn mle_points(
    fit: &FitResult,
    query: &crate::data::CalibrationQuery,
    quad: &GaussHermite,
    n_unknowns: usize,
) -> Vec<Option<f64>> {
    (0..n_unknowns)
        .map(|u| mle_concentration(&fit.params, query, u, quad).ok())
        .collect()
}

fn run_replicate(sc: &Scenario, m: u64, quad: &GaussHermite) -> Result<Replicate> {
    let data = simulate_dataset(&sc.params, &sc.train, child_seed(sc.seed, &[tag::TRAIN, m]))?;
    let query = simulate_query(
        &sc.params,
        &data,
        &sc.test,
        &sc.truths,
        child_seed(sc.seed, &[tag::TEST, m]),
    )?;
    let n_unknowns = sc.truths.len();

    let mut fit_time = Duration::ZERO;
    let fit = if sc.needs_fit() {
        let t0 = Instant::now();
        let opts = FitOptions {
            observed_info: sc.methods.contains(&IntervalMethod::WaldMle),
            ..FitOptions::default()
        };
        let fit = fit_mle(&data, &opts)?;
        fit_time = t0.elapsed();
        Some(fit)
    } else {
        None
    };

    // The fiducial sample serves both the interval and the mode, and the
    // interval's point estimate is the mode, so each sample is
    // summarized at most once.
    let mut fid_samples = None;
    let mut fid_time = Duration::ZERO;
    let mut stage_errors: Vec<String> = Vec::new();
    if sc.needs_fiducial() {
        let t0 = Instant::now();
        let drawn = draw_parameter_fiducials(
            &data,
            sc.n_fiducial,
            child_seed(sc.seed, &[tag::PARAM_DRAW, m]),
            &DrawOptions::default(),
        )
        .and_then(|batch| {
            concentration_pivots(
                &query,
                &batch,
                child_seed(sc.seed, &[tag::CONC_DRAW, m]),
                &PivotOptions::default(),
            )
        });
        match drawn {
            Ok(samples) => fid_samples = Some(samples),
            Err(e) => stage_errors.push(format!("fiducial stage: {e}")),
        }
        fid_time = t0.elapsed();
    }
    let fid_intervals: Vec<Option<IntervalEstimate>> = {
        let t0 = Instant::now();
        let out = (0..n_unknowns)
            .map(|u| {
                fid_samples
                    .as_ref()
                    .and_then(|samples| hdi(&samples[u], sc.level).ok())
            })
            .collect();
        fid_time += t0.elapsed();
        out
    };

    let mut intervals = Vec::with_capacity(sc.methods.len());
    let mut method_times = Vec::with_capacity(sc.methods.len());
    for &method in &sc.methods {
        let t0 = Instant::now();
        let row: Vec<Option<IntervalEstimate>> = match method {
            IntervalMethod::Fiducial => fid_intervals.clone(),
            IntervalMethod::Bootstrap => {
                let fit = fit.as_ref().expect("bootstrap requires the fit");
                let opts = BootstrapOptions {
                    n_boot: sc.n_boot,
                    level: sc.level,
                    seed: child_seed(sc.seed, &[tag::BOOT, m]),
                    ..BootstrapOptions::new(0)
                };
                match bootstrap_intervals(&data, fit, &query, &opts) {
                    Ok(outcomes) => outcomes.into_iter().map(|o| Some(o.interval)).collect(),
                    Err(e) => {
                        stage_errors.push(format!("bootstrap stage: {e}"));
                        vec![None; n_unknowns]
                    }
                }
            }
            IntervalMethod::WaldMle => {
                let fit = fit.as_ref().expect("the Wald interval requires the fit");
                (0..n_unknowns)
                    .map(|u| wald_mle_interval(fit, &query, u, sc.level).ok())
                    .collect()
            }
            IntervalMethod::WaldMme => (0..n_unknowns)
                .map(|u| {
                    let opts =
                        MmeWaldOptions::new(child_seed(sc.seed, &[tag::MME_COV, m, u as u64]));
                    wald_mme_interval(&data, &query, u, sc.level, &opts).ok()
                })
                .collect(),
        };
        let elapsed = if method == IntervalMethod::Fiducial {
            fid_time
        } else {
            t0.elapsed()
        };
        intervals.push(row);
        method_times.push(elapsed);
    }

    let points: Vec<Vec<Option<f64>>> = sc
        .estimators
        .iter()
        .map(|est| match est {
            PointEstimator::FiducialMode => {
                // Reuse the interval's point when it was computed; the
                // interval point is the density mode.
                if let Some(pos) = sc
                    .methods
                    .iter()
                    .position(|&w| w == IntervalMethod::Fiducial)
                {
                    intervals[pos].iter().map(|i| i.map(|i| i.point)).collect()
                } else {
                    (0..n_unknowns)
                        .map(|u| {
                            fid_samples
                                .as_ref()
                                .and_then(|samples| fiducial_mode(&samples[u]).ok())
                        })
                        .collect()
                }
            }
            PointEstimator::Mle => {
                let fit = fit.as_ref().expect("the MLE estimator requires the fit");
                mle_points(fit, &query, quad, n_unknowns)
            }
        })
        .collect();

    // A replicate that contributed nothing is a failed replicate, not a
    // sea of per-method holes.
    let produced_any = intervals.iter().flatten().any(Option::is_some)
        || points.iter().flatten().any(Option::is_some);
    if !produced_any {
        let why = stage_errors
            .first()
            .cloned()
            .unwrap_or_else(|| "every requested computation failed".into());
        return Err(Error::Numerical(why));
    }

    Ok(Replicate {
        intervals,
        points,
        fit_time,
        method_times,
    })
}

/// Run the whole experiment. Deterministic in `scenario.seed` up to the
/// wall clock fields; replicate failures are excluded and counted, and
/// the run aborts if more than 20% of replicates fail.
pub fn run_scenario(sc: &Scenario) -> Result<MetricsTable> {
    sc.validate()?;
    let quad = GaussHermite::new(FitOptions::default().quad_order)?;
    let outcomes: Vec<std::result::Result<Replicate, String>> = (0..sc.n_datasets as u64)
        .into_par_iter()
        .map(|m| run_replicate(sc, m, &quad).map_err(|e| format!("replicate {m}: {e}")))
        .collect();

    let n_failed = outcomes.iter().filter(|o| o.is_err()).count();
    if n_failed as f64 > 0.2 * sc.n_datasets as f64 {
        let first = outcomes
            .iter()
            .find_map(|o| o.as_ref().err())
            .cloned()
            .unwrap_or_default();
        return Err(Error::Numerical(format!(
            "{n_failed} of {} replicates failed; first failure: {first}",
            sc.n_datasets
        )));
    }
    let replicate_errors: Vec<String> = outcomes
        .iter()
        .filter_map(|o| o.as_ref().err())
        .take(10)
        .cloned()
        .collect();
    let done: Vec<&Replicate> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();

    let mut intervals = Vec::with_capacity(sc.methods.len() * sc.truths.len());
    for (mp, &method) in sc.methods.iter().enumerate() {
        for (u, &truth) in sc.truths.iter().enumerate() {
            let got: Vec<&IntervalEstimate> =
                done.iter().filter_map(|r| r.intervals[mp][u].as_ref()).collect();
            let n = got.len();
            let (mut lo, mut hi, mut wid, mut hits) = (0.0, 0.0, 0.0, 0usize);
            for iv in &got {
                lo += iv.lower;
                hi += iv.upper;
                wid += iv.width();
                hits += iv.covers(truth) as usize;
            }
            let (avg_lower, avg_upper, avg_width, coverage) = if n > 0 {
                let nf = n as f64;
                (lo / nf, hi / nf, wid / nf, hits as f64 / nf)
            } else {
                (0.0, 0.0, 0.0, 0.0)
            };
            let coverage_se = if n > 0 {
                (coverage * (1.0 - coverage) / n as f64).sqrt()
            } else {
                0.0
            };
            intervals.push(IntervalRow {
                truth,
                method,
                n_intervals: n,
                avg_lower,
                avg_upper,
                avg_width,
                coverage,
                coverage_se,
            });
        }
    }

    let mut points = Vec::with_capacity(sc.estimators.len() * sc.truths.len());
    for (ep, &estimator) in sc.estimators.iter().enumerate() {
        for (u, &truth) in sc.truths.iter().enumerate() {
            let got: Vec<f64> = done.iter().filter_map(|r| r.points[ep][u]).collect();
            let (bias, abs_bias, rmse) = if got.is_empty() {
                (0.0, 0.0, 0.0)
            } else {
                point_metrics(&got, truth)
            };
            points.push(PointRow {
                truth,
                estimator,
                n_estimates: got.len(),
                bias,
                abs_bias,
                rmse,
                normalized: truth > 0.0,
            });
        }
    }

    let diagnostics = sc
        .methods
        .iter()
        .enumerate()
        .map(|(mp, &method)| MethodDiagnostics {
            method,
            n_failures: done
                .iter()
                .map(|r| r.intervals[mp].iter().filter(|i| i.is_none()).count())
                .sum(),
            wall_clock_s: done.iter().map(|r| r.method_times[mp].as_secs_f64()).sum(),
        })
        .collect();

    Ok(MetricsTable {
        scenario: sc.name.clone(),
        n_datasets: sc.n_datasets,
        n_failed_replicates: n_failed,
        replicate_errors,
        intervals,
        points,
        diagnostics,
        fit_wall_clock_s: done.iter().map(|r| r.fit_time.as_secs_f64()).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_scenario(seed: u64) -> Scenario {
        Scenario {
            name: "tiny".into(),
            train: StudyDesign::balanced(2, vec![0.0, 5.0, 10.0], 3),
            params: ModelParams::homogeneous(2, 1.0, 1.0, 0.1, 0.5).unwrap(),
            test: QueryDesign::uniform(vec![0], 3),
            truths: vec![4.0],
            n_datasets: 3,
            n_fiducial: 150,
            n_boot: 200,
            methods: vec![IntervalMethod::Fiducial, IntervalMethod::WaldMle],
            estimators: vec![PointEstimator::FiducialMode, PointEstimator::Mle],
            level: 0.95,
            seed,
        }
    }

    #[test]
    fn presets_match_their_published_designs() {
        let a = Scenario::preset("1.A", 7).unwrap();
        assert_eq!(a.train.n_labs(), 3);
        assert_eq!(a.train.concentrations, vec![0.0, 10.0, 30.0]);
        assert!(a.train.replicates.iter().flatten().all(|&n| n == 5));
        assert!(a.params.alpha.iter().all(|&v| v == 1.0));
        assert!(a.params.beta.iter().all(|&v| v == 1.0));
        assert_eq!(a.params.sigma_eta, 0.1);
        assert_eq!(a.params.sigma_eps, 1.0);
        assert_eq!(a.test.lab_indices, vec![0]);
        assert_eq!(a.test.replicates, vec![5]);
        assert_eq!(a.truths, vec![5.0, 20.0, 50.0]);
        assert_eq!(a.methods.len(), 4);
        assert_eq!(a.n_datasets, 500);

        let a2 = Scenario::preset("2.A", 7).unwrap();
        assert_eq!(a2.test.lab_indices, vec![0, 1, 2]);
        assert_eq!(a2.test.replicates, vec![1, 1, 1]);
        assert!(!a2.methods.contains(&IntervalMethod::WaldMme));

        let b = Scenario::preset("1.B", 7).unwrap();
        assert_eq!(b.train.n_labs(), 10);
        assert_eq!(
            b.train.concentrations,
            vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0]
        );
        assert!(b.params.alpha.iter().all(|&v| v == 0.0));
        assert_eq!(b.test.lab_indices, vec![0]);
        assert_eq!(b.truths.len(), 10);
        assert_eq!(b.truths[0], 0.0);
        assert_eq!(*b.truths.last().unwrap(), 50.0);

        let b2 = Scenario::preset("2.B", 7).unwrap();
        assert_eq!(b2.test.lab_indices.len(), 6);
        assert!(b2.test.replicates.iter().all(|&n| n == 1));

        assert!(Scenario::preset("3.C", 7).is_err());
    }

    #[test]
    fn scenarios_round_trip_through_json() {
        let sc = Scenario::preset("2.B", 99).unwrap();
        let back = Scenario::from_json_str(&sc.to_json_string()).unwrap();
        assert_eq!(sc, back);
    }

    #[test]
    fn defaults_fill_in_for_sparse_scenario_files() {
        let mut sc = tiny_scenario(1);
        sc.estimators = default_estimators();
        sc.level = 0.95;
        let mut json: serde_json::Value = serde_json::from_str(&sc.to_json_string()).unwrap();
        json.as_object_mut().unwrap().remove("estimators");
        json.as_object_mut().unwrap().remove("level");
        let back = Scenario::from_json_str(&json.to_string()).unwrap();
        assert_eq!(back, sc);
    }

    #[test]
    fn point_metrics_on_exact_estimates_vanish() {
        assert_eq!(point_metrics(&[5.0, 5.0, 5.0], 5.0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn point_metrics_match_the_hand_computed_pair() {
        let (bias, abs_bias, rmse) = point_metrics(&[4.0, 6.0], 5.0);
        assert_abs_diff_eq!(bias, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(abs_bias, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(rmse, 0.2, epsilon = 1e-15);
    }

    #[test]
    fn point_metrics_at_zero_truth_stay_unnormalized() {
        let (bias, abs_bias, rmse) = point_metrics(&[0.5, 1.5], 0.0);
        assert_abs_diff_eq!(bias, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(abs_bias, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rmse, 1.25f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn noise_free_scenario_covers_exactly_with_degenerate_width() {
        let sc = Scenario {
            name: "noise-free".into(),
            train: StudyDesign::balanced(2, vec![0.0, 4.0, 8.0], 2),
            params: ModelParams::homogeneous(2, 1.0, 2.0, 0.0, 0.0).unwrap(),
            test: QueryDesign::uniform(vec![0], 2),
            truths: vec![3.0],
            n_datasets: 2,
            n_fiducial: 150,
            n_boot: 200,
            methods: vec![IntervalMethod::Fiducial],
            estimators: vec![PointEstimator::FiducialMode],
            level: 0.95,
            seed: 5,
        };
        let table = run_scenario(&sc).unwrap();
        assert_eq!(table.n_failed_replicates, 0);
        let row = table.interval_row(3.0, IntervalMethod::Fiducial).unwrap();
        assert_eq!(row.n_intervals, 2);
        assert_eq!(row.coverage, 1.0);
        assert!(row.avg_width <= 1e-6, "width {}", row.avg_width);
        let pt = table.point_row(3.0, PointEstimator::FiducialMode).unwrap();
        assert!(pt.bias.abs() <= 1e-6);
    }

    #[test]
    fn results_do_not_depend_on_the_thread_count() {
        let sc = tiny_scenario(11);
        let run_with = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_scenario(&sc).unwrap())
        };
        let one = run_with(1);
        let four = run_with(4);
        assert_eq!(one.intervals, four.intervals);
        assert_eq!(one.points, four.points);
        assert_eq!(one.n_failed_replicates, four.n_failed_replicates);
        assert_eq!(
            one.intervals.len(),
            sc.methods.len() * sc.truths.len(),
            "one row per (method, truth)"
        );
        assert_eq!(one.points.len(), sc.estimators.len() * sc.truths.len());
        assert_eq!(one.diagnostics.len(), sc.methods.len());
    }

    #[test]
    fn doubling_the_draw_budget_leaves_coverage_stable() {
        let mut sc = tiny_scenario(17);
        sc.n_datasets = 32;
        sc.methods = vec![IntervalMethod::Fiducial];
        sc.estimators = vec![];
        sc.n_fiducial = 200;
        let base = run_scenario(&sc).unwrap();
        sc.n_fiducial = 400;
        let doubled = run_scenario(&sc).unwrap();
        let a = base.interval_row(4.0, IntervalMethod::Fiducial).unwrap();
        let b = doubled.interval_row(4.0, IntervalMethod::Fiducial).unwrap();
        // Two MC standard errors at the least favorable p = 1/2.
        let bound = 2.0 * (0.25 / sc.n_datasets as f64).sqrt();
        assert!(
            (a.coverage - b.coverage).abs() <= bound,
            "coverage moved from {} to {}",
            a.coverage,
            b.coverage
        );
    }

    #[test]
    fn comparator_methods_run_end_to_end_at_small_scale() {
        let mut sc = tiny_scenario(23);
        sc.n_datasets = 2;
        sc.methods = vec![
            IntervalMethod::Fiducial,
            IntervalMethod::Bootstrap,
            IntervalMethod::WaldMme,
        ];
        sc.estimators = vec![PointEstimator::Mle];
        let table = run_scenario(&sc).unwrap();
        for row in &table.intervals {
            assert_eq!(row.n_intervals, 2, "{} failed", row.method);
            assert!(row.avg_width >= 0.0);
            assert!(row.avg_lower >= 0.0, "lower limits are clamped at zero");
            assert!((0.0..=1.0).contains(&row.coverage));
        }
        for d in &table.diagnostics {
            assert_eq!(d.n_failures, 0);
            assert!(d.wall_clock_s >= 0.0);
        }
        let boot = table.diagnostics_for(IntervalMethod::Bootstrap).unwrap();
        assert!(boot.wall_clock_s > 0.0);
    }

    #[test]
    fn widespread_replicate_failure_aborts_the_run() {
        // One blank replicate per lab leaves no degrees of freedom for
        // the blank spread, so the fiducial stage fails in every
        // replicate and nothing is produced.
        let sc = Scenario {
            name: "degenerate".into(),
            train: StudyDesign::balanced(2, vec![0.0, 10.0], 1),
            params: ModelParams::homogeneous(2, 1.0, 1.0, 0.1, 0.5).unwrap(),
            test: QueryDesign::uniform(vec![0], 2),
            truths: vec![4.0],
            n_datasets: 4,
            n_fiducial: 150,
            n_boot: 200,
            methods: vec![IntervalMethod::Fiducial],
            estimators: vec![PointEstimator::FiducialMode],
            level: 0.95,
            seed: 3,
        };
        let err = run_scenario(&sc).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("replicates failed"), "{msg}");
        assert!(msg.contains("fiducial stage"), "{msg}");
    }
}
