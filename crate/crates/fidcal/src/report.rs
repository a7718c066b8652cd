//! Serializable run artifacts: the fit report that downstream commands
//! consume, per-unknown calibration reports, and CSV renderings of
//! density grids, bands, samples, and simulation metrics.
//!
//! Reports are plain JSON with an explicit `schema_version` and no
//! timestamps, so rerunning a command on the same inputs reproduces the
//! output byte for byte.

use serde::{Deserialize, Serialize};

use crate::data::{CellArray, InterlabDataset};
use crate::error::{Error, Result};
use crate::estimation::{FitResult, ParamStdErrors};
use crate::fiducial::FiducialSample;
use crate::interval::IntervalEstimate;
use crate::kde::DensityGrid;
use crate::model::{BandPoint, ModelParams};
use crate::sim::{MethodDiagnostics, MetricsTable, Scenario};

pub const SCHEMA_VERSION: u32 = 1;

fn check_schema(found: u32, what: &str) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{what} has schema version {found}, this build reads {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

/// A fitted model plus the dataset it came from.
///
/// Carrying the training measurements makes the report self-contained:
/// calibration and goodness-of-fit runs need the data again for the
/// fiducial, bootstrap, and moment machinery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub labs: Vec<String>,
    pub concentrations: Vec<f64>,
    /// Training measurements, `cells[lab][level][replicate]`.
    pub cells: CellArray,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma_eta: f64,
    pub sigma_eps: f64,
    pub loglik: f64,
    pub converged: bool,
    pub n_iter: usize,
    pub quad_order: usize,
    pub stderr: Option<ParamStdErrors>,
    pub observed_info: Option<Vec<Vec<f64>>>,
}

impl FitReport {
    pub fn new(data: &InterlabDataset, fit: &FitResult) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            labs: data.labs().to_vec(),
            concentrations: data.concentrations().to_vec(),
            cells: (0..data.n_labs())
                .map(|i| {
                    (0..data.n_levels())
                        .map(|j| data.cell(i, j).to_vec())
                        .collect()
                })
                .collect(),
            alpha: fit.params.alpha.clone(),
            beta: fit.params.beta.clone(),
            sigma_eta: fit.params.sigma_eta,
            sigma_eps: fit.params.sigma_eps,
            loglik: fit.loglik,
            converged: fit.converged,
            n_iter: fit.n_iter,
            quad_order: fit.quad_order,
            stderr: fit.stderr.clone(),
            observed_info: fit.observed_info.clone(),
        }
    }

    /// Rebuild the training dataset embedded in the report.
    pub fn dataset(&self) -> Result<InterlabDataset> {
        InterlabDataset::new(
            self.labs.clone(),
            self.concentrations.clone(),
            self.cells.clone(),
        )
    }

    /// Rebuild the fit for the interval routines.
    pub fn fit_result(&self) -> Result<FitResult> {
        Ok(FitResult {
            params: ModelParams::new(
                self.alpha.clone(),
                self.beta.clone(),
                self.sigma_eta,
                self.sigma_eps,
            )?,
            loglik: self.loglik,
            converged: self.converged,
            n_iter: self.n_iter,
            quad_order: self.quad_order,
            stderr: self.stderr.clone(),
            observed_info: self.observed_info.clone(),
        })
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("fit report serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(raw: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(raw)?;
        check_schema(report.schema_version, "fit report")?;
        report.dataset()?;
        report.fit_result()?;
        Ok(report)
    }

    pub fn from_json_path(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Everything the calibrate command learned about one unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnknownReport {
    pub id: String,
    pub n_measurements: usize,
    /// Mode of the smoothed fiducial sample.
    pub fiducial_mode: f64,
    /// Maximizer of the integrated likelihood.
    pub mle: Option<f64>,
    pub intervals: Vec<IntervalEstimate>,
    /// Fiducial draws that produced no usable concentration value.
    pub n_fiducial_failed: usize,
    pub bootstrap_n_skipped: Option<usize>,
    pub bootstrap_unreliable: Option<bool>,
    /// Whether the fiducial lower limit clears the reporting threshold;
    /// present only when a threshold was given.
    pub exceeds_threshold: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    pub level: f64,
    pub n_fiducial: usize,
    pub n_boot: Option<usize>,
    pub seed: u64,
    pub truncated_at_zero: bool,
    pub threshold: Option<f64>,
    pub unknowns: Vec<UnknownReport>,
    pub timings: Vec<MethodDiagnostics>,
}

impl CalibrationReport {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("calibration report serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(raw: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(raw)?;
        check_schema(report.schema_version, "calibration report")?;
        Ok(report)
    }
}

/// Per-lab goodness-of-fit summary: how much of the training data the
/// central predictive band holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofLab {
    pub lab: String,
    pub n_inside: usize,
    pub n_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofReport {
    pub schema_version: u32,
    pub level: f64,
    pub labs: Vec<GofLab>,
    /// Pooled fraction of observations inside their lab's band.
    pub inside_fraction: f64,
}

impl GofReport {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("gof report serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(raw: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(raw)?;
        check_schema(report.schema_version, "gof report")?;
        Ok(report)
    }
}

/// Provenance of one simulation run: the scenario as executed plus
/// failure and cost accounting. Timing fields vary between runs; the
/// CSV tables do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub crate_version: String,
    pub scenario: Scenario,
    pub n_failed_replicates: usize,
    pub replicate_errors: Vec<String>,
    pub diagnostics: Vec<MethodDiagnostics>,
    pub fit_wall_clock_s: f64,
    pub elapsed_s: f64,
}

impl RunManifest {
    pub fn new(scenario: &Scenario, table: &MetricsTable, elapsed_s: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            scenario: scenario.clone(),
            n_failed_replicates: table.n_failed_replicates,
            replicate_errors: table.replicate_errors.clone(),
            diagnostics: table.diagnostics.clone(),
            fit_wall_clock_s: table.fit_wall_clock_s,
            elapsed_s,
        }
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run manifest serializes");
        s.push('\n');
        s
    }
}

/// `draw_index,value,status` rows; a failed draw leaves `value` empty.
pub fn sample_csv(sample: &FiducialSample) -> String {
    let mut out = String::from("draw_index,value,status\n");
    for r in &sample.records {
        let value = r.value.map(|v| v.to_string()).unwrap_or_default();
        let status = serde_json::to_value(r.status)
            .expect("status serializes")
            .as_str()
            .expect("status is a string")
            .to_string();
        out.push_str(&format!("{},{},{}\n", r.draw_index, value, status));
    }
    out
}

/// `x,density` rows of a kernel density grid.
pub fn density_csv(grid: &DensityGrid) -> String {
    let mut out = String::from("x,density\n");
    for (x, y) in grid.xs.iter().zip(&grid.ys) {
        out.push_str(&format!("{x},{y}\n"));
    }
    out
}

/// `x,lower,upper` rows of a predictive band.
pub fn band_csv(points: &[BandPoint]) -> String {
    let mut out = String::from("x,lower,upper\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.x, p.lower, p.upper));
    }
    out
}

/// One row per (true concentration, method), in table order.
pub fn interval_metrics_csv(table: &MetricsTable) -> String {
    let mut out = String::from(
        "scenario,truth,method,n_intervals,avg_lower,avg_upper,avg_width,coverage,coverage_se\n",
    );
    for r in &table.intervals {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            table.scenario,
            r.truth,
            r.method.name(),
            r.n_intervals,
            r.avg_lower,
            r.avg_upper,
            r.avg_width,
            r.coverage,
            r.coverage_se
        ));
    }
    out
}

/// One row per (true concentration, estimator), in table order. The
/// `normalized` column records whether the error metrics are relative
/// to the truth or raw (truth zero).
pub fn point_metrics_csv(table: &MetricsTable) -> String {
    let mut out =
        String::from("scenario,truth,estimator,n_estimates,bias,abs_bias,rmse,normalized\n");
    for r in &table.points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            table.scenario,
            r.truth,
            r.estimator.name(),
            r.n_estimates,
            r.bias,
            r.abs_bias,
            r.rmse,
            r.normalized
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{QueryDesign, StudyDesign};
    use crate::estimation::{fit_mle, FitOptions};
    use crate::fiducial::{
        concentration_pivots, draw_parameter_fiducials, sample_density, DrawOptions, PivotOptions,
    };
    use crate::interval::IntervalMethod;
    use crate::model::{simulate_dataset, simulate_query};
    use crate::sim::{run_scenario, PointEstimator};

    fn small_fit() -> (InterlabDataset, FitResult) {
        let params = ModelParams::homogeneous(2, 1.0, 1.0, 0.1, 0.5).unwrap();
        let design = StudyDesign::balanced(2, vec![0.0, 5.0, 10.0], 3);
        let data = simulate_dataset(&params, &design, 42).unwrap();
        let fit = fit_mle(&data, &FitOptions::default()).unwrap();
        (data, fit)
    }

    #[test]
    fn fit_reports_round_trip_and_rebuild_their_inputs() {
        let (data, fit) = small_fit();
        let report = FitReport::new(&data, &fit);
        let back = FitReport::from_json_str(&report.to_json_string()).unwrap();
        assert_eq!(report, back);
        assert_eq!(back.dataset().unwrap(), data);
        let refit = back.fit_result().unwrap();
        assert_eq!(refit.params.alpha, fit.params.alpha);
        assert_eq!(refit.observed_info, fit.observed_info);
    }

    #[test]
    fn reports_from_other_schema_versions_are_rejected() {
        let (data, fit) = small_fit();
        let mut report = FitReport::new(&data, &fit);
        report.schema_version = 99;
        let err = FitReport::from_json_str(&report.to_json_string()).unwrap_err();
        assert!(err.to_string().contains("schema version"));
    }

    #[test]
    fn sample_and_density_exports_carry_every_draw() {
        let (data, _) = small_fit();
        let batch = draw_parameter_fiducials(&data, 200, 7, &DrawOptions::default()).unwrap();
        let query = simulate_query(
            &ModelParams::homogeneous(2, 1.0, 1.0, 0.1, 0.5).unwrap(),
            &data,
            &QueryDesign::uniform(vec![0], 3),
            &[4.0],
            11,
        )
        .unwrap();
        let samples = concentration_pivots(&query, &batch, 13, &PivotOptions::default()).unwrap();

        let csv = sample_csv(&samples[0]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "draw_index,value,status");
        assert_eq!(lines.len(), 1 + samples[0].n_requested());
        assert!(lines[1].starts_with("0,"));

        let grid = sample_density(&samples[0]).unwrap();
        let dcsv = density_csv(&grid);
        assert_eq!(dcsv.lines().count(), 1 + grid.xs.len());
        // Trapezoid mass of the exported curve stays a density.
        let mass: f64 = grid
            .xs
            .windows(2)
            .zip(grid.ys.windows(2))
            .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
            .sum();
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn metrics_tables_render_one_csv_row_per_combination() {
        let sc = Scenario {
            name: "render".into(),
            train: StudyDesign::balanced(2, vec![0.0, 5.0, 10.0], 3),
            params: ModelParams::homogeneous(2, 1.0, 1.0, 0.1, 0.5).unwrap(),
            test: QueryDesign::uniform(vec![0], 3),
            truths: vec![2.0, 6.0],
            n_datasets: 2,
            n_fiducial: 400,
            n_boot: 200,
            methods: vec![IntervalMethod::Fiducial],
            estimators: vec![PointEstimator::FiducialMode],
            level: 0.95,
            seed: 3,
        };
        let table = run_scenario(&sc).unwrap();
        let icsv = interval_metrics_csv(&table);
        assert_eq!(icsv.lines().count(), 1 + 2);
        assert!(icsv.lines().nth(1).unwrap().starts_with("render,2,fiducial,"));
        let pcsv = point_metrics_csv(&table);
        assert_eq!(pcsv.lines().count(), 1 + 2);

        let manifest = RunManifest::new(&sc, &table, 1.5);
        let parsed: RunManifest =
            serde_json::from_str(&manifest.to_json_string()).unwrap();
        assert_eq!(parsed.scenario, sc);
        assert_eq!(parsed.elapsed_s, 1.5);
    }

    #[test]
    fn band_csv_lists_the_grid_in_order() {
        let points = vec![
            BandPoint {
                x: 0.0,
                lower: -1.0,
                upper: 1.0,
            },
            BandPoint {
                x: 5.0,
                lower: 3.0,
                upper: 7.0,
            },
        ];
        let csv = band_csv(&points);
        assert_eq!(csv, "x,lower,upper\n0,-1,1\n5,3,7\n");
    }
}
