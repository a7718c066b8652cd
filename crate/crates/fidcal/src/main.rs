//! Command-line front end. All statistics live in the library; this
//! binary parses arguments, moves files, and prints summaries.
//!
//! Exit codes: 0 success, 2 bad input (parse, validation, or I/O),
//! 3 numerical failure, 4 bad configuration. clap itself exits 2 on
//! usage errors, so "could not read the problem" is always 2.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use fidcal::report::{band_csv, density_csv, interval_metrics_csv, point_metrics_csv, sample_csv};
use fidcal::{
    assess_exceedance, bootstrap_intervals, calibration_band, concentration_pivots,
    draw_parameter_fiducials, fit_mle, hdi, mle_concentration, run_scenario, sample_density,
    wald_mle_interval, wald_mme_interval, BootstrapOptions, CalibrationQuery, CalibrationReport,
    DrawOptions, Error, FitOptions, FitReport, GofLab, GofReport, IntervalEstimate,
    IntervalMethod, InterlabDataset, MethodDiagnostics, MmeWaldOptions, PivotOptions, Result,
    RunManifest, Scenario, UnknownReport, SCHEMA_VERSION,
};

#[derive(Parser)]
#[command(
    name = "fidcal",
    version,
    about = "Fiducial calibration for random-effects interlaboratory studies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the calibration model to a training study CSV
    /// (lab,concentration,replicate,measurement).
    Fit(FitArgs),
    /// Estimate unknown concentrations from new measurements
    /// (lab,unknown_id,replicate,measurement) against a fit report.
    Calibrate(CalibrateArgs),
    /// Export per-lab predictive band data for a fitted model and count
    /// how much of the training data falls inside.
    Gof(GofArgs),
    /// Run a Monte Carlo scenario and export its metrics tables.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Training study CSV.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for fit.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Gauss-Hermite quadrature order for the integrated likelihood.
    #[arg(long, default_value_t = 30)]
    quad_order: usize,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Fit report produced by `fidcal fit`.
    #[arg(long)]
    fit: PathBuf,
    /// New-measurements CSV.
    #[arg(long)]
    query: PathBuf,
    /// Output directory for calibration.json and per-unknown CSVs.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Interval methods: fiducial, bootstrap, wald-mle, wald-mme, or
    /// all. The fiducial interval is always computed.
    #[arg(long = "method", value_delimiter = ',', default_value = "fiducial")]
    methods: Vec<String>,
    /// Confidence level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Fiducial draws per unknown.
    #[arg(long, default_value_t = 2000)]
    n_fiducial: usize,
    /// Bootstrap replicates (when requested).
    #[arg(long, default_value_t = 1000)]
    n_boot: usize,
    /// RNG seed; required so reruns are reproducible.
    #[arg(long)]
    seed: u64,
    /// Keep negative concentration draws instead of clamping at zero.
    #[arg(long)]
    no_truncate: bool,
    /// Reporting threshold; adds an exceedance verdict per unknown.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct GofArgs {
    /// Fit report produced by `fidcal fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Output directory for band CSVs and gof.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Central band level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Band grid points across the calibrated concentration range.
    #[arg(long, default_value_t = 41)]
    grid_points: usize,
    /// Monte Carlo draws per grid point.
    #[arg(long, default_value_t = 4000)]
    n_mc: usize,
    /// RNG seed; required so reruns are reproducible.
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ScenarioSource {
    /// Built-in scenario: 1.A, 2.A, 1.B, or 2.B.
    #[arg(long)]
    preset: Option<String>,
    /// Scenario JSON file.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: ScenarioSource,
    /// Output directory for intervals.csv, points.csv, manifest.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// RNG seed; required with --preset, overrides the file seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_datasets: Option<usize>,
    #[arg(long)]
    n_fiducial: Option<usize>,
    #[arg(long)]
    n_boot: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    std::process::exit(code);
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidData(_)
        | Error::InsufficientData(_)
        | Error::Query(_)
        | Error::Csv(_)
        | Error::Io(_)
        | Error::Json(_) => 2,
        Error::Numerical(_) => 3,
        Error::Config(_) => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Gof(args) => cmd_gof(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

/// Unknown ids come from user CSVs; keep the derived file names tame.
fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let data = InterlabDataset::from_csv_path(&args.data)?;
    let fit = fit_mle(
        &data,
        &FitOptions {
            quad_order: args.quad_order,
            ..FitOptions::default()
        },
    )?;
    let report = FitReport::new(&data, &fit);
    let path = write_file(&args.out, "fit.json", &report.to_json_string())?;
    println!(
        "fit: {} labs x {} levels ({} measurements), loglik {:.4}, {} iterations",
        data.n_labs(),
        data.n_levels(),
        data.n_measurements(),
        fit.loglik,
        fit.n_iter
    );
    println!("wrote {}", path.display());
    if !fit.converged {
        return Err(Error::Numerical(format!(
            "the fit did not converge within {} iterations; the report holds the best point found",
            fit.n_iter
        )));
    }
    Ok(())
}

fn parse_methods(raw: &[String]) -> Result<Vec<IntervalMethod>> {
    let mut methods = vec![IntervalMethod::Fiducial];
    for item in raw {
        if item == "all" {
            for m in [
                IntervalMethod::Bootstrap,
                IntervalMethod::WaldMle,
                IntervalMethod::WaldMme,
            ] {
                if !methods.contains(&m) {
                    methods.push(m);
                }
            }
            continue;
        }
        let m = IntervalMethod::parse(item).ok_or_else(|| {
            Error::Config(format!(
                "unknown method {item:?}; expected fiducial, bootstrap, wald-mle, wald-mme, or all"
            ))
        })?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    Ok(methods)
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Error::Config(format!(
            "interval level must be in (0, 1), got {}",
            args.level
        )));
    }
    let report = FitReport::from_json_path(&args.fit)?;
    let data = report.dataset()?;
    let fit = report.fit_result()?;
    let query = CalibrationQuery::from_csv_path(&data, &args.query)?;
    let methods = parse_methods(&args.methods)?;
    let quad = fidcal::quadrature::GaussHermite::new(report.quad_order)?;
    let n_unknowns = query.n_unknowns();

    let t0 = Instant::now();
    let batch = draw_parameter_fiducials(&data, args.n_fiducial, args.seed, &DrawOptions::default())?;
    let pivot_opts = PivotOptions {
        truncate_at_zero: !args.no_truncate,
    };
    let samples = concentration_pivots(&query, &batch, args.seed, &pivot_opts)?;
    let mut fid_intervals: Vec<fidcal::Result<IntervalEstimate>> = Vec::with_capacity(n_unknowns);
    for sample in &samples {
        fid_intervals.push(hdi(sample, args.level));
    }
    let fid_time = t0.elapsed();

    let mut timings = vec![MethodDiagnostics {
        method: IntervalMethod::Fiducial,
        n_failures: fid_intervals.iter().filter(|i| i.is_err()).count(),
        wall_clock_s: fid_time.as_secs_f64(),
    }];

    let mut boot_outcomes = None;
    let mut mle_intervals: Vec<Option<IntervalEstimate>> = vec![None; n_unknowns];
    let mut mme_intervals: Vec<Option<IntervalEstimate>> = vec![None; n_unknowns];
    for &method in &methods {
        let t0 = Instant::now();
        let n_failures = match method {
            IntervalMethod::Fiducial => continue,
            IntervalMethod::Bootstrap => {
                let opts = BootstrapOptions {
                    n_boot: args.n_boot,
                    level: args.level,
                    seed: args.seed,
                    ..BootstrapOptions::new(0)
                };
                match bootstrap_intervals(&data, &fit, &query, &opts) {
                    Ok(outcomes) => {
                        boot_outcomes = Some(outcomes);
                        0
                    }
                    Err(e) => {
                        eprintln!("bootstrap failed: {e}");
                        n_unknowns
                    }
                }
            }
            IntervalMethod::WaldMle => {
                let mut failed = 0;
                for u in 0..n_unknowns {
                    match wald_mle_interval(&fit, &query, u, args.level) {
                        Ok(iv) => mle_intervals[u] = Some(iv),
                        Err(e) => {
                            eprintln!("wald-mle failed for {}: {e}", query.unknown_ids()[u]);
                            failed += 1;
                        }
                    }
                }
                failed
            }
            IntervalMethod::WaldMme => {
                let opts = MmeWaldOptions::new(args.seed);
                let mut failed = 0;
                for u in 0..n_unknowns {
                    match wald_mme_interval(&data, &query, u, args.level, &opts) {
                        Ok(iv) => mme_intervals[u] = Some(iv),
                        Err(e) => {
                            eprintln!("wald-mme failed for {}: {e}", query.unknown_ids()[u]);
                            failed += 1;
                        }
                    }
                }
                failed
            }
        };
        timings.push(MethodDiagnostics {
            method,
            n_failures,
            wall_clock_s: t0.elapsed().as_secs_f64(),
        });
    }

    let mut unknowns = Vec::with_capacity(n_unknowns);
    for (u, sample) in samples.iter().enumerate() {
        let id = query.unknown_ids()[u].clone();
        let fid = match &fid_intervals[u] {
            Ok(iv) => *iv,
            Err(e) => {
                return Err(Error::Numerical(format!(
                    "no usable fiducial interval for unknown {id}: {e}"
                )))
            }
        };
        let mle = mle_concentration(&fit.params, &query, u, &quad).ok();
        let mut intervals = vec![fid];
        if let Some(outcomes) = &boot_outcomes {
            intervals.push(outcomes[u].interval);
        }
        intervals.extend(mle_intervals[u]);
        intervals.extend(mme_intervals[u]);
        let name = safe_name(&id);
        write_file(
            &args.out,
            &format!("density_{name}.csv"),
            &density_csv(&sample_density(sample)?),
        )?;
        write_file(&args.out, &format!("sample_{name}.csv"), &sample_csv(sample))?;
        unknowns.push(UnknownReport {
            id,
            n_measurements: query.n_measurements(u),
            fiducial_mode: fid.point,
            mle,
            intervals,
            n_fiducial_failed: sample.n_failed(),
            bootstrap_n_skipped: boot_outcomes.as_ref().map(|o| o[u].n_skipped),
            bootstrap_unreliable: boot_outcomes.as_ref().map(|o| o[u].unreliable),
            exceeds_threshold: args.threshold.map(|rt| assess_exceedance(&fid, rt)),
        });
    }

    let calibration = CalibrationReport {
        schema_version: SCHEMA_VERSION,
        level: args.level,
        n_fiducial: args.n_fiducial,
        n_boot: boot_outcomes.as_ref().map(|_| args.n_boot),
        seed: args.seed,
        truncated_at_zero: !args.no_truncate,
        threshold: args.threshold,
        unknowns,
        timings,
    };
    let path = write_file(&args.out, "calibration.json", &calibration.to_json_string())?;
    for u in &calibration.unknowns {
        let fid = &u.intervals[0];
        print!(
            "{}: mode {:.4}, {:.0}% interval [{:.4}, {:.4}]",
            u.id,
            u.fiducial_mode,
            100.0 * args.level,
            fid.lower,
            fid.upper
        );
        match u.exceeds_threshold {
            Some(true) => println!(" exceeds threshold"),
            Some(false) => println!(" does not exceed threshold"),
            None => println!(),
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gof(args: GofArgs) -> Result<()> {
    if args.grid_points < 2 {
        return Err(Error::Config("gof needs at least 2 grid points".into()));
    }
    let report = FitReport::from_json_path(&args.fit)?;
    let data = report.dataset()?;
    let params = report.fit_result()?.params;
    let top = data
        .concentrations()
        .iter()
        .fold(0.0f64, |acc, &x| acc.max(x));
    let grid: Vec<f64> = (0..args.grid_points)
        .map(|g| top * g as f64 / (args.grid_points - 1) as f64)
        .collect();

    let mut labs = Vec::with_capacity(data.n_labs());
    let (mut inside, mut total) = (0usize, 0usize);
    for i in 0..data.n_labs() {
        let band = calibration_band(&params, i, &grid, args.level, args.n_mc, args.seed)?;
        write_file(
            &args.out,
            &format!("band_{}.csv", safe_name(&data.labs()[i])),
            &band_csv(&band),
        )?;
        // Count observations against the band at their own levels, not
        // the plotting grid.
        let at_levels =
            calibration_band(&params, i, data.concentrations(), args.level, args.n_mc, args.seed)?;
        let (mut lab_inside, mut lab_total) = (0usize, 0usize);
        for (j, point) in at_levels.iter().enumerate() {
            for &y in data.cell(i, j) {
                lab_total += 1;
                if point.lower <= y && y <= point.upper {
                    lab_inside += 1;
                }
            }
        }
        inside += lab_inside;
        total += lab_total;
        labs.push(GofLab {
            lab: data.labs()[i].clone(),
            n_inside: lab_inside,
            n_total: lab_total,
        });
    }
    let gof = GofReport {
        schema_version: SCHEMA_VERSION,
        level: args.level,
        labs,
        inside_fraction: inside as f64 / total as f64,
    };
    let path = write_file(&args.out, "gof.json", &gof.to_json_string())?;
    println!(
        "{} of {} observations inside the {:.0}% band ({:.3})",
        inside,
        total,
        100.0 * args.level,
        gof.inside_fraction
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut sc = match (&args.source.preset, &args.source.scenario) {
        (Some(name), None) => {
            let seed = args.seed.ok_or_else(|| {
                Error::Config("--seed is required with --preset (no silent defaults)".into())
            })?;
            Scenario::preset(name, seed)?
        }
        (None, Some(path)) => Scenario::from_json_path(path)?,
        _ => unreachable!("clap enforces exactly one scenario source"),
    };
    if let Some(seed) = args.seed {
        sc.seed = seed;
    }
    if let Some(n) = args.n_datasets {
        sc.n_datasets = n;
    }
    if let Some(n) = args.n_fiducial {
        sc.n_fiducial = n;
    }
    if let Some(n) = args.n_boot {
        sc.n_boot = n;
    }

    let t0 = Instant::now();
    let table = run_scenario(&sc)?;
    let elapsed = t0.elapsed().as_secs_f64();

    write_file(&args.out, "intervals.csv", &interval_metrics_csv(&table))?;
    write_file(&args.out, "points.csv", &point_metrics_csv(&table))?;
    let manifest = RunManifest::new(&sc, &table, elapsed);
    write_file(&args.out, "manifest.json", &manifest.to_json_string())?;

    println!(
        "scenario {}: {} datasets, {} failed, {:.1}s",
        table.scenario, table.n_datasets, table.n_failed_replicates, elapsed
    );
    for row in &table.intervals {
        println!(
            "  conc {:>5} {:<9} coverage {:.3} (se {:.3}), width {:.3}, n {}",
            row.truth,
            row.method.name(),
            row.coverage,
            row.coverage_se,
            row.avg_width,
            row.n_intervals
        );
    }
    for d in &table.diagnostics {
        println!(
            "  {:<9} {:>8.2}s total, {} failures",
            d.method.name(),
            d.wall_clock_s,
            d.n_failures
        );
    }
    println!("wrote {}", args.out.join("manifest.json").display());
    Ok(())
}
