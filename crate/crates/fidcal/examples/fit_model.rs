//! Fit the interlaboratory calibration model and print the estimates.
//!
//! The data here are simulated so the example is self-contained and the
//! printed estimates can be compared against the generating values. For
//! real studies, build the dataset with `InterlabDataset::from_csv_path`
//! (header `lab,concentration,replicate,measurement`) instead.
//!
//! Run with `cargo run --release --example fit_model`.

use fidcal::{fit_mle, simulate_dataset, FitOptions, FitReport, ModelParams, StudyDesign};

fn main() -> fidcal::Result<()> {
    // Four labs measuring blanks plus three spiked levels, five
    // replicates per cell. The blank level is required: it anchors the
    // additive-error scale.
    let truth = ModelParams::new(
        vec![0.2, 0.5, 0.3, 0.4],
        vec![1.05, 0.95, 1.00, 0.90],
        0.08,
        0.6,
    )?;
    let design = StudyDesign::balanced(4, vec![0.0, 5.0, 15.0, 40.0], 5);
    let data = simulate_dataset(&truth, &design, 17)?;

    let fit = fit_mle(&data, &FitOptions::default())?;
    let report = FitReport::new(&data, &fit);
    let se = report.stderr.as_ref();

    println!(
        "fit: loglik {:.3}, {} iterations, converged: {}",
        fit.loglik, fit.n_iter, fit.converged
    );
    println!("\n{:<8} {:>10} {:>10} {:>10} {:>10}", "lab", "intercept", "se", "slope", "se");
    for (i, lab) in data.labs().iter().enumerate() {
        println!(
            "{:<8} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            lab,
            fit.params.alpha[i],
            se.map_or(f64::NAN, |s| s.alpha[i]),
            fit.params.beta[i],
            se.map_or(f64::NAN, |s| s.beta[i]),
        );
    }
    println!(
        "\nrecovery spread (log scale): {:.4} (se {:.4}), generating value {}",
        fit.params.sigma_eta,
        se.map_or(f64::NAN, |s| s.sigma_eta),
        truth.sigma_eta
    );
    println!(
        "additive error spread:       {:.4} (se {:.4}), generating value {}",
        fit.params.sigma_eps,
        se.map_or(f64::NAN, |s| s.sigma_eps),
        truth.sigma_eps
    );

    // The JSON report round-trips the fit together with its data, which
    // is what the calibration and goodness-of-fit stages consume.
    let json = report.to_json_string();
    println!("\nself-contained fit report: {} bytes of JSON", json.len());
    Ok(())
}
