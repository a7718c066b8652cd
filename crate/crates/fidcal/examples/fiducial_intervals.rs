//! Fiducial interval for an unknown concentration, end to end.
//!
//! The pipeline has three stages: draw parameter fiducials from the
//! training study, push each draw through the readout of the unknown's
//! measurements, and take the highest-density interval of the resulting
//! concentration sample. Draws whose dispersion system has no root are
//! dropped and reported, never imputed.
//!
//! Run with `cargo run --release --example fiducial_intervals`.

use fidcal::{
    concentration_pivots, draw_parameter_fiducials, fiducial_mode, hdi, simulate_dataset,
    simulate_query, DrawOptions, ModelParams, PivotOptions, QueryDesign, StudyDesign,
};

fn main() -> fidcal::Result<()> {
    let truth = ModelParams::homogeneous(3, 1.0, 1.0, 0.1, 1.0)?;
    let design = StudyDesign::balanced(3, vec![0.0, 10.0, 30.0], 5);
    let data = simulate_dataset(&truth, &design, 42)?;

    // Two unknowns, each measured five times by the first lab. The true
    // concentrations are only used to simulate the measurements.
    let shape = QueryDesign::uniform(vec![0], 5);
    let query = simulate_query(&truth, &data, &shape, &[5.0, 20.0], 42)?;

    let batch = draw_parameter_fiducials(&data, 2000, 7, &DrawOptions::default())?;
    println!(
        "parameter draws: {} requested, {} usable ({} without a dispersion root)",
        batch.n_draws(),
        batch.n_usable(),
        batch.n_draws() - batch.n_usable()
    );

    let samples = concentration_pivots(&query, &batch, 7, &PivotOptions::default())?;
    println!("\n{:<10} {:>8} {:>10} {:>10} {:>8}", "unknown", "mode", "lower", "upper", "width");
    for sample in &samples {
        let iv = hdi(sample, 0.95)?;
        println!(
            "{:<10} {:>8.3} {:>10.3} {:>10.3} {:>8.3}",
            sample.unknown_id,
            fiducial_mode(sample)?,
            iv.lower,
            iv.upper,
            iv.width()
        );
    }
    println!("\n(simulated truths were 5 and 20)");
    Ok(())
}
