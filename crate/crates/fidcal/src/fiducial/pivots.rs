//! Closed-form pivot stages.
//!
//! One fiducial draw replaces every unobserved standard-normal error in
//! the data-generating equation with a fresh simulated value and solves
//! the structural equations back for the parameters. Writing `z^eps` and
//! `z^eta` for the simulated errors:
//!
//! 1. Blank replicates pin down the additive error and the intercepts:
//!    the pooled within-lab sum of squares of the blanks must match the
//!    same functional of `sigma_eps z^eps`, giving
//!    `sigma_eps_init = sqrt(SS_y / SS_z)` and per-lab intercepts
//!    `alpha_init_i = mean(y_i1) - sigma_eps_init mean(z_i1)`.
//! 2. Summing the model equation over all observations of one lab and
//!    solving for the slope gives
//!    `beta_i = [sum y - N_i alpha_init_i - sigma_eps_init sum z^eps]
//!              / sum_jk x_j exp(sigma_eta_hat z^eta_ijk)`,
//!    with the plug-in recovery spread `sigma_eta_hat` kept fixed across
//!    draws.
//! 3. Dividing the nonzero-level equations by `x_j` before summing
//!    re-solves the intercept with the slope known, which spreads the
//!    intercept information over all levels instead of only the blank.
//!
//! The same `z^eps` array must flow through all three stages of one draw;
//! stage 1 and stage 2 are algebraically linked through it.

use crate::data::{CellArray, InterlabDataset};
use crate::error::{Error, Result};
use crate::stats::mean;

/// Blank-level pivot values: the initial additive-error draw and the
/// initial intercepts.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialPivots {
    pub sigma_eps: f64,
    pub alpha: Vec<f64>,
}

pub(crate) fn check_shape(data: &InterlabDataset, z: &CellArray, name: &str) -> Result<()> {
    let ok = z.len() == data.n_labs()
        && z.iter().enumerate().all(|(i, row)| {
            row.len() == data.n_levels()
                && row
                    .iter()
                    .enumerate()
                    .all(|(j, v)| v.len() == data.n_replicates(i, j))
        });
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} array does not match the dataset's shape"
        )))
    }
}

/// Stage 1: additive error and intercepts from the blank level.
///
/// Fails when the blank level carries no pooled degrees of freedom or the
/// simulated errors happen to be degenerate (zero within-lab spread).
pub fn init_pivots(data: &InterlabDataset, z_eps: &CellArray) -> Result<InitialPivots> {
    check_shape(data, z_eps, "z_eps")?;
    if data.blank_df() == 0 {
        return Err(Error::InsufficientData(
            "fiducial draws need replicated blank measurements in at least one lab".into(),
        ));
    }
    let mut ss_y = 0.0;
    let mut ss_z = 0.0;
    for i in 0..data.n_labs() {
        let ys = data.cell(i, 0);
        let zs = &z_eps[i][0];
        let my = mean(ys);
        let mz = mean(zs);
        ss_y += ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>();
        ss_z += zs.iter().map(|z| (z - mz) * (z - mz)).sum::<f64>();
    }
    if ss_z <= 0.0 {
        return Err(Error::Numerical(
            "degenerate draw: blank error draws have zero spread".into(),
        ));
    }
    let sigma_eps = (ss_y / ss_z).sqrt();
    let alpha = (0..data.n_labs())
        .map(|i| mean(data.cell(i, 0)) - sigma_eps * mean(&z_eps[i][0]))
        .collect();
    Ok(InitialPivots { sigma_eps, alpha })
}

/// Stage 2: per-lab slopes given the blank-stage pivots.
pub fn beta_pivots(
    data: &InterlabDataset,
    init: &InitialPivots,
    sigma_eta_hat: f64,
    z_eta: &CellArray,
    z_eps: &CellArray,
) -> Result<Vec<f64>> {
    check_shape(data, z_eta, "z_eta")?;
    check_shape(data, z_eps, "z_eps")?;
    if init.alpha.len() != data.n_labs() {
        return Err(Error::Config("wrong number of initial intercepts".into()));
    }
    let mut num = vec![0.0; data.n_labs()];
    let mut den = vec![0.0; data.n_labs()];
    for (i, j, reps) in data.cells() {
        let x = data.concentrations()[j];
        for (k, &y) in reps.iter().enumerate() {
            num[i] += y - init.alpha[i] - init.sigma_eps * z_eps[i][j][k];
            den[i] += x * (sigma_eta_hat * z_eta[i][j][k]).exp();
        }
    }
    (0..data.n_labs())
        .map(|i| {
            if den[i] <= 0.0 {
                return Err(Error::Numerical(format!(
                    "degenerate draw: zero slope denominator in lab {i}"
                )));
            }
            Ok(num[i] / den[i])
        })
        .collect()
}

/// Stage 3: intercepts re-solved from the nonzero levels given the slopes.
pub fn alpha_pivots_updated(
    data: &InterlabDataset,
    beta: &[f64],
    init_sigma_eps: f64,
    sigma_eta_hat: f64,
    z_eta: &CellArray,
    z_eps: &CellArray,
) -> Result<Vec<f64>> {
    check_shape(data, z_eta, "z_eta")?;
    check_shape(data, z_eps, "z_eps")?;
    if beta.len() != data.n_labs() {
        return Err(Error::Config("wrong number of slopes".into()));
    }
    let mut num = vec![0.0; data.n_labs()];
    let mut den = vec![0.0; data.n_labs()];
    for (i, j, reps) in data.cells() {
        if j == 0 {
            continue;
        }
        let x = data.concentrations()[j];
        for (k, &y) in reps.iter().enumerate() {
            num[i] += y / x
                - beta[i] * (sigma_eta_hat * z_eta[i][j][k]).exp()
                - init_sigma_eps * z_eps[i][j][k] / x;
        }
        den[i] += reps.len() as f64 / x;
    }
    // Every lab has nonzero-level data by dataset validation, so den > 0.
    Ok((0..data.n_labs()).map(|i| num[i] / den[i]).collect())
}
