//! The random-effects calibration model and its exact consequences.
//!
//! Lab `i` measuring concentration `x_j` reports
//!
//! ```text
//! y_ijk = alpha_i + beta_i * x_j * exp(eta_ijk) + eps_ijk
//! eta_ijk ~ N(0, sigma_eta^2)      proportional (revovery) error
//! eps_ijk ~ N(0, sigma_eps^2)      additive measurement error
//! ```
//!
//! with all effects independent. The lab intercept `alpha_i` and slope
//! `beta_i` are fixed per lab; the two variance components are shared. The
//! multiplicative lognormal term makes the response skewed and its
//! variance grow with concentration:
//!
//! ```text
//! E[y]   = alpha_i + beta_i * x * exp(sigma_eta^2 / 2)
//! Var[y] = beta_i^2 x^2 (exp(sigma_eta^2) - 1) exp(sigma_eta^2) + sigma_eps^2
//! ```
//!
//! Everything downstream (estimation, fiducial pivots, intervals) works in
//! terms of this parameterization.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CalibrationQuery, CellArray, InterlabDataset, QueryDesign, StudyDesign};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::stats::quantile_sorted;

/// Model parameters: per-lab straight lines plus the two shared error
/// standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma_eta: f64,
    pub sigma_eps: f64,
}

impl ModelParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>, sigma_eta: f64, sigma_eps: f64) -> Result<Self> {
        let p = Self {
            alpha,
            beta,
            sigma_eta,
            sigma_eps,
        };
        p.validate()?;
        Ok(p)
    }

    /// Identical lines in every lab, the usual simulation setting.
    pub fn homogeneous(q: usize, alpha: f64, beta: f64, sigma_eta: f64, sigma_eps: f64) -> Result<Self> {
        Self::new(vec![alpha; q], vec![beta; q], sigma_eta, sigma_eps)
    }

    pub fn n_labs(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || self.alpha.len() != self.beta.len() {
            return Err(Error::Config(format!(
                "alpha and beta must be nonempty and equally long, got {} and {}",
                self.alpha.len(),
                self.beta.len()
            )));
        }
        for v in self.alpha.iter().chain(self.beta.iter()) {
            if !v.is_finite() {
                return Err(Error::Config("non-finite lab coefficient".into()));
            }
        }
        if !(self.sigma_eta.is_finite() && self.sigma_eta >= 0.0) {
            return Err(Error::Config(format!(
                "sigma_eta must be finite and nonnegative, got {}",
                self.sigma_eta
            )));
        }
        if !(self.sigma_eps.is_finite() && self.sigma_eps >= 0.0) {
            return Err(Error::Config(format!(
                "sigma_eps must be finite and nonnegative, got {}",
                self.sigma_eps
            )));
        }
        Ok(())
    }

    /// Exact mean and variance of a single response of lab `i` at
    /// concentration `x >= 0`.
    pub fn response_moments(&self, lab: usize, x: f64) -> Result<(f64, f64)> {
        if lab >= self.n_labs() {
            return Err(Error::Config(format!(
                "lab index {lab} out of range for {} labs",
                self.n_labs()
            )));
        }
        if !(x.is_finite() && x >= 0.0) {
            return Err(Error::Config(format!(
                "concentration must be finite and nonnegative, got {x}"
            )));
        }
        let s2 = self.sigma_eta * self.sigma_eta;
        let mean = self.alpha[lab] + self.beta[lab] * x * (0.5 * s2).exp();
        let bx = self.beta[lab] * x;
        let var = bx * bx * s2.exp_m1() * s2.exp() + self.sigma_eps * self.sigma_eps;
        Ok((mean, var))
    }
}

/// Draw a complete training dataset from the model under `design`.
///
/// Each cell gets its own derived stream, so the result is bit-identical
/// for a given `(params, design, seed)` regardless of evaluation order,
/// and editing one cell's replicate count leaves other cells unchanged.
pub fn simulate_dataset(
    params: &ModelParams,
    design: &StudyDesign,
    seed: u64,
) -> Result<InterlabDataset> {
    params.validate()?;
    design.validate()?;
    if design.n_labs() != params.n_labs() {
        return Err(Error::Config(format!(
            "design has {} labs but params have {}",
            design.n_labs(),
            params.n_labs()
        )));
    }
    let cells: CellArray = design
        .replicates
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &n)| {
                    let mut rng = stream(seed, &[tag::SIMULATE, i as u64, j as u64]);
                    let x = design.concentrations[j];
                    (0..n)
                        .map(|_| {
                            let z_eta: f64 = StandardNormal.sample(&mut rng);
                            let z_eps: f64 = StandardNormal.sample(&mut rng);
                            params.alpha[i]
                                + params.beta[i] * x * (params.sigma_eta * z_eta).exp()
                                + params.sigma_eps * z_eps
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    InterlabDataset::new(design.labs.clone(), design.concentrations.clone(), cells)
}

/// Draw replicate measurements of unknown samples at true concentrations
/// `truths` under `design`, returning a query resolved against `data`.
///
/// Unknown ids are `u1, u2, ...` in the order of `truths`.
pub fn simulate_query(
    params: &ModelParams,
    data: &InterlabDataset,
    design: &QueryDesign,
    truths: &[f64],
    seed: u64,
) -> Result<CalibrationQuery> {
    params.validate()?;
    design.validate(data)?;
    if truths.is_empty() {
        return Err(Error::Config("no unknown concentrations requested".into()));
    }
    for &x in truths {
        if !(x.is_finite() && x >= 0.0) {
            return Err(Error::Config(format!(
                "unknown concentration must be finite and nonnegative, got {x}"
            )));
        }
    }
    let cells: CellArray = truths
        .iter()
        .enumerate()
        .map(|(u, &x)| {
            design
                .lab_indices
                .iter()
                .zip(&design.replicates)
                .enumerate()
                .map(|(p, (&i, &n))| {
                    let mut rng = stream(seed, &[tag::TEST, u as u64, p as u64]);
                    (0..n)
                        .map(|_| {
                            let z_eta: f64 = StandardNormal.sample(&mut rng);
                            let z_eps: f64 = StandardNormal.sample(&mut rng);
                            params.alpha[i]
                                + params.beta[i] * x * (params.sigma_eta * z_eta).exp()
                                + params.sigma_eps * z_eps
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let labs: Vec<String> = design
        .lab_indices
        .iter()
        .map(|&i| data.labs()[i].clone())
        .collect();
    let ids = (1..=truths.len()).map(|u| format!("u{u}")).collect();
    CalibrationQuery::new(data, &labs, ids, cells)
}

/// One grid point of a pointwise predictive band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub x: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Pointwise central `level` band for a single response of lab `lab`,
/// estimated by Monte Carlo at each grid concentration.
///
/// `n_mc >= 1000` draws per grid point keep the quantile noise well below
/// plotting resolution; smaller requests are rejected.
pub fn calibration_band(
    params: &ModelParams,
    lab: usize,
    x_grid: &[f64],
    level: f64,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<BandPoint>> {
    params.validate()?;
    if lab >= params.n_labs() {
        return Err(Error::Config(format!(
            "lab index {lab} out of range for {} labs",
            params.n_labs()
        )));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!(
            "band level must lie in (0, 1), got {level}"
        )));
    }
    if n_mc < 1000 {
        return Err(Error::Config(format!(
            "calibration bands need at least 1000 Monte Carlo draws per point, got {n_mc}"
        )));
    }
    if x_grid.is_empty() {
        return Err(Error::Config("empty concentration grid".into()));
    }
    x_grid
        .iter()
        .enumerate()
        .map(|(g, &x)| {
            if !(x.is_finite() && x >= 0.0) {
                return Err(Error::Config(format!(
                    "grid concentration must be finite and nonnegative, got {x}"
                )));
            }
            let mut rng = stream(seed, &[tag::BAND, lab as u64, g as u64]);
            let mut draws: Vec<f64> = (0..n_mc)
                .map(|_| {
                    let z_eta: f64 = StandardNormal.sample(&mut rng);
                    let z_eps: f64 = StandardNormal.sample(&mut rng);
                    params.alpha[lab]
                        + params.beta[lab] * x * (params.sigma_eta * z_eta).exp()
                        + params.sigma_eps * z_eps
                })
                .collect();
            draws.sort_by(f64::total_cmp);
            let a = 0.5 * (1.0 - level);
            Ok(BandPoint {
                x,
                lower: quantile_sorted(&draws, a),
                upper: quantile_sorted(&draws, 1.0 - a),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::QueryDesign;
    use approx::assert_relative_eq;

    fn params_a() -> ModelParams {
        ModelParams::homogeneous(3, 1.0, 1.0, 0.1, 1.0).unwrap()
    }

    #[test]
    fn moments_at_blank_are_exact() {
        let p = ModelParams::new(vec![2.5], vec![4.0], 0.3, 0.7).unwrap();
        let (m, v) = p.response_moments(0, 0.0).unwrap();
        assert_eq!(m, 2.5);
        assert_eq!(v, 0.7 * 0.7);
    }

    #[test]
    fn moments_match_simulation() {
        // Independent check of the closed forms: moments of 2e6 simulated
        // responses. Tolerances are ~5 standard errors of the MC moments.
        let p = ModelParams::new(vec![1.0], vec![2.0], 0.3, 0.5).unwrap();
        let x = 3.0;
        let (mean, var) = p.response_moments(0, x).unwrap();
        let mut rng = stream(99, &[tag::SIMULATE]);
        let n = 2_000_000usize;
        let mut s = 0.0;
        let mut s2 = 0.0;
        for _ in 0..n {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let y = 1.0 + 2.0 * x * (0.3 * z1).exp() + 0.5 * z2;
            s += y;
            s2 += y * y;
        }
        let m_hat = s / n as f64;
        let v_hat = s2 / n as f64 - m_hat * m_hat;
        assert_relative_eq!(mean, m_hat, max_relative = 2e-3);
        assert_relative_eq!(var, v_hat, max_relative = 2e-2);
    }

    #[test]
    fn negative_concentration_is_a_domain_error() {
        let p = params_a();
        assert!(p.response_moments(0, -1.0).is_err());
    }

    #[test]
    fn simulation_is_reproducible_and_seed_sensitive() {
        let p = params_a();
        let d = StudyDesign::balanced(3, vec![0.0, 10.0, 30.0], 5);
        let a = simulate_dataset(&p, &d, 11).unwrap();
        let b = simulate_dataset(&p, &d, 11).unwrap();
        let c = simulate_dataset(&p, &d, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn per_cell_streams_are_stable_under_design_edits() {
        // Growing one cell must not disturb the values drawn in others.
        let p = params_a();
        let d1 = StudyDesign::balanced(3, vec![0.0, 10.0, 30.0], 5);
        let mut d2 = d1.clone();
        d2.replicates[1][2] = 9;
        let a = simulate_dataset(&p, &d1, 5).unwrap();
        let b = simulate_dataset(&p, &d2, 5).unwrap();
        assert_eq!(a.cell(0, 0), b.cell(0, 0));
        assert_eq!(a.cell(2, 1), b.cell(2, 1));
        assert_eq!(a.cell(1, 2), &b.cell(1, 2)[..5]);
    }

    #[test]
    fn noise_free_simulation_lies_on_the_line() {
        let p = ModelParams::homogeneous(2, 1.0, 3.0, 0.0, 0.0).unwrap();
        let d = StudyDesign::balanced(2, vec![0.0, 2.0], 2);
        let data = simulate_dataset(&p, &d, 1).unwrap();
        for (_, j, reps) in data.cells() {
            for &y in reps {
                assert_relative_eq!(y, 1.0 + 3.0 * data.concentrations()[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn simulated_query_shape_and_determinism() {
        let p = params_a();
        let d = StudyDesign::balanced(3, vec![0.0, 10.0, 30.0], 5);
        let data = simulate_dataset(&p, &d, 11).unwrap();
        let qd = QueryDesign {
            lab_indices: vec![0, 2],
            replicates: vec![2, 3],
        };
        let q1 = simulate_query(&p, &data, &qd, &[5.0, 20.0], 7).unwrap();
        let q2 = simulate_query(&p, &data, &qd, &[5.0, 20.0], 7).unwrap();
        assert_eq!(q1, q2);
        assert_eq!(q1.n_unknowns(), 2);
        assert_eq!(q1.n_measurements(0), 5);
        assert_eq!(q1.unknown_ids(), &["u1".to_string(), "u2".to_string()]);
    }

    #[test]
    fn band_contains_the_right_fraction() {
        let p = params_a();
        let band = calibration_band(&p, 0, &[0.0, 10.0, 30.0], 0.9, 20_000, 3).unwrap();
        for pt in &band {
            // Count fresh draws inside the band.
            let mut rng = stream(1234, &[tag::BAND, 9, pt.x as u64]);
            let inside = (0..20_000)
                .filter(|_| {
                    let z1: f64 = StandardNormal.sample(&mut rng);
                    let z2: f64 = StandardNormal.sample(&mut rng);
                    let y = 1.0 + pt.x * (0.1 * z1).exp() + z2;
                    pt.lower <= y && y <= pt.upper
                })
                .count();
            let frac = inside as f64 / 20_000.0;
            assert!((frac - 0.9).abs() < 0.01, "x={} frac={frac}", pt.x);
        }
    }

    #[test]
    fn band_rejects_small_mc_budgets() {
        let p = params_a();
        assert!(calibration_band(&p, 0, &[1.0], 0.9, 10, 3).is_err());
    }
}
