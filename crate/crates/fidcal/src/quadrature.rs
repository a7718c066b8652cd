//! Gauss-Hermite quadrature, normalized for standard-normal expectations.
//!
//! The likelihood of one response at nonzero concentration is an integral
//! over the latent recovery effect `u ~ N(0,1)`:
//!
//! ```text
//! p(y) = E_u[ phi(y; alpha + beta x exp(sigma_eta u), sigma_eps) ]
//! ```
//!
//! which a Hermite rule evaluates as `sum_m w_m f(u_m)`. The rule
//! integrates against the standard normal density directly:
//! `sum_m w_m = 1` and `u_m` are in standard-deviation units. Nodes start
//! from the Golub-Welsch eigenvalues of the Jacobi matrix and are polished
//! by Newton steps on the orthonormal recurrence, with weights from the
//! Christoffel sum so even far-tail weights carry full relative accuracy.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GaussHermite {
    order: usize,
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GaussHermite {
    /// Build a rule with `order` nodes. Fewer than 5 nodes cannot track
    /// the lognormal skew and are rejected; more than 200 buys nothing at
    /// f64 precision.
    ///
    /// Eigenvalues of the Jacobi matrix serve only as starting points:
    /// each node is Newton-refined on the orthonormal polynomial
    /// recurrence and its weight computed from the Christoffel sum
    /// `1 / sum_k p_k(u)^2`. Eigenvector-based weights would lose all
    /// relative accuracy in the far tails, which matters because the
    /// likelihood code rescales tail weights by `exp(u^2/2)`.
    pub fn new(order: usize) -> Result<Self> {
        if !(5..=200).contains(&order) {
            return Err(Error::Config(format!(
                "quadrature order must lie in [5, 200], got {order}"
            )));
        }
        // Jacobi matrix of the orthonormal polynomials for the standard
        // normal weight: zero diagonal, off-diagonal sqrt(k).
        let mut jac = DMatrix::<f64>::zeros(order, order);
        for k in 1..order {
            let b = (k as f64).sqrt();
            jac[(k - 1, k)] = b;
            jac[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(jac);
        let mut pairs: Vec<(f64, f64)> = eig
            .eigenvalues
            .iter()
            .map(|&t| {
                let mut u = t;
                for _ in 0..5 {
                    let (pn, pn1, _) = hermite_norm(order, u);
                    let step = pn / ((order as f64).sqrt() * pn1);
                    u -= step;
                    if step.abs() <= 1e-15 * (1.0 + u.abs()) {
                        break;
                    }
                }
                let (_, _, christoffel) = hermite_norm(order, u);
                (u, -christoffel.ln())
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Exact normalization of the weights.
        let total: f64 = pairs.iter().map(|p| p.1.exp()).sum();
        let log_total = total.ln();
        Ok(Self {
            order,
            nodes: pairs.iter().map(|p| p.0).collect(),
            log_weights: pairs.iter().map(|p| p.1 - log_total).collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Nodes in standard-normal units, ascending.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Natural logs of the normalized weights; `sum exp(log_w) == 1`.
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// `E[f(U)]` for `U ~ N(0,1)`.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.log_weights)
            .map(|(&u, &lw)| lw.exp() * f(u))
            .sum()
    }
}

/// Orthonormal-polynomial recurrence for the standard normal weight at
/// `u`: returns `(p_n, p_{n-1}, sum_{k<n} p_k^2)`. The values grow like
/// `exp(u^2/4)` in the tails, which stays within f64 range for every
/// admitted order.
fn hermite_norm(n: usize, u: f64) -> (f64, f64, f64) {
    let mut prev = 1.0; // p_0
    let mut cur = u; // p_1
    let mut sum = 1.0;
    for k in 1..n {
        sum += cur * cur;
        let next = (u * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev, sum)
}
