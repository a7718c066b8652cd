//! Gaussian kernel density estimation, modes and shortest intervals.
//!
//! Fiducial samples are summarized through a kernel density estimate
//! rather than raw quantiles: the highest-density interval of a skewed or
//! boundary-truncated sample can be far shorter than the equal-tailed one,
//! and the density mode is the natural point estimate.
//!
//! Bandwidth follows the classic rule of thumb
//! `0.9 min(sd, IQR/1.34) n^{-1/5}`, falling back to the standard
//! deviation when the IQR collapses and to a hard floor when the whole
//! sample is constant. The density is evaluated on a uniform grid spanning
//! the sample plus three bandwidths each side (clipped at 0 for truncated
//! samples) and renormalized to integrate to one over the grid by the
//! trapezoid rule.

use crate::stats::quantile_sorted;

pub const DEFAULT_GRID: usize = 1024;

/// A density evaluated on a uniform grid; `ys` integrates to one.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub bandwidth: f64,
}

/// Rule-of-thumb bandwidth on an ascending-sorted sample. Zero for a
/// constant sample; the caller's floor then turns the density into a
/// spike at the common value.
fn nrd0(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let sd = crate::stats::sd(sorted);
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    let mut lo = sd.min(iqr / 1.34);
    if lo == 0.0 {
        lo = sd;
    }
    0.9 * lo * n.powf(-0.2)
}

/// Kernel density estimate of `values` on `n_grid` points.
///
/// With `floor_at_zero` the grid never extends below 0, matching samples
/// that were truncated there. A (nearly) constant sample degenerates to a
/// sharp spike around the common value rather than an error.
pub fn kde_density(values: &[f64], floor_at_zero: bool, n_grid: usize) -> DensityGrid {
    assert!(values.len() >= 2 && n_grid >= 16);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let scale = sorted[n - 1].abs().max(sorted[0].abs());
    let h = nrd0(&sorted).max(1e-9 * (1.0 + scale));

    let mut lo = sorted[0] - 3.0 * h;
    let hi = sorted[n - 1] + 3.0 * h;
    if floor_at_zero {
        lo = lo.max(0.0);
    }
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let step = span / (n_grid - 1) as f64;

    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    // The kernel is negligible beyond 8 bandwidths; slide a window over
    // the sorted sample instead of summing all n terms per grid point.
    let cut = 8.0 * h;
    let mut win_lo = 0usize;
    let mut win_hi = 0usize;
    let mut xs = Vec::with_capacity(n_grid);
    let mut ys = Vec::with_capacity(n_grid);
    for g in 0..n_grid {
        let x = lo + step * g as f64;
        while win_lo < n && sorted[win_lo] < x - cut {
            win_lo += 1;
        }
        while win_hi < n && sorted[win_hi] <= x + cut {
            win_hi += 1;
        }
        let mut acc = 0.0;
        for &v in &sorted[win_lo..win_hi] {
            let t = (x - v) / h;
            acc += (-0.5 * t * t).exp();
        }
        xs.push(x);
        ys.push(acc * norm);
    }

    // Renormalize over the grid (mass clipped at 0 is redistributed).
    let mass = trapezoid(&ys, step);
    if mass > 0.0 {
        for y in &mut ys {
            *y /= mass;
        }
    }
    DensityGrid {
        xs,
        ys,
        bandwidth: h,
    }
}

fn trapezoid(ys: &[f64], step: f64) -> f64 {
    let inner: f64 = ys[1..ys.len() - 1].iter().sum();
    step * (inner + 0.5 * (ys[0] + ys[ys.len() - 1]))
}

impl DensityGrid {
    /// Grid point of maximum density; the first one on ties.
    pub fn mode(&self) -> f64 {
        let mut best = 0;
        for (i, &y) in self.ys.iter().enumerate() {
            if y > self.ys[best] {
                best = i;
            }
        }
        self.xs[best]
    }

    /// Cumulative trapezoid masses; `cum[i]` is the mass up to `xs[i]`.
    fn cumulative(&self) -> Vec<f64> {
        let step = self.xs[1] - self.xs[0];
        let mut cum = Vec::with_capacity(self.xs.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for i in 1..self.xs.len() {
            acc += 0.5 * (self.ys[i - 1] + self.ys[i]) * step;
            cum.push(acc);
        }
        cum
    }

    /// The shortest interval holding `level` mass. Left endpoints walk the
    /// grid; the right endpoint is interpolated inside its cell so every
    /// candidate holds the target exactly. Snapping both ends to the grid
    /// instead creates near-tied windows that resolve to whichever the
    /// scan saw first, drifting the interval sideways along a flat top.
    pub fn shortest_interval(&self, level: f64) -> (f64, f64) {
        assert!(0.0 < level && level < 1.0);
        let cum = self.cumulative();
        let n = cum.len();
        // Tiny slack absorbs trapezoid roundoff at level ~ total mass.
        let target = level * (1.0 - 1e-12);
        let mut best = (self.xs[0], self.xs[n - 1]);
        let mut best_w = f64::INFINITY;
        let mut b = 0usize;
        for a in 0..n {
            if b < a {
                b = a;
            }
            while b < n && cum[b] - cum[a] < target {
                b += 1;
            }
            if b == n {
                break;
            }
            let upper = self.interp_right(&cum, a, b, target);
            let w = upper - self.xs[a];
            if w < best_w {
                best_w = w;
                best = (self.xs[a], upper);
            }
        }
        best
    }

    /// One-sided interval `[xs[0], U]` holding `level` mass, for samples
    /// piled up against the left boundary.
    pub fn left_anchored_interval(&self, level: f64) -> (f64, f64) {
        assert!(0.0 < level && level < 1.0);
        let cum = self.cumulative();
        let target = level * (1.0 - 1e-12);
        for i in 0..cum.len() {
            if cum[i] >= target {
                return (self.xs[0], self.interp_right(&cum, 0, i, target));
            }
        }
        (self.xs[0], *self.xs.last().unwrap())
    }

    /// Point inside cell `(b-1, b]` where the mass accumulated from `a`
    /// first reaches `target`, linearly interpolating the cumulative.
    fn interp_right(&self, cum: &[f64], a: usize, b: usize, target: f64) -> f64 {
        if b == 0 {
            return self.xs[0];
        }
        let have = cum[b - 1] - cum[a];
        let gain = cum[b] - cum[b - 1];
        if b <= a || have >= target || gain <= 0.0 {
            return self.xs[b];
        }
        let frac = ((target - have) / gain).clamp(0.0, 1.0);
        self.xs[b - 1] + frac * (self.xs[b] - self.xs[b - 1])
    }
}
