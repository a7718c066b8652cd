use serde::{Deserialize, Serialize};

/// How an interval for an unknown concentration was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    /// Highest-density interval of the fiducial sample.
    Fiducial,
    /// Percentile interval from a parametric bootstrap of the whole
    /// pipeline.
    Bootstrap,
    /// Normal-theory interval around the maximum-likelihood inversion.
    WaldMle,
    /// Conservative normal-theory interval around the moment inversion.
    WaldMme,
}

impl IntervalMethod {
    pub fn name(&self) -> &'static str {
        match self {
            IntervalMethod::Fiducial => "fiducial",
            IntervalMethod::Bootstrap => "bootstrap",
            IntervalMethod::WaldMle => "wald_mle",
            IntervalMethod::WaldMme => "wald_mme",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fiducial" => Some(IntervalMethod::Fiducial),
            "bootstrap" => Some(IntervalMethod::Bootstrap),
            "wald_mle" | "wald-mle" => Some(IntervalMethod::WaldMle),
            "wald_mme" | "wald-mme" => Some(IntervalMethod::WaldMme),
            _ => None,
        }
    }
}

impl std::fmt::Display for IntervalMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An interval estimate of a nonnegative concentration, together with the
/// point estimate its method reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub method: IntervalMethod,
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    pub point: f64,
}

impl IntervalEstimate {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.lower <= truth && truth <= self.upper
    }
}
