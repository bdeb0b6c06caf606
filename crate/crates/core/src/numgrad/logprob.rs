use crate::error::{Error, Result};

/// A tiny positive overshoot tolerated from float drift and clamped to 0.
const POSITIVE_SLACK: f64 = 1e-9;

/// Log-domain probability. `-inf` encodes probability zero and absorbs
/// addition, so trellis corners stay exact instead of drifting through a
/// large-negative stand-in.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct LogProb(f64);

impl LogProb {
    /// Probability zero.
    pub const ZERO: LogProb = LogProb(f64::NEG_INFINITY);
    /// Probability one.
    pub const ONE: LogProb = LogProb(0.0);

    /// Wrap a log-domain value in `[-inf, 0]`. Drift up to `1e-9` above zero
    /// is clamped; anything larger (or NaN) is rejected.
    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || value > POSITIVE_SLACK {
            return Err(Error::Argument(format!(
                "log probability must be in [-inf, 0], got {value}"
            )));
        }
        Ok(LogProb(value.min(0.0)))
    }

    /// Log of a linear-domain probability in `[0, 1]`.
    pub fn from_prob(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Argument(format!(
                "probability must be in [0, 1], got {p}"
            )));
        }
        Ok(LogProb(p.ln()))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Back to linear domain.
    pub fn prob(self) -> f64 {
        self.0.exp()
    }

    pub fn is_zero(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }
}

/// `log Σ exp(vᵢ)` over raw log-domain values, max-shifted for stability.
/// An empty slice (or all `-inf`) yields `-inf`, the log of an empty sum.
pub fn log_sum_exp_f64(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

/// `log Σ exp(vᵢ)` over log-domain probabilities of disjoint events.
pub fn log_sum_exp(v: &[LogProb]) -> Result<LogProb> {
    if v.is_empty() {
        return Err(Error::Argument("log_sum_exp of an empty sequence".into()));
    }
    let raw: Vec<f64> = v.iter().map(|p| p.value()).collect();
    LogProb::new(log_sum_exp_f64(&raw))
}
