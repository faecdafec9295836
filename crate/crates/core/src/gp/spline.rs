//! Natural cubic spline basis in truncated-power form.

use crate::error::{Error, Result};
use crate::stats;

/// Natural cubic spline basis with `K` knots and `K` functions:
/// `N₁ = 1`, `N₂ = t`, `N_{k+2} = d_k - d_{K-1}` with
/// `d_k(t) = ((t - ξ_k)₊³ - (t - ξ_K)₊³) / (ξ_K - ξ_k)`.
/// Every function is linear beyond the boundary knots.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    knots: Vec<f64>,
}

impl SplineBasis {
    /// Knots at `K` equally spaced empirical quantiles (probabilities
    /// `j/(K-1)`), so the boundary knots are the sample min and max.
    pub fn from_values(values: &[f64], k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::arg(format!("spline basis needs at least 2 knots, got {k}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("spline values must be finite"));
        }
        let s = stats::sorted(values);
        let mut distinct = 0usize;
        for (i, v) in s.iter().enumerate() {
            if i == 0 || *v != s[i - 1] {
                distinct += 1;
            }
        }
        if distinct < k {
            return Err(Error::DegenerateKnots {
                distinct,
                required: k,
            });
        }
        let knots: Vec<f64> = (0..k)
            .map(|j| stats::quantile_sorted(&s, j as f64 / (k - 1) as f64))
            .collect();
        Self::from_knots(knots)
    }

    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        let k = knots.len();
        if k < 2 {
            return Err(Error::arg("spline basis needs at least 2 knots"));
        }
        let distinct = 1 + knots.windows(2).filter(|w| w[1] > w[0]).count();
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::DegenerateKnots {
                distinct,
                required: k,
            });
        }
        Ok(SplineBasis { knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let k = self.knots.len();
        let last = self.knots[k - 1];
        let cube = |u: f64| if u > 0.0 { u * u * u } else { 0.0 };
        let d = |j: usize| (cube(t - self.knots[j]) - cube(t - last)) / (last - self.knots[j]);
        let mut out = Vec::with_capacity(k);
        out.push(1.0);
        out.push(t);
        if k > 2 {
            let d_last = d(k - 2);
            for j in 0..k - 2 {
                out.push(d(j) - d_last);
            }
        }
        out
    }
}
