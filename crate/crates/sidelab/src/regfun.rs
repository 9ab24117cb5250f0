//! Regularization of the positive-part map.
//!
//! For a width `delta > 0` the triple (alpha, beta, gamma) consists of a
//! clipped ramp and its first two antiderivatives:
//!
//! ```text
//! alpha(r) = 0            (r <= 0)     beta(r)  = int_0^r alpha
//!          = r/delta      (0 < r <= delta)
//!          = 1            (r > delta)  gamma(r) = int_0^r beta
//! ```
//!
//! As `delta -> 0` these converge pointwise to the indicator of (0, inf),
//! the positive part r+, and the half-square (r+)^2 / 2. The key estimate,
//! used throughout the pathwise accounting, is the second-order Taylor bound
//!
//! ```text
//! |gamma(r1 + r2) - gamma(r1) - beta(r1) r2| <= r2^2 .
//! ```

use crate::error::{Error, Result};

/// Width parameter for the regularization triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegParams {
    delta: f64,
}

impl RegParams {
    /// A validated width; `delta` must be finite and strictly positive.
    pub fn new(delta: f64) -> Result<Self> {
        if !delta.is_finite() || delta <= 0.0 {
            return Err(Error::domain(format!(
                "regularization width must be finite and positive, got {delta}"
            )));
        }
        Ok(RegParams { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Clipped ramp: 0 below zero, `r/delta` on (0, delta], 1 above.
    pub fn alpha(&self, r: f64) -> Result<f64> {
        self.check(r)?;
        Ok(if r <= 0.0 {
            0.0
        } else if r <= self.delta {
            r / self.delta
        } else {
            1.0
        })
    }

    /// First antiderivative of [`alpha`](Self::alpha), vanishing at 0.
    pub fn beta(&self, r: f64) -> Result<f64> {
        self.check(r)?;
        Ok(if r <= 0.0 {
            0.0
        } else if r <= self.delta {
            r * r / (2.0 * self.delta)
        } else {
            r - self.delta / 2.0
        })
    }

    /// Second antiderivative of [`alpha`](Self::alpha), vanishing at 0.
    pub fn gamma(&self, r: f64) -> Result<f64> {
        self.check(r)?;
        let d = self.delta;
        Ok(if r <= 0.0 {
            0.0
        } else if r <= d {
            r * r * r / (6.0 * d)
        } else {
            d * d / 6.0 + r * r / 2.0 - d * r / 2.0
        })
    }

    fn check(&self, r: f64) -> Result<()> {
        if !r.is_finite() {
            return Err(Error::domain(format!("non-finite argument {r}")));
        }
        Ok(())
    }
}
