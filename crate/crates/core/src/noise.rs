use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A strictly positive, finite noise standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma.is_finite() && sigma > 0.0 {
            Ok(NoiseLevel(sigma))
        } else {
            Err(Error::param(
                "sigma",
                alloc::format!("must be positive and finite, got {sigma}"),
            ))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn variance(self) -> f64 {
        self.0 * self.0
    }

    #[inline]
    pub fn precision(self) -> f64 {
        1.0 / (self.0 * self.0)
    }
}

/// An observation `y = x0 + sigma * eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyObservation {
    pub y: Vec<f64>,
    pub sigma: NoiseLevel,
}

impl NoisyObservation {
    pub fn new(y: Vec<f64>, sigma: NoiseLevel) -> Self {
        NoisyObservation { y, sigma }
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }
}
