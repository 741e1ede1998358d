//! EDM noise-level grids.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// `sigma_i = (sigma_max^(1/rho) + i/(N-1) (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho`
/// for `i = 0..N`, decreasing from `sigma_max` to `sigma_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealingSchedule {
    pub n: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    levels: Vec<f64>,
}

/// Single grid point, without building the whole grid.
pub fn edm_sigma(i: usize, n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> f64 {
    if i == 0 {
        return sigma_max;
    }
    if i + 1 == n {
        return sigma_min;
    }
    let a = libm::pow(sigma_max, 1.0 / rho);
    let b = libm::pow(sigma_min, 1.0 / rho);
    libm::pow(a + i as f64 / (n - 1) as f64 * (b - a), rho)
}

impl AnnealingSchedule {
    pub fn edm(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("n", "schedule needs at least one level"));
        }
        if !(sigma_min > 0.0 && sigma_min.is_finite() && sigma_max.is_finite()) {
            return Err(Error::param("sigma_min", "must be positive and finite"));
        }
        if n > 1 && sigma_min >= sigma_max {
            return Err(Error::param("sigma_min", "must be below sigma_max"));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::param("rho", "must be positive"));
        }
        let levels = (0..n)
            .map(|i| edm_sigma(i, n, sigma_min, sigma_max, rho))
            .collect();
        Ok(AnnealingSchedule {
            n,
            sigma_min,
            sigma_max,
            rho,
            levels,
        })
    }

    /// Grid used for generation: 40 levels, rho 7, from 80 down to 0.002.
    pub fn generation() -> Self {
        Self::edm(40, 0.002, 80.0, 7.0).expect("valid preset")
    }

    /// Grid used for plug-and-play inference: 50 levels, rho 2.
    pub fn pnp() -> Self {
        Self::edm(50, 0.002, 80.0, 2.0).expect("valid preset")
    }

    /// Grid used to draw training noise levels: 1000 levels, rho 7.
    pub fn training() -> Self {
        Self::edm(1000, 0.002, 80.0, 7.0).expect("valid preset")
    }

    /// Levels in decreasing order (`levels()[0] = sigma_max`).
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> f64 {
        self.levels[i]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// The levels at `indices`, which must be strictly increasing.
    pub fn select(&self, indices: &[usize]) -> Result<Vec<f64>> {
        if indices.is_empty() {
            return Err(Error::param("indices", "need at least one step"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("indices", "must be strictly increasing"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n) {
            return Err(Error::param(
                "indices",
                alloc::format!("index {bad} outside a grid of {} levels", self.n),
            ));
        }
        Ok(indices.iter().map(|&i| self.levels[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        for (n, rho) in [(40, 7.0), (1000, 7.0), (50, 2.0)] {
            let s = AnnealingSchedule::edm(n, 0.002, 80.0, rho).unwrap();
            assert_eq!(s.level(0), 80.0);
            assert_eq!(s.level(n - 1), 0.002);
            assert!(s.levels().windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn mid_grid_value() {
        let s = AnnealingSchedule::generation();
        assert!((s.level(20) - 2.24).abs() < 5e-3, "{}", s.level(20));
    }

    #[test]
    fn select_validates() {
        let s = AnnealingSchedule::generation();
        assert!(s.select(&[10, 10]).is_err());
        assert!(s.select(&[40]).is_err());
        assert_eq!(s.select(&[0, 39]).unwrap(), alloc::vec![80.0, 0.002]);
    }
}
