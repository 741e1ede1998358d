use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Adam with bias correction.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, beta1: f64, beta2: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("AdamState::step", self.m.len(), grads.len()));
        }
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
        Ok(())
    }
}

/// Exponential moving average of a parameter vector.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: Vec<f64>,
    pub rate: f64,
}

impl EmaState {
    pub fn new(live: &[f64], rate: f64) -> Self {
        EmaState {
            shadow: live.to_vec(),
            rate,
        }
    }

    /// `shadow <- rate * shadow + (1 - rate) * live`.
    pub fn update(&mut self, live: &[f64]) -> Result<()> {
        if live.len() != self.shadow.len() {
            return Err(Error::dim(
                "EmaState::update",
                self.shadow.len(),
                live.len(),
            ));
        }
        let r = self.rate;
        for (s, l) in self.shadow.iter_mut().zip(live) {
            *s = r * *s + (1.0 - r) * l;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = AdamState::new(3, 0.9, 0.99);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        let mut adam = AdamState::new(2, 0.9, 0.99);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[0.3, -4.0], 0.01).unwrap();
        // m_hat = g, v_hat = g^2 after correction
        let expect = |g: f64| -0.01 * g / (g.abs() + 1e-8);
        assert!((p[0] - expect(0.3)).abs() < 1e-15);
        assert!((p[1] - expect(-4.0)).abs() < 1e-15);
    }

    #[test]
    fn degenerate_moments_give_sign_step() {
        let mut adam = AdamState::new(1, 0.0, 0.0);
        let mut p = vec![0.0];
        for g in [2.0, -0.5, 1e-3] {
            let before = p[0];
            adam.step(&mut p, &[g], 0.1).unwrap();
            assert!((p[0] - before + 0.1 * g / (g.abs() + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn ema_limits_and_geometric_series() {
        let mut e = EmaState::new(&[0.0], 1.0);
        e.update(&[5.0]).unwrap();
        assert_eq!(e.shadow, vec![0.0]);
        e.rate = 0.0;
        e.update(&[5.0]).unwrap();
        assert_eq!(e.shadow, vec![5.0]);
        let mut e = EmaState::new(&[0.0], 0.999);
        for _ in 0..1000 {
            e.update(&[2.0]).unwrap();
        }
        let expect = 2.0 * (1.0 - libm::pow(0.999, 1000.0));
        assert!((e.shadow[0] - expect).abs() < 1e-12);
        assert!((e.shadow[0] / 2.0 - 0.632).abs() < 1e-3);
    }
}
