use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::TensorInfo;
use crate::linalg::{axpy, dot};
use crate::rng::standard_normal;

/// Fixed sinusoidal features of the preconditioned noise label.
pub const NOISE_FEATURES: usize = 9;
const FREQUENCIES: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

pub fn noise_features(c_noise: f64, out: &mut [f64]) {
    out[0] = c_noise;
    for (j, w) in FREQUENCIES.iter().enumerate() {
        out[1 + 2 * j] = libm::sin(w * c_noise);
        out[2 + 2 * j] = libm::cos(w * c_noise);
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Magnitude-preserving blend `((1 - w) a + w b) / sqrt((1 - w)^2 + w^2)`.
pub fn mp_sum(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    let (ca, cb) = mp_coefficients(w);
    a.iter().zip(b).map(|(x, y)| ca * x + cb * y).collect()
}

#[inline]
pub(crate) fn mp_coefficients(w: f64) -> (f64, f64) {
    let norm = libm::sqrt((1.0 - w) * (1.0 - w) + w * w);
    ((1.0 - w) / norm, w / norm)
}

/// Derivatives of the two mp-sum coefficients with respect to `w`.
#[inline]
pub(crate) fn mp_coefficient_grads(w: f64) -> (f64, f64) {
    let n2 = (1.0 - w) * (1.0 - w) + w * w;
    let n = libm::sqrt(n2);
    let dn = (2.0 * w - 1.0) / n;
    let da = (-n - (1.0 - w) * dn) / n2;
    let db = (n - w * dn) / n2;
    (da, db)
}

/// EDM preconditioning constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub sigma_data: f64,
}

impl Precond {
    pub fn c_skip(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sigma * sigma + sd2)
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        sigma * self.sigma_data / libm::sqrt(sigma * sigma + self.sigma_data * self.sigma_data)
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / libm::sqrt(sigma * sigma + self.sigma_data * self.sigma_data)
    }

    pub fn c_noise(&self, sigma: f64) -> f64 {
        0.25 * libm::log(sigma)
    }

    /// `[c_in * x, features(c_noise)]`, the input block every encoder sees.
    pub fn encode_input(&self, x: &[f64], sigma: f64, out: &mut Vec<f64>) {
        let c_in = self.c_in(sigma);
        out.extend(x.iter().map(|v| c_in * v));
        let start = out.len();
        out.resize(start + NOISE_FEATURES, 0.0);
        noise_features(self.c_noise(sigma), &mut out[start..]);
    }
}

/// Affine layer `W x + b` with `W` stored row-major (`output x input`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub offset: usize,
}

impl Dense {
    pub fn new(name: impl Into<String>, input: usize, output: usize, offset: usize) -> Self {
        Dense {
            name: name.into(),
            input,
            output,
            offset,
        }
    }

    pub fn len(&self) -> usize {
        self.input * self.output + self.output
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn end(&self) -> usize {
        self.offset + self.len()
    }

    fn weight_range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.input * self.output
    }

    fn bias_range(&self) -> core::ops::Range<usize> {
        self.offset + self.input * self.output..self.end()
    }

    pub fn tensors(&self) -> [TensorInfo; 2] {
        [
            TensorInfo {
                name: format!("{}.weight", self.name),
                shape: vec![self.output, self.input],
                offset: self.offset,
            },
            TensorInfo {
                name: format!("{}.bias", self.name),
                shape: vec![self.output],
                offset: self.offset + self.input * self.output,
            },
        ]
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input);
        let w = &p[self.weight_range()];
        let b = &p[self.bias_range()];
        w.chunks_exact(self.input)
            .zip(b)
            .map(|(row, bi)| dot(row, x) + bi)
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `want_input` is set.
    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        g_out: &[f64],
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let (gw_all, rest) = grad[self.offset..self.end()].split_at_mut(self.input * self.output);
        for ((gw_row, go), gb) in gw_all
            .chunks_exact_mut(self.input)
            .zip(g_out)
            .zip(rest.iter_mut())
        {
            *gb += go;
            if *go != 0.0 {
                axpy(*go, x, gw_row);
            }
        }
        if !want_input {
            return None;
        }
        let w = &p[self.weight_range()];
        let mut g_in = vec![0.0; self.input];
        for (row, go) in w.chunks_exact(self.input).zip(g_out) {
            if *go != 0.0 {
                axpy(*go, row, &mut g_in);
            }
        }
        Some(g_in)
    }

    /// Gaussian weights with variance `gain^2 / fan_in`, zero bias.
    pub fn init<R: Rng + ?Sized>(&self, p: &mut [f64], gain: f64, rng: &mut R) {
        let scale = gain / libm::sqrt(self.input as f64);
        for v in &mut p[self.weight_range()] {
            *v = scale * standard_normal(rng);
        }
        for v in &mut p[self.bias_range()] {
            *v = 0.0;
        }
    }

    pub fn zero(&self, p: &mut [f64]) {
        p[self.offset..self.end()].iter_mut().for_each(|v| *v = 0.0);
    }

    /// Copies `src`'s weights into the first `src.input` columns of `self`.
    pub fn copy_columns_from(&self, dst: &mut [f64], src: &Dense, src_params: &[f64]) {
        assert_eq!(self.output, src.output);
        assert!(src.input <= self.input);
        let sw = &src_params[src.weight_range()];
        for (o, src_row) in sw.chunks_exact(src.input).enumerate() {
            let start = self.offset + o * self.input;
            dst[start..start + src.input].copy_from_slice(src_row);
            dst[start + src.input..start + self.input]
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let sb = &src_params[src.bias_range()];
        dst[self.bias_range()].copy_from_slice(sb);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mp_sum_special_weights() {
        let a = [1.0, -2.0, 0.5];
        let b = [3.0, 0.25, -1.0];
        assert_eq!(mp_sum(&a, &b, 0.0), a.to_vec());
        let one = mp_sum(&a, &b, 1.0);
        for (x, y) in one.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        let half = mp_sum(&a, &b, 0.5);
        for ((h, x), y) in half.iter().zip(&a).zip(&b) {
            assert!((h - (x + y) / core::f64::consts::SQRT_2).abs() < 1e-15);
        }
    }

    #[test]
    fn mp_coefficient_grads_match_finite_differences() {
        for &w in &[0.0, 0.2, 0.5, 0.9, 1.0] {
            let h = 1e-6;
            let (ap, bp) = mp_coefficients(w + h);
            let (am, bm) = mp_coefficients(w - h);
            let (da, db) = mp_coefficient_grads(w);
            assert!((da - (ap - am) / (2.0 * h)).abs() < 1e-7);
            assert!((db - (bp - bm) / (2.0 * h)).abs() < 1e-7);
        }
    }

    #[test]
    fn single_linear_unit_gradient() {
        let layer = Dense::new("l", 1, 1, 0);
        let p = [2.5, 0.1];
        let mut grad = [0.0; 2];
        let g_in = layer.backward(&p, &[3.0], &[0.7], &mut grad, true).unwrap();
        assert!((grad[0] - 3.0 * 0.7).abs() < 1e-15);
        assert!((grad[1] - 0.7).abs() < 1e-15);
        assert!((g_in[0] - 2.5 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn preconditioning_constants() {
        let pc = Precond { sigma_data: 0.5 };
        assert!((pc.c_skip(0.5) - 0.5).abs() < 1e-15);
        assert!(pc.c_skip(1e6) < 1e-12);
        assert!((pc.c_skip(1e-9) - 1.0).abs() < 1e-12);
        assert!(pc.c_out(1e-9) < 1e-8);
        assert!((pc.c_noise(libm::exp(4.0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn silu_derivative() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
