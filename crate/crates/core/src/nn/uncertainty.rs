use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{noise_features, silu, silu_grad, Dense, NOISE_FEATURES};
use super::{Parameterized, TensorInfo};

/// Scalar loss weighting `w(t)`: one hidden layer on features of `ln t / 4`.
/// The output layer starts at zero, so `w(t) = 0` initially.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyNet {
    hidden: Dense,
    out: Dense,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct UncertaintyCache {
    features: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    pub value: f64,
}

impl UncertaintyNet {
    pub const DEFAULT_WIDTH: usize = 64;

    pub fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let hidden = Dense::new("hidden", NOISE_FEATURES, width, 0);
        let out = Dense::new("out", width, 1, hidden.end());
        let mut params = vec![0.0; out.end()];
        hidden.init(&mut params, 1.0, rng);
        out.zero(&mut params);
        UncertaintyNet {
            hidden,
            out,
            params,
        }
    }

    pub fn forward_cached(&self, t: f64) -> UncertaintyCache {
        let mut features = vec![0.0; NOISE_FEATURES];
        noise_features(0.25 * libm::log(t), &mut features);
        let pre = self.hidden.forward(&self.params, &features);
        let act: Vec<f64> = pre.iter().map(|v| silu(*v)).collect();
        let value = self.out.forward(&self.params, &act)[0];
        UncertaintyCache {
            features,
            pre,
            act,
            value,
        }
    }

    pub fn forward(&self, t: f64) -> f64 {
        self.forward_cached(t).value
    }

    pub fn backward(&self, cache: &UncertaintyCache, upstream: f64, grad: &mut [f64]) {
        let g_act = self
            .out
            .backward(&self.params, &cache.act, &[upstream], grad, true)
            .expect("input gradient");
        let g_pre: Vec<f64> = g_act
            .iter()
            .zip(&cache.pre)
            .map(|(g, z)| g * silu_grad(*z))
            .collect();
        self.hidden
            .backward(&self.params, &cache.features, &g_pre, grad, false);
    }
}

impl Parameterized for UncertaintyNet {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn tensors(&self) -> Vec<TensorInfo> {
        self.hidden
            .tensors()
            .into_iter()
            .chain(self.out.tensors())
            .collect()
    }
}
