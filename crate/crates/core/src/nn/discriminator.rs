use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{silu, silu_grad, Dense, Precond, NOISE_FEATURES};
use super::{MlpDenoiser, Parameterized, TensorInfo};
use crate::error::{Error, Result};

/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before the sigmoid.
pub const LOGIT_CLAMP: f64 = 15.0;

/// `C(x_t, t, y, sigma)`: two encoders, one for the noisy sample and one for
/// the noisy observation, whose features are concatenated and projected to a
/// logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    dim: usize,
    sigma_data: f64,
    sample_enc: Vec<Dense>,
    obs_enc: Vec<Dense>,
    head: Dense,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
struct EncCache {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DiscCache {
    t: f64,
    sample: EncCache,
    obs: EncCache,
    raw_logit: f64,
    /// Clamped logit.
    pub logit: f64,
}

impl DiscCache {
    pub fn prob(&self) -> f64 {
        sigmoid(self.logit)
    }

    /// Whether the logit was inside the clamp (gradients flow).
    pub fn active(&self) -> bool {
        self.raw_logit.abs() < LOGIT_CLAMP
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// `ln sigmoid(x)`, stable for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -libm::log1p(libm::exp(-x))
    } else {
        x - libm::log1p(libm::exp(x))
    }
}

fn layout(dim: usize, width: usize, depth: usize) -> (Vec<Dense>, Vec<Dense>, Dense, usize) {
    let mut offset = 0;
    let mut build = |prefix: &str| {
        let mut v = Vec::with_capacity(depth);
        for l in 0..depth {
            let input = if l == 0 { dim + NOISE_FEATURES } else { width };
            let d = Dense::new(format!("{prefix}.{l}"), input, width, offset);
            offset = d.end();
            v.push(d);
        }
        v
    };
    let sample_enc = build("sample_enc");
    let obs_enc = build("obs_enc");
    let head = Dense::new("head", 2 * width, 1, offset);
    let end = head.end();
    (sample_enc, obs_enc, head, end)
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        width: usize,
        depth: usize,
        sigma_data: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || width == 0 || depth == 0 {
            return Err(Error::param(
                "discriminator",
                "dimension, width and depth must be positive",
            ));
        }
        let (sample_enc, obs_enc, head, n) = layout(dim, width, depth);
        let mut d = Discriminator {
            dim,
            sigma_data,
            sample_enc,
            obs_enc,
            head,
            params: vec![0.0; n],
        };
        for l in d.sample_enc.iter().chain(&d.obs_enc) {
            l.init(&mut d.params, 1.0, rng);
        }
        d.head.zero(&mut d.params);
        Ok(d)
    }

    /// Both encoders start as copies of the teacher's encoder; the head is
    /// zero so the initial output is exactly 1/2.
    pub fn from_teacher(teacher: &MlpDenoiser) -> Result<Self> {
        let arch = teacher.arch();
        let depth = arch.encoder_depth();
        let (sample_enc, obs_enc, head, n) = layout(arch.dim, arch.width, depth);
        let mut d = Discriminator {
            dim: arch.dim,
            sigma_data: arch.sigma_data,
            sample_enc,
            obs_enc,
            head,
            params: vec![0.0; n],
        };
        let src = teacher.trunk_layers();
        let tp = teacher.params();
        for l in 0..depth {
            let s = &src[l];
            for dst in [&d.sample_enc[l], &d.obs_enc[l]] {
                d.params[dst.offset..dst.end()].copy_from_slice(&tp[s.offset..s.end()]);
            }
        }
        Ok(d)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, layers: &[Dense], x: &[f64], level: f64) -> EncCache {
        let pc = Precond {
            sigma_data: self.sigma_data,
        };
        let mut a = Vec::with_capacity(self.dim + NOISE_FEATURES);
        pc.encode_input(x, level, &mut a);
        let mut acts = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len());
        for l in layers {
            let z = l.forward(&self.params, &a);
            let h = z.iter().map(|v| silu(*v)).collect();
            acts.push(a);
            pre.push(z);
            a = h;
        }
        EncCache { acts, pre, out: a }
    }

    pub fn forward_cached(&self, x_t: &[f64], t: f64, y: &[f64], sigma: f64) -> DiscCache {
        let sample = self.encode(&self.sample_enc, x_t, t);
        let obs = self.encode(&self.obs_enc, y, sigma);
        let mut feat = sample.out.clone();
        feat.extend_from_slice(&obs.out);
        let raw_logit = self.head.forward(&self.params, &feat)[0];
        DiscCache {
            t,
            sample,
            obs,
            raw_logit,
            logit: raw_logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP),
        }
    }

    pub fn prob(&self, x_t: &[f64], t: f64, y: &[f64], sigma: f64) -> f64 {
        self.forward_cached(x_t, t, y, sigma).prob()
    }

    fn encoder_backward(
        &self,
        layers: &[Dense],
        cache: &EncCache,
        mut g: Vec<f64>,
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        for l in (0..layers.len()).rev() {
            let g_z: Vec<f64> = g
                .iter()
                .zip(&cache.pre[l])
                .map(|(g, z)| g * silu_grad(*z))
                .collect();
            let need = l > 0 || want_input;
            g = layers[l].backward(&self.params, &cache.acts[l], &g_z, grad, need)?;
        }
        Some(g)
    }

    fn backward_impl(
        &self,
        cache: &DiscCache,
        d_logit: f64,
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        if !cache.active() || d_logit == 0.0 {
            return want_input.then(|| vec![0.0; self.dim]);
        }
        let mut feat = cache.sample.out.clone();
        feat.extend_from_slice(&cache.obs.out);
        let g_feat = self
            .head
            .backward(&self.params, &feat, &[d_logit], grad, true)
            .expect("input gradient");
        let w = cache.sample.out.len();
        self.encoder_backward(&self.obs_enc, &cache.obs, g_feat[w..].to_vec(), grad, false);
        let g_in = self.encoder_backward(
            &self.sample_enc,
            &cache.sample,
            g_feat[..w].to_vec(),
            grad,
            want_input,
        )?;
        let c_in = Precond {
            sigma_data: self.sigma_data,
        }
        .c_in(cache.t);
        Some(g_in[..self.dim].iter().map(|g| c_in * g).collect())
    }

    /// Accumulates parameter gradients for upstream `dL/dlogit`.
    pub fn backward(&self, cache: &DiscCache, d_logit: f64, grad: &mut [f64]) {
        self.backward_impl(cache, d_logit, grad, false);
    }

    /// As [`backward`](Self::backward), also returning `dL/dx_t`.
    pub fn backward_with_input(
        &self,
        cache: &DiscCache,
        d_logit: f64,
        grad: &mut [f64],
    ) -> Vec<f64> {
        self.backward_impl(cache, d_logit, grad, true)
            .expect("input gradient requested")
    }
}

impl Parameterized for Discriminator {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn tensors(&self) -> Vec<TensorInfo> {
        self.sample_enc
            .iter()
            .chain(&self.obs_enc)
            .chain(core::iter::once(&self.head))
            .flat_map(|l| l.tensors())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenoiserArch;
    use crate::rng::stream;

    #[test]
    fn teacher_copy_starts_at_one_half() {
        let mut rng = stream(1, &[]);
        let teacher = MlpDenoiser::new(DenoiserArch::new(2, 8, 3, 0.5), &mut rng).unwrap();
        let d = Discriminator::from_teacher(&teacher).unwrap();
        assert_eq!(d.prob(&[0.3, 0.1], 0.5, &[1.0, -1.0], 2.0), 0.5);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + core::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!(log_sigmoid(800.0) <= 0.0);
        // clamped logits bound the per-sample loss
        assert!(-log_sigmoid(-LOGIT_CLAMP) < 30.0);
    }

    #[test]
    fn clamped_logit_blocks_gradient() {
        let mut rng = stream(2, &[]);
        let mut d = Discriminator::new(1, 4, 1, 0.5, &mut rng).unwrap();
        let head = d.head.clone();
        d.params[head.end() - 1] = 100.0;
        let cache = d.forward_cached(&[0.0], 1.0, &[0.0], 1.0);
        assert_eq!(cache.logit, LOGIT_CLAMP);
        let mut grad = vec![0.0; d.n_params()];
        let gx = d.backward_with_input(&cache, 1.0, &mut grad);
        assert!(grad.iter().all(|g| *g == 0.0));
        assert_eq!(gx, vec![0.0]);
    }
}
