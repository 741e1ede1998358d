use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{
    mp_coefficient_grads, mp_coefficients, silu, silu_grad, Dense, Precond, NOISE_FEATURES,
};
use super::{Parameterized, TensorInfo};
use crate::error::{Error, Result};

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserArch {
    pub dim: usize,
    pub width: usize,
    /// Number of hidden layers; all but the last form the encoder.
    pub depth: usize,
    pub conditioned: bool,
    pub sigma_data: f64,
}

impl DenoiserArch {
    pub fn new(dim: usize, width: usize, depth: usize, sigma_data: f64) -> Self {
        DenoiserArch {
            dim,
            width,
            depth,
            conditioned: false,
            sigma_data,
        }
    }

    pub fn encoder_depth(&self) -> usize {
        self.depth - 1
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.width == 0 {
            return Err(Error::param("arch", "dimension and width must be positive"));
        }
        if self.depth < 2 {
            return Err(Error::param(
                "depth",
                "need at least two hidden layers (encoder + decoder)",
            ));
        }
        if !(self.sigma_data.is_finite() && self.sigma_data > 0.0) {
            return Err(Error::param("sigma_data", "must be positive"));
        }
        Ok(())
    }
}

/// Preconditioned MLP denoiser `D(x, sigma; cond) = c_skip x + c_out F(...)`.
///
/// The trunk sees `[c_in x, features(c_noise)]`. When conditioned, a second
/// encoder sees the trunk input together with `[c_in(s) y, features(s)]` for
/// the condition `(y, s)`; its last hidden activations are blended into the
/// trunk's with a magnitude-preserving sum whose weight starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    arch: DenoiserArch,
    trunk: Vec<Dense>,
    cond: Vec<Dense>,
    merge_offset: usize,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenoiserCache {
    sigma: f64,
    c_skip: f64,
    c_out: f64,
    /// Inputs to every trunk layer (index `l` feeds `trunk[l]`).
    acts: Vec<Vec<f64>>,
    /// Pre-activations of the trunk hidden layers.
    pre: Vec<Vec<f64>>,
    cond_acts: Vec<Vec<f64>>,
    cond_pre: Vec<Vec<f64>>,
    /// Trunk encoder output before the merge.
    enc_out: Vec<f64>,
    pub output: Vec<f64>,
}

impl MlpDenoiser {
    pub fn new<R: Rng + ?Sized>(arch: DenoiserArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut net = Self::layout(arch);
        for layer in &net.trunk[..arch.depth] {
            layer.init(&mut net.params, 1.0, rng);
        }
        // zero output layer: D(x, sigma) = c_skip x at initialization
        net.trunk[arch.depth].zero(&mut net.params);
        for layer in &net.cond {
            layer.init(&mut net.params, 1.0, rng);
        }
        Ok(net)
    }

    fn layout(arch: DenoiserArch) -> Self {
        let d = arch.dim;
        let w = arch.width;
        let mut offset = 0;
        let mut trunk = Vec::with_capacity(arch.depth + 1);
        for l in 0..=arch.depth {
            let input = if l == 0 { d + NOISE_FEATURES } else { w };
            let output = if l == arch.depth { d } else { w };
            let layer = Dense::new(format!("trunk.{l}"), input, output, offset);
            offset = layer.end();
            trunk.push(layer);
        }
        let mut cond = Vec::new();
        if arch.conditioned {
            for l in 0..arch.encoder_depth() {
                let input = if l == 0 { 2 * (d + NOISE_FEATURES) } else { w };
                let layer = Dense::new(format!("cond.{l}"), input, w, offset);
                offset = layer.end();
                cond.push(layer);
            }
        }
        let merge_offset = offset;
        if arch.conditioned {
            offset += 1;
        }
        MlpDenoiser {
            arch,
            trunk,
            cond,
            merge_offset,
            params: vec![0.0; offset],
        }
    }

    /// A conditioned copy of an unconditioned network: the trunk is copied,
    /// the condition encoder starts as a copy of the trunk encoder with zero
    /// weights on the condition inputs, and the merge weight is zero, so the
    /// copy computes exactly what `base` computes.
    pub fn conditioned_from(base: &MlpDenoiser) -> Result<Self> {
        if base.arch.conditioned {
            return Err(Error::param("base", "expected an unconditioned network"));
        }
        let arch = DenoiserArch {
            conditioned: true,
            ..base.arch
        };
        let mut net = Self::layout(arch);
        for (dst, src) in net.trunk.iter().zip(&base.trunk) {
            net.params[dst.offset..dst.end()].copy_from_slice(&base.params[src.offset..src.end()]);
        }
        for (l, dst) in net.cond.iter().enumerate() {
            dst.copy_columns_from(&mut net.params, &base.trunk[l], &base.params);
        }
        net.params[net.merge_offset] = 0.0;
        Ok(net)
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn precond(&self) -> Precond {
        Precond {
            sigma_data: self.arch.sigma_data,
        }
    }

    pub fn trunk_layers(&self) -> &[Dense] {
        &self.trunk
    }

    /// Current merge weight (zero for unconditioned networks).
    pub fn merge_weight(&self) -> f64 {
        if self.arch.conditioned {
            self.params[self.merge_offset]
        } else {
            0.0
        }
    }

    pub fn set_merge_weight(&mut self, w: f64) {
        if self.arch.conditioned {
            self.params[self.merge_offset] = w;
        }
    }

    /// Forces the merge weight back into `[0, 1]` after an optimizer update.
    pub fn project(&mut self) {
        if self.arch.conditioned {
            let w = &mut self.params[self.merge_offset];
            *w = w.clamp(0.0, 1.0);
        }
    }

    pub fn forward(&self, x: &[f64], sigma: f64, cond: Option<(&[f64], f64)>) -> Vec<f64> {
        self.forward_cached(x, sigma, cond).output
    }

    pub fn forward_cached(
        &self,
        x: &[f64],
        sigma: f64,
        cond: Option<(&[f64], f64)>,
    ) -> DenoiserCache {
        let pc = self.precond();
        let p = &self.params;
        let depth = self.arch.depth;
        let enc = self.arch.encoder_depth();
        let mut input = Vec::with_capacity(self.arch.dim + NOISE_FEATURES);
        pc.encode_input(x, sigma, &mut input);

        let mut cond_acts = Vec::new();
        let mut cond_pre = Vec::new();
        let mut cond_out = None;
        if self.arch.conditioned {
            if let Some((y, s)) = cond {
                let mut c_in = input.clone();
                pc.encode_input(y, s, &mut c_in);
                let mut a = c_in;
                for layer in &self.cond {
                    let z = layer.forward(p, &a);
                    let h: Vec<f64> = z.iter().map(|v| silu(*v)).collect();
                    cond_acts.push(a);
                    cond_pre.push(z);
                    a = h;
                }
                cond_out = Some(a);
            }
        }

        let mut acts = Vec::with_capacity(depth + 1);
        let mut pre = Vec::with_capacity(depth);
        let mut a = input;
        let mut enc_out = Vec::new();
        for l in 0..depth {
            let z = self.trunk[l].forward(p, &a);
            let mut h: Vec<f64> = z.iter().map(|v| silu(*v)).collect();
            acts.push(a);
            pre.push(z);
            if l + 1 == enc {
                if let Some(b) = &cond_out {
                    let (ca, cb) = mp_coefficients(self.merge_weight());
                    enc_out = h.clone();
                    for (hi, bi) in h.iter_mut().zip(b) {
                        *hi = ca * *hi + cb * bi;
                    }
                }
            }
            a = h;
        }
        let f = self.trunk[depth].forward(p, &a);
        acts.push(a);
        let c_skip = pc.c_skip(sigma);
        let c_out = pc.c_out(sigma);
        let output = x
            .iter()
            .zip(&f)
            .map(|(xi, fi)| c_skip * xi + c_out * fi)
            .collect();
        DenoiserCache {
            sigma,
            c_skip,
            c_out,
            acts,
            pre,
            cond_acts,
            cond_pre,
            enc_out,
            output,
        }
    }

    /// Accumulates `dL/dparams` for upstream `dL/dD` into `grad`.
    pub fn backward(&self, cache: &DenoiserCache, upstream: &[f64], grad: &mut [f64]) {
        self.backward_impl(cache, upstream, grad, false);
    }

    /// Like [`backward`](Self::backward) and also returns `dL/dx` (through
    /// both the skip path and the network).
    pub fn backward_with_input(
        &self,
        cache: &DenoiserCache,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        self.backward_impl(cache, upstream, grad, true)
            .expect("input gradient requested")
    }

    fn backward_impl(
        &self,
        cache: &DenoiserCache,
        upstream: &[f64],
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let p = &self.params;
        let depth = self.arch.depth;
        let enc = self.arch.encoder_depth();
        let merged = !cache.cond_acts.is_empty();
        let g_f: Vec<f64> = upstream.iter().map(|g| cache.c_out * g).collect();
        let mut g_a = self.trunk[depth]
            .backward(p, &cache.acts[depth], &g_f, grad, true)
            .expect("input gradient");
        let mut g_cond_out = None;
        for l in (0..depth).rev() {
            if merged && l + 1 == enc {
                let w = self.merge_weight();
                let (ca, cb) = mp_coefficients(w);
                let (da, db) = mp_coefficient_grads(w);
                let cond_out = last_activation(&cache.cond_pre);
                let mut gw = 0.0;
                for ((g, a), b) in g_a.iter().zip(&cache.enc_out).zip(&cond_out) {
                    gw += g * (da * a + db * b);
                }
                grad[self.merge_offset] += gw;
                g_cond_out = Some(g_a.iter().map(|g| cb * g).collect::<Vec<f64>>());
                g_a.iter_mut().for_each(|g| *g *= ca);
            }
            let g_z: Vec<f64> = g_a
                .iter()
                .zip(&cache.pre[l])
                .map(|(g, z)| g * silu_grad(*z))
                .collect();
            let need_in = l > 0 || want_input;
            match self.trunk[l].backward(p, &cache.acts[l], &g_z, grad, need_in) {
                Some(g) => g_a = g,
                None => g_a = Vec::new(),
            }
        }
        let mut g_input_cond = None;
        if let Some(mut g_h) = g_cond_out {
            for m in (0..self.cond.len()).rev() {
                let g_z: Vec<f64> = g_h
                    .iter()
                    .zip(&cache.cond_pre[m])
                    .map(|(g, z)| g * silu_grad(*z))
                    .collect();
                let need_in = m > 0 || want_input;
                match self.cond[m].backward(p, &cache.cond_acts[m], &g_z, grad, need_in) {
                    Some(g) => g_h = g,
                    None => g_h = Vec::new(),
                }
            }
            g_input_cond = Some(g_h);
        }
        if !want_input {
            return None;
        }
        // dL/dx = c_skip * upstream + c_in * (trunk input grad + cond-encoder trunk-input grad)
        let c_in = self.precond().c_in(cache.sigma);
        let d = self.arch.dim;
        let mut g_x: Vec<f64> = upstream.iter().map(|g| cache.c_skip * g).collect();
        for j in 0..d {
            let mut g = g_a[j];
            if let Some(gc) = &g_input_cond {
                g += gc[j];
            }
            g_x[j] += c_in * g;
        }
        Some(g_x)
    }

    /// Generator mode: perturbs the observation to level `(1 + gamma) sigma`
    /// with `z` and denoises it while conditioning on the original `(y, sigma)`.
    pub fn generate_cached(&self, y: &[f64], sigma: f64, z: &[f64], gamma: f64) -> DenoiserCache {
        let (y_hat, sigma_hat) = generator_input(y, sigma, z, gamma);
        self.forward_cached(&y_hat, sigma_hat, Some((y, sigma)))
    }

    pub fn generate(&self, y: &[f64], sigma: f64, z: &[f64], gamma: f64) -> Vec<f64> {
        self.generate_cached(y, sigma, z, gamma).output
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in self.tensors() {
            if self.params[t.offset..t.offset + t.len()]
                .iter()
                .any(|v| !v.is_finite())
            {
                return Err(Error::param(
                    "parameters",
                    format!("non-finite values in `{}`", t.name),
                ));
            }
        }
        Ok(())
    }
}

fn last_activation(pre: &[Vec<f64>]) -> Vec<f64> {
    pre.last()
        .map(|z| z.iter().map(|v| silu(*v)).collect())
        .unwrap_or_default()
}

/// `(y + sqrt(sigma_hat^2 - sigma^2) z, sigma_hat)` with `sigma_hat = (1 + gamma) sigma`.
pub fn generator_input(y: &[f64], sigma: f64, z: &[f64], gamma: f64) -> (Vec<f64>, f64) {
    let sigma_hat = sigma + gamma * sigma;
    let std = libm::sqrt(sigma_hat * sigma_hat - sigma * sigma);
    (
        y.iter().zip(z).map(|(a, b)| a + std * b).collect(),
        sigma_hat,
    )
}

impl Parameterized for MlpDenoiser {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn tensors(&self) -> Vec<TensorInfo> {
        let mut out: Vec<TensorInfo> = self
            .trunk
            .iter()
            .chain(&self.cond)
            .flat_map(|l| l.tensors())
            .collect();
        if self.arch.conditioned {
            out.push(TensorInfo {
                name: "merge.weight".into(),
                shape: vec![1],
                offset: self.merge_offset,
            });
        }
        out
    }
}
