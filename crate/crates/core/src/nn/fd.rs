//! Central-difference checks of every backward pass.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{log_sigmoid, DenoiserArch, Discriminator, MlpDenoiser, Parameterized, UncertaintyNet};
use crate::error::Result;
use crate::rng::{normal_vec, standard_normal, stream, StreamRng};

pub const FD_STEP: f64 = 1e-6;
pub const FD_ABS_TOL: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-3;

/// Worst agreement between analytic and finite-difference gradients of one
/// network over a set of random configurations.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub network: String,
    pub configs: usize,
    /// Scalar derivatives compared.
    pub checked: usize,
    /// Largest `|fd - analytic| / max(abs_tol, rel_tol |fd|)`; at most 1 passes.
    pub worst_ratio: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

struct Tally {
    checked: usize,
    worst: f64,
}

impl Tally {
    fn add(&mut self, fd: f64, analytic: f64) {
        let ratio = (fd - analytic).abs() / f64::max(FD_ABS_TOL, FD_REL_TOL * fd.abs());
        // NaN counts as a failure
        self.worst = if ratio.is_nan() {
            f64::INFINITY
        } else {
            self.worst.max(ratio)
        };
        self.checked += 1;
    }

    fn params<N: Parameterized + Clone>(
        &mut self,
        net: &N,
        analytic: &[f64],
        loss: impl Fn(&N) -> f64,
    ) {
        let mut probe = net.clone();
        for (i, &an) in analytic.iter().enumerate() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + FD_STEP;
            let lp = loss(&probe);
            probe.params_mut()[i] = orig - FD_STEP;
            let lm = loss(&probe);
            probe.params_mut()[i] = orig;
            self.add((lp - lm) / (2.0 * FD_STEP), an);
        }
    }

    fn inputs(&mut self, x: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64) {
        for (j, &an) in analytic.iter().enumerate() {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[j] += FD_STEP;
            m[j] -= FD_STEP;
            self.add((loss(&p) - loss(&m)) / (2.0 * FD_STEP), an);
        }
    }

    fn report(self, network: &str, configs: usize) -> FdReport {
        FdReport {
            network: network.into(),
            configs,
            checked: self.checked,
            worst_ratio: self.worst,
        }
    }
}

fn randomize<N: Parameterized>(net: &mut N, rng: &mut StreamRng, scale: f64) {
    for v in net.params_mut() {
        *v = scale * standard_normal(rng);
    }
}

fn random_arch(rng: &mut StreamRng) -> DenoiserArch {
    DenoiserArch::new(
        rng.random_range(1..4),
        rng.random_range(3..7),
        rng.random_range(2..4),
        0.5,
    )
}

fn random_level(rng: &mut StreamRng) -> f64 {
    libm::exp(rng.random::<f64>() * 4.0 - 2.0)
}

fn weighted(out: &[f64], up: &[f64]) -> f64 {
    out.iter().zip(up).map(|(a, b)| a * b).sum()
}

/// Checks the denoiser, the conditioned generator, the conditioned score
/// model (parameters and input), the discriminator (parameters and input)
/// and the uncertainty net on `configs` random configurations each.
pub fn check_backward_passes(configs: usize, seed: u64) -> Result<Vec<FdReport>> {
    let mut reports = Vec::with_capacity(5);

    let mut tally = Tally {
        checked: 0,
        worst: 0.0,
    };
    for c in 0..configs {
        let mut rng = stream(seed, &[1, c as u64]);
        let arch = random_arch(&mut rng);
        let mut net = MlpDenoiser::new(arch, &mut rng)?;
        randomize(&mut net, &mut rng, 0.5);
        let x = normal_vec(&mut rng, arch.dim);
        let up = normal_vec(&mut rng, arch.dim);
        let sigma = random_level(&mut rng);
        let cache = net.forward_cached(&x, sigma, None);
        let mut grad = vec![0.0; net.n_params()];
        net.backward(&cache, &up, &mut grad);
        tally.params(&net, &grad, |n: &MlpDenoiser| {
            weighted(&n.forward(&x, sigma, None), &up)
        });
    }
    reports.push(tally.report("denoiser", configs));

    let mut tally = Tally {
        checked: 0,
        worst: 0.0,
    };
    for c in 0..configs {
        let mut rng = stream(seed, &[2, c as u64]);
        let arch = random_arch(&mut rng);
        let mut net = MlpDenoiser::conditioned_from(&MlpDenoiser::new(arch, &mut rng)?)?;
        randomize(&mut net, &mut rng, 0.5);
        net.set_merge_weight(0.1 + 0.8 * rng.random::<f64>());
        let y = normal_vec(&mut rng, arch.dim);
        let z = normal_vec(&mut rng, arch.dim);
        let up = normal_vec(&mut rng, arch.dim);
        let sigma = random_level(&mut rng);
        let gamma = 0.414;
        let cache = net.generate_cached(&y, sigma, &z, gamma);
        let mut grad = vec![0.0; net.n_params()];
        net.backward(&cache, &up, &mut grad);
        tally.params(&net, &grad, |n: &MlpDenoiser| {
            weighted(&n.generate(&y, sigma, &z, gamma), &up)
        });
    }
    reports.push(tally.report("generator", configs));

    let mut tally = Tally {
        checked: 0,
        worst: 0.0,
    };
    for c in 0..configs {
        let mut rng = stream(seed, &[3, c as u64]);
        let arch = random_arch(&mut rng);
        let mut net = MlpDenoiser::conditioned_from(&MlpDenoiser::new(arch, &mut rng)?)?;
        randomize(&mut net, &mut rng, 0.5);
        net.set_merge_weight(0.1 + 0.8 * rng.random::<f64>());
        let x = normal_vec(&mut rng, arch.dim);
        let y = normal_vec(&mut rng, arch.dim);
        let target = normal_vec(&mut rng, arch.dim);
        let (t, sigma) = (random_level(&mut rng), random_level(&mut rng));
        let sq = |out: &[f64]| {
            out.iter()
                .zip(&target)
                .map(|(o, tg)| (o - tg) * (o - tg))
                .sum::<f64>()
        };
        let cache = net.forward_cached(&x, t, Some((&y, sigma)));
        let g_out: Vec<f64> = cache
            .output
            .iter()
            .zip(&target)
            .map(|(o, tg)| 2.0 * (o - tg))
            .collect();
        let mut grad = vec![0.0; net.n_params()];
        let g_x = net.backward_with_input(&cache, &g_out, &mut grad);
        tally.params(&net, &grad, |n: &MlpDenoiser| {
            sq(&n.forward(&x, t, Some((&y, sigma))))
        });
        tally.inputs(&x, &g_x, |v| sq(&net.forward(v, t, Some((&y, sigma)))));
    }
    reports.push(tally.report("score model", configs));

    let mut tally = Tally {
        checked: 0,
        worst: 0.0,
    };
    for c in 0..configs {
        let mut rng = stream(seed, &[4, c as u64]);
        let dim = rng.random_range(1..4);
        let width = rng.random_range(3..7);
        let depth = rng.random_range(1..3);
        let mut d = Discriminator::new(dim, width, depth, 0.5, &mut rng)?;
        randomize(&mut d, &mut rng, 0.4);
        let x = normal_vec(&mut rng, dim);
        let y = normal_vec(&mut rng, dim);
        let (t, sigma) = (random_level(&mut rng), random_level(&mut rng));
        let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
        let loss = |n: &Discriminator, v: &[f64]| {
            -log_sigmoid(sign * n.forward_cached(v, t, &y, sigma).logit)
        };
        let cache = d.forward_cached(&x, t, &y, sigma);
        let d_logit = if sign > 0.0 {
            cache.prob() - 1.0
        } else {
            cache.prob()
        };
        let mut grad = vec![0.0; d.n_params()];
        let g_x = d.backward_with_input(&cache, d_logit, &mut grad);
        tally.params(&d, &grad, |n: &Discriminator| loss(n, &x));
        tally.inputs(&x, &g_x, |v| loss(&d, v));
    }
    reports.push(tally.report("discriminator", configs));

    let mut tally = Tally {
        checked: 0,
        worst: 0.0,
    };
    for c in 0..configs {
        let mut rng = stream(seed, &[5, c as u64]);
        let mut net = UncertaintyNet::new(rng.random_range(2..9), &mut rng);
        randomize(&mut net, &mut rng, 0.5);
        let t = libm::exp(rng.random::<f64>() * 11.5 - 6.9);
        let up = standard_normal(&mut rng);
        let cache = net.forward_cached(t);
        let mut grad = vec![0.0; net.n_params()];
        net.backward(&cache, up, &mut grad);
        tally.params(&net, &grad, |n: &UncertaintyNet| up * n.forward(t));
    }
    reports.push(tally.report("uncertainty", configs));

    Ok(reports)
}
