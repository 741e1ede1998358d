//! Multi-step generative denoising.
//!
//! Starting from `x_N`, each retained level `sigma_i` fuses the observation
//! with the current iterate into `(y_eff, sigma_eff)`, draws `x0` from the
//! denoiser at that effective condition and moves to the next level with the
//! DDIM-type transition
//! `N(x0 + sigma_prev sqrt(1 - zeta) (x_i - x0) / sigma_i, sigma_prev^2 zeta I)`.
//! With an exact denoiser every intermediate `x_i` is distributed as
//! `q(x_i | y_sigma)`. The last retained level ends with a denoiser draw and
//! no trailing noise.

use alloc::vec::Vec;

use crate::batch::{Provenance, SampleBatch};
use crate::error::{Error, Result};
use crate::gmm::{fuse, GaussianMixture};
use crate::nn::MlpDenoiser;
use crate::noise::NoisyObservation;
use crate::rng::{normal_vec, stream, tag, StreamRng};
use crate::schedule::AnnealingSchedule;

/// Anything that can draw `x0 ~ mu(x0 | y_sigma)`.
pub trait PosteriorSampler: Sync {
    fn dim(&self) -> usize;
    fn sample_x0(&self, y: &[f64], sigma: f64, rng: &mut StreamRng) -> Result<Vec<f64>>;
    fn provenance(&self, steps: usize) -> Provenance;
}

/// Exact draws from a Gaussian-mixture prior's denoising posterior.
#[derive(Debug, Clone, Copy)]
pub struct OracleDenoiser<'a>(pub &'a GaussianMixture);

impl PosteriorSampler for OracleDenoiser<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn sample_x0(&self, y: &[f64], sigma: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
        if y.len() != self.0.dim() {
            return Err(Error::dim(
                "OracleDenoiser::sample_x0",
                self.0.dim(),
                y.len(),
            ));
        }
        Ok(self.0.sample_posterior_raw(y, sigma, rng))
    }

    fn provenance(&self, _steps: usize) -> Provenance {
        Provenance::Oracle
    }
}

/// A trained generator `G(y, sigma, z)` with `z ~ N(0, I)`.
#[derive(Debug, Clone, Copy)]
pub struct GenerativeDenoiser<'a> {
    pub net: &'a MlpDenoiser,
    pub gamma: f64,
}

impl PosteriorSampler for GenerativeDenoiser<'_> {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn sample_x0(&self, y: &[f64], sigma: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
        if y.len() != self.net.dim() {
            return Err(Error::dim(
                "GenerativeDenoiser::sample_x0",
                self.net.dim(),
                y.len(),
            ));
        }
        let z = normal_vec(rng, y.len());
        let out = self.net.generate(y, sigma, &z, self.gamma);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "generator output",
                stage: "sampling",
                step: 0,
            });
        }
        Ok(out)
    }

    fn provenance(&self, steps: usize) -> Provenance {
        if steps == 1 {
            Provenance::Learned1Step
        } else {
            Provenance::LearnedKStep
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub zeta: f64,
    pub schedule: AnnealingSchedule,
    /// Retained indices into `schedule`, strictly increasing.
    pub indices: Vec<usize>,
    /// Level of the pseudo-observation in unconditional mode. Only recorded:
    /// unconditional sampling takes the `sigma -> infinity` limit exactly.
    pub sigma_init: f64,
}

impl SamplerConfig {
    pub fn new(schedule: AnnealingSchedule, indices: Vec<usize>, zeta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&zeta) {
            return Err(Error::param("zeta", "must lie in [0, 1]"));
        }
        schedule.select(&indices)?;
        Ok(SamplerConfig {
            zeta,
            schedule,
            indices,
            sigma_init: 80.0,
        })
    }

    /// Uses every level of `schedule`.
    pub fn full(schedule: AnnealingSchedule, zeta: f64) -> Result<Self> {
        let indices = (0..schedule.len()).collect();
        Self::new(schedule, indices, zeta)
    }

    /// Preset few-step schedules on the 40-level generation grid.
    pub fn few_step(steps: usize) -> Result<Self> {
        Self::new(
            AnnealingSchedule::generation(),
            Self::preset_indices(steps)?,
            1.0,
        )
    }

    pub fn preset_indices(steps: usize) -> Result<Vec<usize>> {
        match steps {
            1 => Ok(alloc::vec![10]),
            2 => Ok(alloc::vec![10, 22]),
            4 => Ok(alloc::vec![0, 10, 20, 30]),
            _ => Err(Error::param("steps", "presets exist for 1, 2 and 4 steps")),
        }
    }

    pub fn steps(&self) -> usize {
        self.indices.len()
    }

    /// Retained levels, largest first.
    pub fn levels(&self) -> Vec<f64> {
        self.indices
            .iter()
            .map(|&i| self.schedule.level(i))
            .collect()
    }
}

/// One draw from `q(x_{i-1} | x_i, x0)`.
pub fn ddim_transition(
    x_i: &[f64],
    x0: &[f64],
    sigma_i: f64,
    sigma_prev: f64,
    zeta: f64,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if !(sigma_prev < sigma_i) {
        return Err(Error::param("sigma_prev", "must be below sigma_i"));
    }
    if x_i.len() != x0.len() {
        return Err(Error::dim("ddim_transition", x_i.len(), x0.len()));
    }
    let keep = sigma_prev * libm::sqrt(1.0 - zeta) / sigma_i;
    let std = sigma_prev * libm::sqrt(zeta);
    let mut out = Vec::with_capacity(x0.len());
    for (a, b) in x_i.iter().zip(x0) {
        let e = if zeta > 0.0 {
            crate::rng::standard_normal(rng)
        } else {
            0.0
        };
        out.push(b + keep * (a - b) + std * e);
    }
    Ok(out)
}

/// Runs the chain from a given `x_N` at `levels[0]`. `observe(k, x)` sees the
/// iterate at `levels[k]` for every `k` (including the start). `cond = None`
/// is the unconditional limit: `y_eff = x_i`, `sigma_eff = sigma_i`.
pub fn run_chain<S: PosteriorSampler + ?Sized>(
    denoiser: &S,
    cond: Option<(&[f64], f64)>,
    levels: &[f64],
    zeta: f64,
    x_init: Vec<f64>,
    rng: &mut StreamRng,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>> {
    if levels.is_empty() {
        return Err(Error::param("levels", "need at least one level"));
    }
    let mut x = x_init;
    observe(0, &x);
    for (k, &sigma_i) in levels.iter().enumerate() {
        let x0 = match cond {
            Some((y, sigma)) => {
                let (y_eff, s_eff) = fuse(y, sigma, &x, sigma_i);
                denoiser.sample_x0(&y_eff, s_eff, rng)?
            }
            None => denoiser.sample_x0(&x, sigma_i, rng)?,
        };
        match levels.get(k + 1) {
            Some(&next) => {
                x = ddim_transition(&x, &x0, sigma_i, next, zeta, rng)?;
                observe(k + 1, &x);
            }
            None => return Ok(x0),
        }
    }
    unreachable!("loop returns at the last level")
}

/// One multi-step draw given `y_sigma` (or unconditionally for `None`),
/// starting from `x_N ~ N(0, sigma_N^2 I)`.
pub fn multistep_denoise<S: PosteriorSampler + ?Sized>(
    denoiser: &S,
    obs: Option<&NoisyObservation>,
    config: &SamplerConfig,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let levels = config.levels();
    if let Some(o) = obs {
        if o.dim() != denoiser.dim() {
            return Err(Error::dim("multistep_denoise", denoiser.dim(), o.dim()));
        }
    }
    let x_init: Vec<f64> = normal_vec(rng, denoiser.dim())
        .into_iter()
        .map(|e| levels[0] * e)
        .collect();
    let cond = obs.map(|o| (o.y.as_slice(), o.sigma.get()));
    run_chain(denoiser, cond, &levels, config.zeta, x_init, rng, |_, _| {})
}

/// `n` independent draws; draw `j` uses the stream `(seed, [SAMPLE, j])`.
pub fn sample_batch<S: PosteriorSampler + ?Sized>(
    denoiser: &S,
    obs: Option<&NoisyObservation>,
    config: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<SampleBatch> {
    let rows = crate::par::map(n, |j| {
        let mut rng = stream(seed, &[tag::SAMPLE, j as u64]);
        multistep_denoise(denoiser, obs, config, &mut rng)
    });
    let mut batch = SampleBatch::new(denoiser.dim(), seed, denoiser.provenance(config.steps()));
    batch.steps = Some(config.steps());
    batch.sigma = obs.map(|o| o.sigma.get());
    for r in rows {
        batch.push(&r?)?;
    }
    Ok(batch)
}

/// Unconditional generation from pure noise.
pub fn unconditional_sample<S: PosteriorSampler + ?Sized>(
    denoiser: &S,
    config: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<SampleBatch> {
    sample_batch(denoiser, None, config, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseLevel;

    fn two_mode() -> GaussianMixture {
        GaussianMixture::isotropic(
            alloc::vec![0.3, 0.7],
            alloc::vec![alloc::vec![-1.0], alloc::vec![1.5]],
            &[0.2, 0.1],
        )
        .unwrap()
    }

    #[test]
    fn transition_special_cases() {
        let mut rng = stream(1, &[]);
        let det = ddim_transition(&[2.0], &[1.0], 2.0, 1.0, 0.0, &mut rng).unwrap();
        assert_eq!(det, alloc::vec![1.5]);
        assert!(ddim_transition(&[2.0], &[1.0], 1.0, 1.0, 0.5, &mut rng).is_err());
        let n = 20_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let v = ddim_transition(&[5.0], &[1.0], 2.0, 0.5, 1.0, &mut rng).unwrap()[0];
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!((mean - 1.0).abs() < 3.0 * 0.5 / (n as f64).sqrt());
        assert!((var - 0.25).abs() < 0.02);
    }

    #[test]
    fn single_level_is_one_posterior_draw() {
        let g = two_mode();
        let oracle = OracleDenoiser(&g);
        let y = [0.4];
        let mut a = stream(3, &[]);
        let mut b = a.clone();
        let out = run_chain(
            &oracle,
            Some((&y, 0.5)),
            &[1.0],
            1.0,
            alloc::vec![0.2],
            &mut a,
            |_, _| {},
        )
        .unwrap();
        let (y_eff, s_eff) = fuse(&y, 0.5, &[0.2], 1.0);
        assert_eq!(out, g.sample_posterior_raw(&y_eff, s_eff, &mut b));
    }

    #[test]
    fn fused_condition_matches_effective_condition() {
        let obs = NoisyObservation::new(alloc::vec![0.3, -1.1], NoiseLevel::new(0.7).unwrap());
        let x = [1.2, 0.4];
        let eff = crate::gmm::effective_condition(&obs, &x, NoiseLevel::new(1.9).unwrap()).unwrap();
        let (y, s) = fuse(&obs.y, 0.7, &x, 1.9);
        assert_eq!(eff.y, y);
        assert_eq!(eff.sigma.get(), s);
    }

    #[test]
    fn batches_are_deterministic() {
        let g = two_mode();
        let cfg = SamplerConfig::few_step(4).unwrap();
        let a = unconditional_sample(&OracleDenoiser(&g), &cfg, 50, 9).unwrap();
        let b = unconditional_sample(&OracleDenoiser(&g), &cfg, 50, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            unconditional_sample(&OracleDenoiser(&g), &cfg, 0, 9)
                .unwrap()
                .len(),
            0
        );
    }
}
