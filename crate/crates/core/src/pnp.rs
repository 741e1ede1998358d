//! Plug-and-play posterior sampling with a generative denoiser.
//!
//! Targets `pi(x0) ∝ q_data(x0) exp(-E(x0) / beta)` with a split Gibbs
//! sampler on `(x0, u)` coupled by `N(u; x0, sigma^2 I)`. For decreasing
//! `sigma_i` the chain alternates a prior step, `x0 ~ q(x0 | y_sigma = u)`
//! drawn by the denoiser, and a likelihood step, `u ~ exp(-E(u)/beta -
//! ||u - x0||^2 / (2 sigma^2))`, taken in closed form for linear-Gaussian
//! energies and by Langevin iterations otherwise.

use alloc::boxed::Box;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::batch::{Provenance, SampleBatch};
use crate::error::{Error, Result};
use crate::linalg::{guarded_cholesky, to_vec};
use crate::noise::NoiseLevel;
use crate::noise::NoisyObservation;
use crate::rng::{normal_vec, standard_normal, stream, tag, StreamRng};
use crate::sampler::{multistep_denoise, PosteriorSampler, SamplerConfig};
use crate::schedule::AnnealingSchedule;

/// A smooth energy `E(x)`.
pub trait Energy: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;

    /// `(A, y)` when `E(x) = ||y - A x||^2` and the likelihood step may be
    /// sampled exactly.
    fn linear_gaussian(&self) -> Option<(&DMatrix<f64>, &[f64])> {
        None
    }
}

/// `E = 0`: the chain samples the prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroEnergy {
    pub dim: usize,
}

impl Energy for ZeroEnergy {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        alloc::vec![0.0; x.len()]
    }
}

/// `E(x) = ||y - A x||^2`. With `exact` set the likelihood step is an exact
/// Gaussian draw; otherwise it runs Langevin iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEnergy {
    pub a: DMatrix<f64>,
    pub y: Vec<f64>,
    pub exact: bool,
}

impl LinearEnergy {
    pub fn new(a: DMatrix<f64>, y: Vec<f64>, exact: bool) -> Result<Self> {
        if a.nrows() != y.len() {
            return Err(Error::dim("LinearEnergy (observation)", a.nrows(), y.len()));
        }
        if a.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::param("operator", "entries must be finite"));
        }
        Ok(LinearEnergy { a, y, exact })
    }

    fn residual(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(&self.y) - &self.a * DVector::from_column_slice(x)
    }
}

impl Energy for LinearEnergy {
    fn dim(&self) -> usize {
        self.a.ncols()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        self.residual(x).norm_squared()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        to_vec(&(self.a.transpose() * self.residual(x) * -2.0))
    }

    fn linear_gaussian(&self) -> Option<(&DMatrix<f64>, &[f64])> {
        self.exact.then_some((&self.a, self.y.as_slice()))
    }
}

/// `E(x) = ||y - B phi(x)||^2` with the coordinate-wise cubic
/// `phi_j(x) = x_j + kappa x_j^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicEnergy {
    pub b: DMatrix<f64>,
    pub y: Vec<f64>,
    pub kappa: f64,
}

impl CubicEnergy {
    fn phi(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(x.len(), x.iter().map(|v| v + self.kappa * v * v * v))
    }
}

impl Energy for CubicEnergy {
    fn dim(&self) -> usize {
        self.b.ncols()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        (DVector::from_column_slice(&self.y) - &self.b * self.phi(x)).norm_squared()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let r = DVector::from_column_slice(&self.y) - &self.b * self.phi(x);
        let g = self.b.transpose() * r * -2.0;
        g.iter()
            .zip(x)
            .map(|(gi, v)| gi * (1.0 + 3.0 * self.kappa * v * v))
            .collect()
    }
}

/// Builds a registered custom energy by name.
pub fn custom_energy(
    name: &str,
    operator: DMatrix<f64>,
    y: Vec<f64>,
    kappa: f64,
) -> Result<Box<dyn Energy>> {
    if operator.nrows() != y.len() {
        return Err(Error::dim(
            "custom energy (observation)",
            operator.nrows(),
            y.len(),
        ));
    }
    match name {
        "cubic" => Ok(Box::new(CubicEnergy {
            b: operator,
            y,
            kappa,
        })),
        "quadratic" => Ok(Box::new(LinearEnergy::new(operator, y, false)?)),
        _ => Err(Error::param(
            "energy",
            alloc::format!("no registered energy named `{name}`"),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    OneStep,
    /// Multi-step denoising with a preset schedule of this many steps.
    MultiStep(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpConfig {
    pub beta: f64,
    pub schedule: AnnealingSchedule,
    pub ula_steps: usize,
    pub c1: f64,
    pub c2: f64,
    pub sigma_ema: f64,
    pub mu: f64,
    pub prior: PriorMode,
}

impl PnpConfig {
    /// 50 levels, rho 2, 100 Langevin steps with `C1 = C2 = 0.1`, no EMA.
    pub fn new(beta: f64) -> Self {
        PnpConfig {
            beta,
            schedule: AnnealingSchedule::pnp(),
            ula_steps: 100,
            c1: 0.1,
            c2: 0.1,
            sigma_ema: 0.0,
            mu: 0.0,
            prior: PriorMode::OneStep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::param("beta", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::param("mu", "must lie in [0, 1]"));
        }
        if self.ula_steps == 0 {
            return Err(Error::param("ula_steps", "must be at least 1"));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::param("c1", "Langevin constants must be positive"));
        }
        if self.sigma_ema.is_nan() || self.sigma_ema < 0.0 {
            return Err(Error::param("sigma_ema", "must be non-negative"));
        }
        if let PriorMode::MultiStep(m) = self.prior {
            SamplerConfig::preset_indices(m)?;
        }
        Ok(())
    }
}

/// `gamma_sigma = C1 / (C2 / beta + sigma^-2)`.
pub fn ula_step_size(beta: f64, c1: f64, c2: f64, sigma: f64) -> f64 {
    c1 / (c2 / beta + 1.0 / (sigma * sigma))
}

/// `K` Langevin iterations on `V(u) = E(u) / beta + ||u - x0||^2 / (2 sigma^2)`.
pub fn ula_likelihood_step<E: Energy + ?Sized>(
    energy: &E,
    x0_anchor: &[f64],
    sigma: f64,
    config: &PnpConfig,
    u_init: &[f64],
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let step = ula_step_size(config.beta, config.c1, config.c2, sigma);
    ula_chain(
        energy,
        x0_anchor,
        sigma,
        config.beta,
        step,
        config.ula_steps,
        u_init,
        rng,
    )
}

/// Langevin iterations with an explicit step size.
#[allow(clippy::too_many_arguments)]
pub fn ula_chain<E: Energy + ?Sized>(
    energy: &E,
    x0_anchor: &[f64],
    sigma: f64,
    beta: f64,
    step: f64,
    iterations: usize,
    u_init: &[f64],
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if u_init.len() != x0_anchor.len() || u_init.len() != energy.dim() {
        return Err(Error::dim(
            "ula_likelihood_step",
            energy.dim(),
            u_init.len(),
        ));
    }
    let inv_s2 = 1.0 / (sigma * sigma);
    let noise = libm::sqrt(2.0 * step);
    let mut u = u_init.to_vec();
    for k in 0..iterations {
        let g = energy.gradient(&u);
        for ((ui, gi), xi) in u.iter_mut().zip(&g).zip(x0_anchor) {
            let grad_v = gi / beta + (*ui - xi) * inv_s2;
            *ui += -step * grad_v + noise * standard_normal(rng);
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIterate { step: k });
        }
    }
    Ok(u)
}

/// Exact draw of `u` from `N(x0, sigma^2 I) N(y; A u, sigma_y^2 I)`.
pub fn gaussian_likelihood_step(
    a: &DMatrix<f64>,
    y: &[f64],
    sigma_y: NoiseLevel,
    x0_anchor: &[f64],
    sigma: NoiseLevel,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let d = a.ncols();
    if x0_anchor.len() != d {
        return Err(Error::dim("gaussian_likelihood_step", d, x0_anchor.len()));
    }
    if y.len() != a.nrows() {
        return Err(Error::dim(
            "gaussian_likelihood_step (observation)",
            a.nrows(),
            y.len(),
        ));
    }
    let py = sigma_y.precision();
    let px = sigma.precision();
    let precision = DMatrix::identity(d, d) * px + a.transpose() * a * py;
    let chol = guarded_cholesky(precision, "gaussian_likelihood_step")?;
    let rhs = DVector::from_column_slice(x0_anchor) * px
        + a.transpose() * DVector::from_column_slice(y) * py;
    let mean = chol.solve(&rhs);
    // P = L L^T, so L^-T eps has covariance P^-1
    let eps = DVector::from_vec(normal_vec(rng, d));
    let dev = chol
        .l()
        .transpose()
        .solve_upper_triangular(&eps)
        .ok_or_else(|| Error::param("precision", "singular Cholesky factor"))?;
    Ok(to_vec(&(mean + dev)))
}

/// `mu * acc + (1 - mu) * new`, or `new` when nothing has accumulated yet.
pub fn ema_merge(accumulated: Option<&[f64]>, new_sample: &[f64], mu: f64) -> Vec<f64> {
    match accumulated {
        None => new_sample.to_vec(),
        Some(acc) => acc
            .iter()
            .zip(new_sample)
            .map(|(a, n)| mu * a + (1.0 - mu) * n)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub sigma: f64,
    pub x0: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpOutput {
    pub x0: Vec<f64>,
    pub trajectory: Vec<TrajectoryRow>,
}

fn at_position(position: usize, sigma: f64) -> impl Fn(Error) -> Error {
    move |e| Error::Chain {
        position,
        sigma,
        source: Box::new(e),
    }
}

/// One chain. Level `k` of the schedule (largest first) runs a prior step at
/// `sigma_k` followed, except at the last level, by a likelihood step at
/// `sigma_{k+1}` anchored at the fresh prior draw. The returned `x0` is the
/// EMA of prior draws taken below `sigma_ema`, initialized by the first of
/// them; with `sigma_ema = 0` it is the last prior draw.
pub fn run_pnp_gd<S: PosteriorSampler + ?Sized, E: Energy + ?Sized>(
    denoiser: &S,
    energy: &E,
    config: &PnpConfig,
    rng: &mut StreamRng,
) -> Result<PnpOutput> {
    config.validate()?;
    let dim = energy.dim();
    if denoiser.dim() != dim {
        return Err(Error::dim("run_pnp_gd", denoiser.dim(), dim));
    }
    let levels = config.schedule.levels();
    let n = levels.len();
    let multistep = match config.prior {
        PriorMode::OneStep => None,
        PriorMode::MultiStep(m) => Some(SamplerConfig::few_step(m)?),
    };
    let exact = energy.linear_gaussian();
    let sigma_y = if exact.is_some() {
        Some(NoiseLevel::new(libm::sqrt(config.beta / 2.0))?)
    } else {
        None
    };
    let mut u: Vec<f64> = normal_vec(rng, dim)
        .into_iter()
        .map(|e| levels[0] * e)
        .collect();
    let mut acc: Option<Vec<f64>> = None;
    let mut merging = false;
    let mut trajectory = Vec::with_capacity(n);
    for (k, &sigma_i) in levels.iter().enumerate() {
        let wrap = at_position(n - k, sigma_i);
        let x0_i = match &multistep {
            None => denoiser.sample_x0(&u, sigma_i, rng).map_err(&wrap)?,
            Some(cfg) => {
                let obs = NoisyObservation::new(u.clone(), NoiseLevel::new(sigma_i)?);
                multistep_denoise(denoiser, Some(&obs), cfg, rng).map_err(&wrap)?
            }
        };
        let qualifies = sigma_i < config.sigma_ema;
        acc = Some(if qualifies && merging {
            ema_merge(acc.as_deref(), &x0_i, config.mu)
        } else {
            x0_i.clone()
        });
        merging |= qualifies;
        trajectory.push(TrajectoryRow {
            step: n - k,
            sigma: sigma_i,
            x0: x0_i.clone(),
            u: u.clone(),
        });
        if let Some(&next) = levels.get(k + 1) {
            let wrap = at_position(n - k - 1, next);
            u = match (exact, sigma_y) {
                (Some((a, y)), Some(sy)) => {
                    gaussian_likelihood_step(a, y, sy, &x0_i, NoiseLevel::new(next)?, rng)
                        .map_err(&wrap)?
                }
                _ => ula_likelihood_step(energy, &x0_i, next, config, &u, rng).map_err(&wrap)?,
            };
        }
    }
    Ok(PnpOutput {
        x0: acc.expect("schedule has at least one level"),
        trajectory,
    })
}

/// `n` independent chains; chain `j` uses the stream `(seed, [CHAIN, j])`.
pub fn run_pnp_batch<S: PosteriorSampler + ?Sized, E: Energy + ?Sized>(
    denoiser: &S,
    energy: &E,
    config: &PnpConfig,
    n: usize,
    seed: u64,
) -> Result<SampleBatch> {
    let rows = crate::par::map(n, |j| {
        let mut rng = stream(seed, &[tag::CHAIN, j as u64]);
        run_pnp_gd(denoiser, energy, config, &mut rng).map(|o| o.x0)
    });
    let mut batch = SampleBatch::new(energy.dim(), seed, Provenance::PnpGd);
    batch.steps = Some(config.schedule.len());
    for r in rows {
        batch.push(&r?)?;
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_size_values_and_limits() {
        let g = ula_step_size(1e-3, 0.1, 0.1, 0.5);
        assert!((g - 0.1 / 104.0).abs() < 1e-15);
        assert!((ula_step_size(2.0, 0.1, 0.1, 1e8) - 0.1 * 2.0 / 0.1).abs() < 1e-9);
        assert!(ula_step_size(2.0, 0.1, 0.1, 1e-8) < 1e-16);
    }

    #[test]
    fn ema_merge_recurrence() {
        let mut acc: Option<Vec<f64>> = None;
        for s in [1.0, 2.0, 3.0] {
            acc = Some(ema_merge(acc.as_deref(), &[s], 0.6));
        }
        assert!((acc.unwrap()[0] - (0.6 * (0.6 * 1.0 + 0.4 * 2.0) + 0.4 * 3.0)).abs() < 1e-15);
        assert_eq!(ema_merge(Some(&[5.0]), &[1.0], 0.0), alloc::vec![1.0]);
        assert_eq!(ema_merge(Some(&[5.0]), &[1.0], 1.0), alloc::vec![5.0]);
    }

    #[test]
    fn gaussian_step_special_cases() {
        let mut rng = stream(4, &[]);
        let sy = NoiseLevel::new(0.5).unwrap();
        let s = NoiseLevel::new(0.5).unwrap();
        // A = I, sigma = sigma_y: mean is the midpoint, variance sigma^2 / 2
        let a = DMatrix::identity(1, 1);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let u = gaussian_likelihood_step(&a, &[1.0], sy, &[0.0], s, &mut rng).unwrap()[0];
            sum += u;
            sq += u * u;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((mean - 0.5).abs() < 3.0 * (0.125f64 / n as f64).sqrt());
        assert!((var - 0.125).abs() < 0.006);
        // A = 0 gives the anchor distribution
        let zero = DMatrix::zeros(1, 2);
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let u = gaussian_likelihood_step(&zero, &[3.0], sy, &[1.0, -1.0], s, &mut rng).unwrap();
            sum[0] += u[0];
            sum[1] += u[1];
        }
        assert!((sum[0] / n as f64 - 1.0).abs() < 0.015);
        assert!((sum[1] / n as f64 + 1.0).abs() < 0.015);
    }

    #[test]
    fn energy_gradients_match_finite_differences() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.8]);
        let lin = LinearEnergy::new(a.clone(), alloc::vec![0.4, -0.1], true).unwrap();
        let cubic = CubicEnergy {
            b: a,
            y: alloc::vec![0.4, -0.1],
            kappa: 0.3,
        };
        let energies: [&dyn Energy; 2] = [&lin, &cubic];
        let mut rng = stream(5, &[]);
        for e in energies {
            for _ in 0..10 {
                let x = normal_vec(&mut rng, 2);
                let g = e.gradient(&x);
                for j in 0..2 {
                    let h = 1e-6;
                    let mut p = x.clone();
                    let mut m = x.clone();
                    p[j] += h;
                    m[j] -= h;
                    let fd = (e.evaluate(&p) - e.evaluate(&m)) / (2.0 * h);
                    assert!((fd - g[j]).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn unknown_custom_energy_is_rejected() {
        assert!(custom_energy("sine", DMatrix::identity(1, 1), alloc::vec![0.0], 0.0).is_err());
        assert!(custom_energy("cubic", DMatrix::identity(2, 2), alloc::vec![0.0], 0.0).is_err());
    }
}
