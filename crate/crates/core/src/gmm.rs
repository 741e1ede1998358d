//! Closed-form Gaussian-mixture machinery.
//!
//! A [`GaussianMixture`] stands in for the data distribution `q_data(x0)`.
//! Because Gaussian noise convolves and conditions a mixture into another
//! mixture, everything the distillation and sampling code needs has an exact
//! answer here: noised marginals, their scores, denoising posteriors
//! `q(x0 | y_sigma)`, conditional scores `grad log q(x_t | y_sigma)`, and
//! posteriors under linear-Gaussian likelihoods.
//!
//! Each component caches the symmetric eigendecomposition of its covariance.
//! Every query used by the samplers shifts a covariance by a multiple of the
//! identity, which leaves the eigenbasis unchanged, so one decomposition per
//! component serves all noise levels at `O(D^2)` per query.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::batch::{Provenance, SampleBatch};
use crate::error::{Error, Result};
use crate::linalg::{self, guarded_cholesky, log_sum_exp, normal_cdf, CONDITION_LIMIT};
use crate::noise::{NoiseLevel, NoisyObservation};
use crate::rng::normal_vec;

const WEIGHT_TOLERANCE: f64 = 1e-12;
const MIN_EIGENVALUE: f64 = 1e-12;
const SYMMETRY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
struct Spectrum {
    /// Columns are orthonormal eigenvectors.
    basis: DMatrix<f64>,
    values: Vec<f64>,
}

impl Spectrum {
    /// Coordinates of `v` in the eigenbasis.
    fn project(&self, v: &[f64]) -> Vec<f64> {
        let d = v.len();
        (0..d)
            .map(|j| (0..d).map(|i| self.basis[(i, j)] * v[i]).sum())
            .collect()
    }

    fn lift(&self, coeffs: &[f64]) -> Vec<f64> {
        let d = coeffs.len();
        (0..d)
            .map(|i| (0..d).map(|j| self.basis[(i, j)] * coeffs[j]).sum())
            .collect()
    }

    fn rebuild(&self, values: &[f64]) -> DMatrix<f64> {
        let d = values.len();
        let scaled = DMatrix::from_fn(d, d, |i, j| self.basis[(i, j)] * values[j]);
        let m = &scaled * self.basis.transpose();
        (&m + m.transpose()) * 0.5
    }
}

/// A finite mixture of full-covariance Gaussians in `D` dimensions.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<DMatrix<f64>>,
    spectra: Vec<Spectrum>,
}

impl PartialEq for GaussianMixture {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.means == other.means
            && self.covariances == other.covariances
    }
}

impl GaussianMixture {
    /// Validates and builds a mixture. `covariances` are `D x D` matrices.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidMixture(
                "at least one component is required".into(),
            ));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::InvalidMixture(format!(
                "{} weights but {} means and {} covariances",
                k,
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidMixture(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::InvalidMixture(format!(
                "weights sum to {total}, not 1"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidMixture("dimension must be at least 1".into()));
        }
        let mut spectra = Vec::with_capacity(k);
        for (idx, (mean, cov)) in means.iter().zip(&covariances).enumerate() {
            if mean.len() != dim {
                return Err(Error::dim("GaussianMixture::new (mean)", dim, mean.len()));
            }
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMixture(format!("mean {idx} is not finite")));
            }
            if cov.nrows() != dim || cov.ncols() != dim {
                return Err(Error::dim(
                    "GaussianMixture::new (covariance)",
                    dim,
                    cov.nrows(),
                ));
            }
            let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            for i in 0..dim {
                for j in 0..i {
                    if (cov[(i, j)] - cov[(j, i)]).abs() > SYMMETRY_TOLERANCE * scale {
                        return Err(Error::InvalidMixture(format!(
                            "covariance {idx} is not symmetric"
                        )));
                    }
                }
            }
            spectra.push(spectrum_of(cov, idx)?);
        }
        Ok(GaussianMixture {
            dim,
            weights,
            means,
            covariances,
            spectra,
        })
    }

    /// Mixture with covariances `variances[k] * I`.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: &[f64]) -> Result<Self> {
        let dim = means.first().map_or(0, |m| m.len());
        let covs = variances
            .iter()
            .map(|&v| DMatrix::from_diagonal_element(dim, dim, v))
            .collect();
        Self::new(weights, means, covs)
    }

    pub fn gaussian(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![covariance])
    }

    /// `modes` equal-weight isotropic components evenly spaced on a circle.
    pub fn ring(modes: usize, radius: f64, std: f64) -> Result<Self> {
        if modes == 0 {
            return Err(Error::param("modes", "ring needs at least one mode"));
        }
        let means = (0..modes)
            .map(|m| {
                let angle = 2.0 * PI * m as f64 / modes as f64;
                vec![radius * libm::cos(angle), radius * libm::sin(angle)]
            })
            .collect();
        let weights = vec![1.0 / modes as f64; modes];
        Self::isotropic(weights, means, &vec![std * std; modes])
    }

    // Internal constructor for mixtures derived from a validated one.
    fn derived(
        dim: usize,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        spectra: Vec<Spectrum>,
    ) -> Self {
        let covariances = spectra.iter().map(|s| s.rebuild(&s.values)).collect();
        GaussianMixture {
            dim,
            weights,
            means,
            covariances,
            spectra,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    /// Overall mean of the mixture.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            linalg::axpy(*w, mu, &mut m);
        }
        m
    }

    fn check_dim(&self, context: &'static str, len: usize) -> Result<()> {
        if len == self.dim {
            Ok(())
        } else {
            Err(Error::dim(context, self.dim, len))
        }
    }

    /// `q_data * N(0, t^2 I)`: every covariance gains `t^2 I`.
    pub fn marginal_at_noise(&self, t: NoiseLevel) -> GaussianMixture {
        let extra = t.variance();
        let spectra = self
            .spectra
            .iter()
            .map(|s| Spectrum {
                basis: s.basis.clone(),
                values: s.values.iter().map(|v| v + extra).collect(),
            })
            .collect::<Vec<_>>();
        let covariances = self
            .covariances
            .iter()
            .map(|c| c + DMatrix::from_diagonal_element(self.dim, self.dim, extra))
            .collect();
        GaussianMixture {
            dim: self.dim,
            weights: self.weights.clone(),
            means: self.means.clone(),
            covariances,
            spectra,
        }
    }

    /// Per-component `ln w_k + ln N(x; mu_k, Sigma_k + extra * I)` and the
    /// eigen-coordinates of `x - mu_k`.
    fn component_terms(&self, x: &[f64], extra: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut logs = Vec::with_capacity(self.n_components());
        let mut coords = Vec::with_capacity(self.n_components());
        let half_log_2pi = 0.5 * libm::log(2.0 * PI);
        for ((w, mu), spec) in self.weights.iter().zip(&self.means).zip(&self.spectra) {
            let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
            let r = spec.project(&diff);
            let mut quad = 0.0;
            let mut log_det = 0.0;
            for (rj, lam) in r.iter().zip(&spec.values) {
                let v = lam + extra;
                quad += rj * rj / v;
                log_det += libm::log(v);
            }
            let lw = if *w > 0.0 {
                libm::log(*w)
            } else {
                f64::NEG_INFINITY
            };
            logs.push(lw - 0.5 * quad - 0.5 * log_det - self.dim as f64 * half_log_2pi);
            coords.push(r);
        }
        (logs, coords)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim("log_density", x.len())?;
        Ok(log_sum_exp(&self.component_terms(x, 0.0).0))
    }

    fn score_with_extra(&self, x: &[f64], extra: f64) -> Vec<f64> {
        let (mut logs, coords) = self.component_terms(x, extra);
        linalg::softmax_in_place(&mut logs);
        let mut out = vec![0.0; self.dim];
        for ((resp, r), spec) in logs.iter().zip(&coords).zip(&self.spectra) {
            if *resp == 0.0 {
                continue;
            }
            let scaled: Vec<f64> = r
                .iter()
                .zip(&spec.values)
                .map(|(rj, lam)| -rj / (lam + extra))
                .collect();
            linalg::axpy(*resp, &spec.lift(&scaled), &mut out);
        }
        out
    }

    /// `grad_x log (q_data * N(0, t^2 I))(x)`.
    pub fn score(&self, x: &[f64], t: NoiseLevel) -> Result<Vec<f64>> {
        self.check_dim("score", x.len())?;
        Ok(self.score_with_extra(x, t.variance()))
    }

    /// Score of the mixture itself (no added noise).
    pub fn data_score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim("data_score", x.len())?;
        Ok(self.score_with_extra(x, 0.0))
    }

    /// Posterior weights, component means and eigen-variances of `q(x0 | y_sigma)`.
    fn posterior_parts(&self, y: &[f64], sigma2: f64) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (mut logs, coords) = self.component_terms(y, sigma2);
        linalg::softmax_in_place(&mut logs);
        let mut means = Vec::with_capacity(self.n_components());
        let mut variances = Vec::with_capacity(self.n_components());
        for ((mu, r), spec) in self.means.iter().zip(&coords).zip(&self.spectra) {
            let shrunk: Vec<f64> = r
                .iter()
                .zip(&spec.values)
                .map(|(rj, lam)| rj * lam / (lam + sigma2))
                .collect();
            let mut m = spec.lift(&shrunk);
            for (mi, base) in m.iter_mut().zip(mu) {
                *mi += base;
            }
            means.push(m);
            variances.push(
                spec.values
                    .iter()
                    .map(|lam| lam * sigma2 / (lam + sigma2))
                    .collect(),
            );
        }
        (logs, means, variances)
    }

    /// Exact `q(x0 | y_sigma)` as a mixture.
    pub fn denoising_posterior(&self, obs: &NoisyObservation) -> Result<GaussianMixture> {
        self.check_dim("denoising_posterior", obs.dim())?;
        let (weights, means, variances) = self.posterior_parts(&obs.y, obs.sigma.variance());
        let spectra = self
            .spectra
            .iter()
            .zip(variances)
            .map(|(s, values)| Spectrum {
                basis: s.basis.clone(),
                values,
            })
            .collect();
        Ok(Self::derived(self.dim, weights, means, spectra))
    }

    /// `E[x0 | y_sigma]`.
    pub fn posterior_mean(&self, obs: &NoisyObservation) -> Result<Vec<f64>> {
        self.check_dim("posterior_mean", obs.dim())?;
        Ok(self.posterior_mean_raw(&obs.y, obs.sigma.get()))
    }

    pub(crate) fn posterior_mean_raw(&self, y: &[f64], sigma: f64) -> Vec<f64> {
        let (weights, means, _) = self.posterior_parts(y, sigma * sigma);
        let mut out = vec![0.0; self.dim];
        for (w, m) in weights.iter().zip(&means) {
            linalg::axpy(*w, m, &mut out);
        }
        out
    }

    /// One exact draw from `q(x0 | y_sigma)` without materializing the mixture.
    pub fn sample_denoising_posterior<R: Rng + ?Sized>(
        &self,
        obs: &NoisyObservation,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.check_dim("sample_denoising_posterior", obs.dim())?;
        Ok(self.sample_posterior_raw(&obs.y, obs.sigma.get(), rng))
    }

    pub(crate) fn sample_posterior_raw<R: Rng + ?Sized>(
        &self,
        y: &[f64],
        sigma: f64,
        rng: &mut R,
    ) -> Vec<f64> {
        let (weights, means, variances) = self.posterior_parts(y, sigma * sigma);
        let k = pick_component(&weights, rng.random::<f64>());
        let eps = normal_vec(rng, self.dim);
        let scaled: Vec<f64> = eps
            .iter()
            .zip(&variances[k])
            .map(|(e, v)| e * libm::sqrt(*v))
            .collect();
        let mut out = self.spectra[k].lift(&scaled);
        for (o, m) in out.iter_mut().zip(&means[k]) {
            *o += m;
        }
        out
    }

    /// `grad_{x_t} log q(x_t | y_sigma) = t^-2 (E[x0 | y_eff] - x_t)`.
    pub fn conditional_score(
        &self,
        x_t: &[f64],
        t: NoiseLevel,
        obs: &NoisyObservation,
    ) -> Result<Vec<f64>> {
        self.check_dim("conditional_score", x_t.len())?;
        let eff = effective_condition(obs, x_t, t)?;
        let mean = self.posterior_mean(&eff)?;
        let inv_t2 = t.precision();
        Ok(mean
            .iter()
            .zip(x_t)
            .map(|(m, x)| inv_t2 * (m - x))
            .collect())
    }

    /// `log q(x_t | y_sigma)` from the closed-form mixture
    /// `q(x0 | y_sigma) * N(0, t^2 I)`.
    pub fn conditional_log_density(
        &self,
        x_t: &[f64],
        t: NoiseLevel,
        obs: &NoisyObservation,
    ) -> Result<f64> {
        self.denoising_posterior(obs)?
            .marginal_at_noise(t)
            .log_density(x_t)
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = pick_component(&self.weights, rng.random::<f64>());
        let eps = normal_vec(rng, self.dim);
        let spec = &self.spectra[k];
        let scaled: Vec<f64> = eps
            .iter()
            .zip(&spec.values)
            .map(|(e, v)| e * libm::sqrt(*v))
            .collect();
        let mut out = spec.lift(&scaled);
        for (o, m) in out.iter_mut().zip(&self.means[k]) {
            *o += m;
        }
        out
    }

    /// Ancestral sampling: component index, then a Gaussian draw.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, seed: u64, rng: &mut R) -> SampleBatch {
        let mut batch = SampleBatch::new(self.dim, seed, Provenance::Oracle);
        for _ in 0..n {
            let row = self.sample_one(rng);
            batch.push(&row).expect("mixture samples are finite");
        }
        batch
    }

    /// CDF of coordinate `j` of the mixture.
    pub fn marginal_cdf(&self, j: usize, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.covariances)
            .map(|((w, mu), cov)| w * normal_cdf((x - mu[j]) / libm::sqrt(cov[(j, j)])))
            .sum()
    }

    /// Exact posterior under the likelihood `N(y; A x, sigma_y^2 I)`.
    pub fn linear_posterior(
        &self,
        a: &DMatrix<f64>,
        y: &[f64],
        sigma_y: NoiseLevel,
    ) -> Result<GaussianMixture> {
        if a.ncols() != self.dim {
            return Err(Error::dim(
                "linear_posterior (operator columns)",
                self.dim,
                a.ncols(),
            ));
        }
        if a.nrows() != y.len() {
            return Err(Error::dim(
                "linear_posterior (observation)",
                a.nrows(),
                y.len(),
            ));
        }
        let m = a.nrows();
        let noise_prec = sigma_y.precision();
        let y_vec = DVector::from_column_slice(y);
        let ata = a.transpose() * a * noise_prec;
        let aty = a.transpose() * &y_vec * noise_prec;
        let mut log_w = Vec::with_capacity(self.n_components());
        let mut means = Vec::with_capacity(self.n_components());
        let mut covs = Vec::with_capacity(self.n_components());
        let half_log_2pi = 0.5 * libm::log(2.0 * PI);
        for ((w, mu), (cov, spec)) in self
            .weights
            .iter()
            .zip(&self.means)
            .zip(self.covariances.iter().zip(&self.spectra))
        {
            let inv_vals: Vec<f64> = spec.values.iter().map(|v| 1.0 / v).collect();
            let prior_prec = spec.rebuild(&inv_vals);
            let precision = &prior_prec + &ata;
            let chol = guarded_cholesky(precision, "linear_posterior precision")?;
            let post_cov = chol.inverse();
            let post_cov = (&post_cov + post_cov.transpose()) * 0.5;
            let mu_v = DVector::from_column_slice(mu);
            let post_mean = &post_cov * (&prior_prec * &mu_v + &aty);
            // evidence N(y; A mu, A Sigma A^T + sigma_y^2 I)
            let predictive =
                a * cov * a.transpose() + DMatrix::from_diagonal_element(m, m, sigma_y.variance());
            let lw = if m == 0 {
                0.0
            } else {
                let pchol = guarded_cholesky(predictive, "linear_posterior evidence")?;
                let resid = &y_vec - a * &mu_v;
                let solved = pchol.solve(&resid);
                let quad = resid.dot(&solved);
                let log_det: f64 = (0..m)
                    .map(|i| 2.0 * libm::log(pchol.l_dirty()[(i, i)]))
                    .sum();
                -0.5 * quad - 0.5 * log_det - m as f64 * half_log_2pi
            };
            log_w.push(if *w > 0.0 {
                libm::log(*w) + lw
            } else {
                f64::NEG_INFINITY
            });
            means.push(post_mean.as_slice().to_vec());
            covs.push(post_cov);
        }
        linalg::softmax_in_place(&mut log_w);
        let total: f64 = log_w.iter().sum();
        log_w.iter_mut().for_each(|v| *v /= total);
        GaussianMixture::new(log_w, means, covs)
    }
}

fn spectrum_of(cov: &DMatrix<f64>, idx: usize) -> Result<Spectrum> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let values: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(0.0f64, f64::max);
    if !(lo > MIN_EIGENVALUE) {
        return Err(Error::InvalidMixture(format!(
            "covariance {idx} is not positive definite (min eigenvalue {lo:e})"
        )));
    }
    if hi / lo > CONDITION_LIMIT {
        return Err(Error::IllConditioned {
            context: "mixture covariance",
            condition: hi / lo,
        });
    }
    Ok(Spectrum {
        basis: eig.eigenvectors,
        values,
    })
}

fn pick_component(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding slack at the top; take the last live component
    weights
        .iter()
        .rposition(|w| *w > 0.0)
        .unwrap_or(weights.len() - 1)
}

/// Fuses `y_sigma` and `x_t` into the single observation at the effective
/// level `sigma_eff = (sigma^-2 + t^-2)^(-1/2)`:
/// `y_eff = (sigma^-2 y + t^-2 x_t) / (sigma^-2 + t^-2)`.
pub fn effective_condition(
    obs: &NoisyObservation,
    x_t: &[f64],
    t: NoiseLevel,
) -> Result<NoisyObservation> {
    if obs.dim() != x_t.len() {
        return Err(Error::dim("effective_condition", obs.dim(), x_t.len()));
    }
    let (y, sigma) = fuse(&obs.y, obs.sigma.get(), x_t, t.get());
    Ok(NoisyObservation::new(y, NoiseLevel::new(sigma)?))
}

/// Raw form of [`effective_condition`]; shared with the samplers so both
/// paths produce identical bits.
#[inline]
pub fn fuse(y: &[f64], sigma: f64, x: &[f64], level: f64) -> (Vec<f64>, f64) {
    let py = 1.0 / (sigma * sigma);
    let px = 1.0 / (level * level);
    let total = py + px;
    let var = 1.0 / total;
    let fused = y
        .iter()
        .zip(x)
        .map(|(a, b)| var * (py * a + px * b))
        .collect();
    (fused, libm::sqrt(var))
}
