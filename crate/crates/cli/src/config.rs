//! Flat TOML run configuration.
//!
//! Training keys are the fields of [`TrainConfig`] and appear unprefixed;
//! everything else carries a `sample_`, `pnp_`, `verify_` or mixture prefix.
//! Every key is optional. Unknown keys are rejected, all at once.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use ncvsd_core::pnp::{custom_energy, Energy, LinearEnergy, PnpConfig, PriorMode, ZeroEnergy};
use ncvsd_core::schedule::AnnealingSchedule;
use ncvsd_core::train::TrainConfig;
use ncvsd_core::GaussianMixture;
use serde::{Deserialize, Serialize};

use crate::io::read_mixture;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// JSON mixture file; the built-in ring is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixture_file: Option<String>,
    pub ring_modes: usize,
    pub ring_radius: f64,
    pub ring_std: f64,

    /// Sampling steps (1, 2 or 4).
    pub sample_steps: usize,
    pub sample_zeta: f64,
    pub sample_count: usize,
    /// Conditioning observation; empty means unconditional generation.
    pub sample_y: Vec<f64>,
    pub sample_sigma: f64,
    pub sample_projections: usize,

    /// One of `none`, `linear-gaussian`, `quadratic`, `cubic`.
    pub pnp_energy: String,
    /// Operator rows.
    pub pnp_operator: Vec<Vec<f64>>,
    pub pnp_y: Vec<f64>,
    pub pnp_sigma_y: f64,
    /// Defaults to `2 sigma_y^2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pnp_beta: Option<f64>,
    pub pnp_kappa: f64,
    pub pnp_levels: usize,
    pub pnp_sigma_min: f64,
    pub pnp_sigma_max: f64,
    pub pnp_rho: f64,
    pub pnp_ula_steps: usize,
    pub pnp_c1: f64,
    pub pnp_c2: f64,
    pub pnp_sigma_ema: f64,
    pub pnp_mu: f64,
    /// 1 for the one-step prior; 2 or 4 for multi-step prior draws.
    pub pnp_prior_steps: usize,
    pub pnp_chains: usize,

    pub verify_prop1_trials: usize,
    pub verify_prop2_trajectories: usize,
    pub verify_prop2_zetas: Vec<f64>,
    pub verify_gradient_samples: usize,
    pub verify_gradient_pairs: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let pnp = AnnealingSchedule::pnp();
        Settings {
            mixture_file: None,
            ring_modes: 8,
            ring_radius: 1.0,
            ring_std: 0.1,
            sample_steps: 1,
            sample_zeta: 1.0,
            sample_count: 4096,
            sample_y: Vec::new(),
            sample_sigma: 0.5,
            sample_projections: 128,
            pnp_energy: "linear-gaussian".into(),
            pnp_operator: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            pnp_y: vec![0.6, 0.5],
            pnp_sigma_y: 0.1,
            pnp_beta: None,
            pnp_kappa: 0.1,
            pnp_levels: pnp.len(),
            pnp_sigma_min: pnp.sigma_min,
            pnp_sigma_max: pnp.sigma_max,
            pnp_rho: pnp.rho,
            pnp_ula_steps: 100,
            pnp_c1: 0.1,
            pnp_c2: 0.1,
            pnp_sigma_ema: 0.0,
            pnp_mu: 0.0,
            pnp_prior_steps: 1,
            pnp_chains: 1000,
            verify_prop1_trials: 1000,
            verify_prop2_trajectories: 100_000,
            verify_prop2_zetas: vec![0.25, 0.5, 1.0],
            verify_gradient_samples: 100_000,
            verify_gradient_pairs: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub settings: Settings,
}

fn keys_of<T: Serialize>(value: &T) -> BTreeSet<String> {
    match toml::Table::try_from(value) {
        Ok(t) => t.keys().cloned().collect(),
        Err(_) => BTreeSet::new(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().context("config is not valid TOML")?;
        let train_keys = keys_of(&TrainConfig::default());
        let mut setting_keys = keys_of(&Settings::default());
        setting_keys.extend(["mixture_file".to_string(), "pnp_beta".to_string()]);
        let unknown: Vec<&str> = table
            .keys()
            .filter(|k| !train_keys.contains(*k) && !setting_keys.contains(*k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.join(", "));
        }
        let (train, settings): (toml::Table, toml::Table) =
            table.into_iter().partition(|(k, _)| train_keys.contains(k));
        let config = RunConfig {
            train: train.try_into().context("invalid training keys")?,
            settings: settings.try_into().context("invalid settings")?,
        };
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// One flat table, training keys first.
    pub fn to_toml(&self) -> Result<String> {
        let mut table = toml::Table::try_from(&self.train)?;
        table.extend(toml::Table::try_from(&self.settings)?);
        Ok(toml::to_string(&table)?)
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn mixture(&self, base: Option<&Path>) -> Result<GaussianMixture> {
        match &self.settings.mixture_file {
            Some(file) => {
                let path = match base {
                    Some(dir) if Path::new(file).is_relative() => dir.join(file),
                    _ => file.into(),
                };
                read_mixture(&path)
            }
            None => Ok(GaussianMixture::ring(
                self.settings.ring_modes,
                self.settings.ring_radius,
                self.settings.ring_std,
            )?),
        }
    }

    pub fn operator(&self) -> Result<DMatrix<f64>> {
        let rows = &self.settings.pnp_operator;
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            bail!("pnp_operator must be a non-empty rectangular matrix");
        }
        Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    }

    pub fn beta(&self) -> f64 {
        let s = &self.settings;
        s.pnp_beta.unwrap_or(2.0 * s.pnp_sigma_y * s.pnp_sigma_y)
    }

    pub fn energy(&self, dim: usize) -> Result<Box<dyn Energy>> {
        let s = &self.settings;
        let energy: Box<dyn Energy> = match s.pnp_energy.as_str() {
            "none" => Box::new(ZeroEnergy { dim }),
            "linear-gaussian" => {
                Box::new(LinearEnergy::new(self.operator()?, s.pnp_y.clone(), true)?)
            }
            name => custom_energy(name, self.operator()?, s.pnp_y.clone(), s.pnp_kappa)?,
        };
        if energy.dim() != dim {
            bail!(
                "energy acts on dimension {}, prior has dimension {dim}",
                energy.dim()
            );
        }
        Ok(energy)
    }

    pub fn pnp(&self) -> Result<PnpConfig> {
        let s = &self.settings;
        let mut cfg = PnpConfig::new(self.beta());
        cfg.schedule =
            AnnealingSchedule::edm(s.pnp_levels, s.pnp_sigma_min, s.pnp_sigma_max, s.pnp_rho)?;
        cfg.ula_steps = s.pnp_ula_steps;
        cfg.c1 = s.pnp_c1;
        cfg.c2 = s.pnp_c2;
        cfg.sigma_ema = s.pnp_sigma_ema;
        cfg.mu = s.pnp_mu;
        cfg.prior = match s.pnp_prior_steps {
            1 => PriorMode::OneStep,
            m => PriorMode::MultiStep(m),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let s = &self.settings;
        if !(s.sample_zeta > 0.0 && s.sample_zeta <= 1.0) {
            bail!("sample_zeta must lie in (0, 1]");
        }
        if !(s.sample_sigma > 0.0 && s.pnp_sigma_y > 0.0) {
            bail!("sample_sigma and pnp_sigma_y must be positive");
        }
        if s.sample_projections == 0 {
            bail!("sample_projections must be at least 1");
        }
        let a = self.operator()?;
        if s.pnp_y.len() != a.nrows() {
            bail!(
                "pnp_y has {} entries, pnp_operator has {} rows",
                s.pnp_y.len(),
                a.nrows()
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn edited_values_round_trip() {
        let text = "seed = 9\nwidth = 32\nteacher_mode = \"learned\"\npnp_beta = 0.5\nmixture_file = \"m.json\"\nsample_y = [0.1, 0.2]\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.settings.pnp_beta, Some(0.5));
        assert_eq!(RunConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = RunConfig::parse("widht = 3\nseed = 1\npnp_bta = 2.0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("widht") && err.contains("pnp_bta"), "{err}");
    }

    #[test]
    fn wrong_types_are_rejected() {
        assert!(RunConfig::parse("width = \"wide\"\n").is_err());
        assert!(RunConfig::parse("pnp_levels = -1\n").is_err());
    }

    #[test]
    fn beta_defaults_to_twice_the_noise_variance() {
        let c = RunConfig::default();
        assert!((c.beta() - 0.02).abs() < 1e-15);
    }
}
