//! Verification suites with their fixed problem instances.

use anyhow::Result;
use ncvsd_core::gmm::GaussianMixture;
use ncvsd_core::rng::{child_seed, stream};
use ncvsd_core::schedule::AnnealingSchedule;
use ncvsd_core::verify::{
    check_gradient_unbiasedness, check_prop1, check_prop2, DistanceReport, GradientCheckConfig,
    GradientReport, Prop2Report,
};
use ncvsd_core::{NoiseLevel, NoisyObservation};
use rand::Rng;
use serde::Serialize;

use crate::config::Settings;

pub const SUITES: [&str; 4] = ["prop1", "prop2", "gradient", "all"];

/// Significance level of the per-marginal KS tests.
pub const PROP2_ALPHA: f64 = 0.01;
/// Energy-distance bound used if the marginal check runs in 2D.
pub const PROP2_ENERGY: f64 = 0.01;
pub const PROP2_LEVELS: usize = 8;
pub const GRADIENT_Z: f64 = 3.0;
/// Stream tag for drawing the `(t, sigma)` probes.
const GRADIENT_PAIRS_TAG: u64 = 12;

/// 1D two-mode mixture, observation and the 8 levels of the chain.
pub fn prop2_problem() -> (GaussianMixture, NoisyObservation, Vec<f64>) {
    let g =
        GaussianMixture::isotropic(vec![0.35, 0.65], vec![vec![-1.0], vec![1.2]], &[0.09, 0.25])
            .expect("valid mixture");
    let obs = NoisyObservation::new(vec![0.3], NoiseLevel::new(0.8).expect("positive"));
    let levels = AnnealingSchedule::edm(PROP2_LEVELS, 0.002, 80.0, 7.0)
        .expect("valid grid")
        .levels()
        .to_vec();
    (g, obs, levels)
}

/// `pairs` random `(t, sigma)` probes, log-uniform on `[0.1, 3]`, for a
/// generator whose noise scale is off by a factor of two and whose mean map
/// is perturbed, so every coordinate of the gradient is non-zero.
pub fn gradient_problems(pairs: usize, samples: usize, seed: u64) -> Vec<GradientCheckConfig> {
    let mut rng = stream(seed, &[GRADIENT_PAIRS_TAG]);
    let (lo, hi) = (0.1f64.ln(), 3.0f64.ln());
    (0..pairs)
        .map(|_| {
            let t = rng.random_range(lo..hi).exp();
            let sigma = rng.random_range(lo..hi).exp();
            let m = GradientCheckConfig::matched(0.3, 0.8, t, sigma, samples);
            GradientCheckConfig {
                a: m.a + 0.2,
                b: m.b - 0.1,
                c: 2.0 * m.c,
                ..m
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientProbe {
    pub config: GradientCheckConfig,
    pub report: GradientReport,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub suite: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prop1: Option<DistanceReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub prop2: Vec<Prop2Report>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub gradient: Vec<GradientProbe>,
    pub passed: bool,
}

impl VerifyReport {
    /// Human-readable summary, one line per check.
    pub fn table(&self) -> String {
        let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let mut out = format!("suite {} (seed {})\n", self.suite, self.seed);
        if let Some(r) = &self.prop1 {
            out += &format!(
                "  {} prop1    max |error| {:.3e} < {:.0e} over {} trials\n",
                mark(r.passed()),
                r.value,
                r.threshold.unwrap_or(f64::NAN),
                r.n_a
            );
        }
        for p in &self.prop2 {
            let worst = p
                .reports
                .iter()
                .filter_map(|r| r.p_value)
                .fold(1.0, f64::min);
            out += &format!(
                "  {} prop2    zeta {:<4} min KS p-value {:.4} over {} marginals\n",
                mark(p.passed()),
                p.zeta,
                worst,
                p.reports.len()
            );
        }
        for (i, g) in self.gradient.iter().enumerate() {
            out += &format!(
                "  {} gradient probe {i} (t {:.3}, sigma {:.3}) max |z| {:.2}\n",
                mark(g.passed),
                g.config.t,
                g.config.sigma,
                g.report.max_abs_z()
            );
        }
        out += &format!("  overall {}\n", mark(self.passed));
        out
    }
}

pub fn run_suite(suite: &str, seed: u64, s: &Settings) -> Result<VerifyReport> {
    let all = suite == "all";
    if !SUITES.contains(&suite) {
        anyhow::bail!(
            "unknown suite `{suite}` (expected one of {})",
            SUITES.join(", ")
        );
    }
    let mut report = VerifyReport {
        suite: suite.into(),
        seed,
        ..VerifyReport::default()
    };
    let mut passed = true;
    if all || suite == "prop1" {
        let r = check_prop1(s.verify_prop1_trials, child_seed(seed, &[1]))?;
        passed &= r.passed();
        report.prop1 = Some(r);
    }
    if all || suite == "prop2" {
        let (g, obs, levels) = prop2_problem();
        for (k, &zeta) in s.verify_prop2_zetas.iter().enumerate() {
            let r = check_prop2(
                &g,
                &obs,
                &levels,
                zeta,
                s.verify_prop2_trajectories,
                child_seed(seed, &[2, k as u64]),
                PROP2_ALPHA,
                PROP2_ENERGY,
            )?;
            passed &= r.passed();
            report.prop2.push(r);
        }
    }
    if all || suite == "gradient" {
        for (k, cfg) in gradient_problems(s.verify_gradient_pairs, s.verify_gradient_samples, seed)
            .into_iter()
            .enumerate()
        {
            let r = check_gradient_unbiasedness(&cfg, child_seed(seed, &[3, k as u64]))?;
            let ok = r.max_abs_z() < GRADIENT_Z;
            passed &= ok;
            report.gradient.push(GradientProbe {
                config: cfg,
                report: r,
                passed: ok,
            });
        }
    }
    report.passed = passed;
    Ok(report)
}
