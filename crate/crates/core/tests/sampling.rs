use nalgebra::DMatrix;
use ncvsd_core::batch::Provenance;
use ncvsd_core::gmm::GaussianMixture;
use ncvsd_core::pnp::{
    custom_energy, run_pnp_batch, run_pnp_gd, Energy, LinearEnergy, PnpConfig, PriorMode,
    ZeroEnergy,
};
use ncvsd_core::rng::{stream, StreamRng};
use ncvsd_core::sampler::{unconditional_sample, OracleDenoiser, PosteriorSampler, SamplerConfig};
use ncvsd_core::schedule::AnnealingSchedule;
use ncvsd_core::verify::{
    check_gradient_unbiasedness, check_prop1, check_prop2, energy_distance, sliced_wasserstein,
    GradientCheckConfig,
};
use ncvsd_core::{Error, NoiseLevel, NoisyObservation, Result};

fn ring() -> GaussianMixture {
    GaussianMixture::ring(8, 1.0, 0.1).unwrap()
}

#[test]
fn oracle_sampler_reproduces_data_for_every_preset() {
    let g = ring();
    let n = 100_000;
    let exact = g.sample(n, 1, &mut stream(1, &[]));
    for steps in [1, 2, 4] {
        let cfg = SamplerConfig::few_step(steps).unwrap();
        let got = unconditional_sample(&OracleDenoiser(&g), &cfg, n, 2).unwrap();
        assert_eq!(got.provenance, Provenance::Oracle);
        let swd = sliced_wasserstein(&got, &exact, 128, 3).unwrap().value;
        assert!(swd < 0.05, "{steps} steps: sliced Wasserstein {swd}");
    }
}

#[test]
fn pnp_without_energy_samples_the_prior() {
    let g = ring();
    let n = 10_000;
    let mut cfg = PnpConfig::new(1.0);
    cfg.ula_steps = 10;
    let got = run_pnp_batch(&OracleDenoiser(&g), &ZeroEnergy { dim: 2 }, &cfg, n, 4).unwrap();
    let exact = g.sample(n, 5, &mut stream(5, &[]));
    let swd = sliced_wasserstein(&got, &exact, 128, 6).unwrap().value;
    assert!(swd < 0.05, "sliced Wasserstein {swd}");
}

#[test]
fn single_level_chain_returns_one_prior_draw() {
    let g = ring();
    let energy = LinearEnergy::new(DMatrix::identity(2, 2), vec![0.6, 0.5], true).unwrap();
    let mut cfg = PnpConfig::new(0.02);
    cfg.schedule = AnnealingSchedule::edm(1, 80.0, 80.0, 2.0).unwrap();
    let out = run_pnp_gd(&OracleDenoiser(&g), &energy, &cfg, &mut stream(7, &[])).unwrap();
    assert_eq!(out.trajectory.len(), 1);
    assert_eq!(out.trajectory[0].sigma, 80.0);
    assert_eq!(out.x0, out.trajectory[0].x0);
}

#[test]
fn multistep_prior_mode_runs() {
    let g = ring();
    let energy = LinearEnergy::new(DMatrix::identity(2, 2), vec![0.6, 0.5], true).unwrap();
    let mut cfg = PnpConfig::new(0.02);
    cfg.prior = PriorMode::MultiStep(2);
    cfg.schedule = AnnealingSchedule::edm(10, 0.01, 80.0, 2.0).unwrap();
    let out = run_pnp_gd(&OracleDenoiser(&g), &energy, &cfg, &mut stream(8, &[])).unwrap();
    assert_eq!(out.trajectory.len(), 10);
    assert!(out.x0.iter().all(|v| v.is_finite()));
}

#[test]
fn cubic_energy_chain_concentrates_near_the_observation() {
    let g = ring();
    let energy = custom_energy("cubic", DMatrix::identity(2, 2), vec![0.9, 0.3], 0.1).unwrap();
    let mut cfg = PnpConfig::new(0.005);
    // the cubic gradient is not globally Lipschitz: start at a moderate level
    // and shrink the Langevin step below the linear stability edge
    cfg.schedule = AnnealingSchedule::edm(30, 0.01, 1.0, 2.0).unwrap();
    cfg.ula_steps = 50;
    cfg.c1 = 0.01;
    let batch = run_pnp_batch(&OracleDenoiser(&g), energy.as_ref(), &cfg, 500, 9).unwrap();
    let mean = batch.mean();
    // phi(x) = x + 0.1 x^3 = (0.9, 0.3) has its root near (0.83, 0.30)
    assert!(
        (mean[0] - 0.83).abs() < 0.15 && (mean[1] - 0.30).abs() < 0.3,
        "{mean:?}"
    );
}

/// Denoiser that fails below a chosen level.
struct FailsBelow<'a>(OracleDenoiser<'a>, f64);

impl PosteriorSampler for FailsBelow<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn sample_x0(&self, y: &[f64], sigma: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
        if sigma < self.1 {
            return Err(Error::NonFiniteIterate { step: 0 });
        }
        self.0.sample_x0(y, sigma, rng)
    }

    fn provenance(&self, steps: usize) -> Provenance {
        self.0.provenance(steps)
    }
}

#[test]
fn chain_errors_report_position_and_level() {
    let g = ring();
    let cfg = PnpConfig::new(0.02);
    let levels = cfg.schedule.levels().to_vec();
    let energy = LinearEnergy::new(DMatrix::identity(2, 2), vec![0.6, 0.5], true).unwrap();
    let err = run_pnp_gd(
        &FailsBelow(OracleDenoiser(&g), 1.0),
        &energy,
        &cfg,
        &mut stream(10, &[]),
    )
    .unwrap_err();
    let k = levels.iter().position(|s| *s < 1.0).unwrap();
    match err {
        Error::Chain {
            position, sigma, ..
        } => {
            assert_eq!(position, levels.len() - k);
            assert_eq!(sigma, levels[k]);
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn pnp_rejects_mismatched_dimensions_and_bad_config() {
    let g = ring();
    let energy = ZeroEnergy { dim: 3 };
    assert!(run_pnp_gd(
        &OracleDenoiser(&g),
        &energy,
        &PnpConfig::new(1.0),
        &mut stream(0, &[])
    )
    .is_err());
    let mut cfg = PnpConfig::new(1.0);
    cfg.mu = 1.5;
    assert!(run_pnp_gd(
        &OracleDenoiser(&g),
        &ZeroEnergy { dim: 2 },
        &cfg,
        &mut stream(0, &[])
    )
    .is_err());
    assert!(ZeroEnergy { dim: 2 }.linear_gaussian().is_none());
}

#[test]
fn prop1_small_run() {
    let r = check_prop1(50, 11).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn prop2_small_runs_in_one_and_two_dimensions() {
    let g1 = GaussianMixture::isotropic(vec![0.3, 0.7], vec![vec![-1.0], vec![1.5]], &[0.2, 0.5])
        .unwrap();
    let obs1 = NoisyObservation::new(vec![0.4], NoiseLevel::new(1.0).unwrap());
    let levels = AnnealingSchedule::edm(8, 0.05, 5.0, 7.0)
        .unwrap()
        .levels()
        .to_vec();
    let r = check_prop2(&g1, &obs1, &levels, 0.5, 4000, 12, 0.01, 0.01).unwrap();
    assert!(r.passed(), "{r:?}");
    assert_eq!(r.reports.len(), levels.len() + 1);
    let g2 = ring();
    let obs2 = NoisyObservation::new(vec![0.7, 0.0], NoiseLevel::new(0.8).unwrap());
    let r = check_prop2(&g2, &obs2, &levels[..4], 1.0, 4000, 13, 0.01, 0.01).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn gradient_estimator_zero_mismatch_and_large_t() {
    let matched = GradientCheckConfig::matched(0.3, 0.8, 0.9, 0.5, 20_000);
    let r = check_gradient_unbiasedness(&matched, 14).unwrap();
    assert!(r.analytic.iter().all(|g| g.abs() < 1e-12), "{r:?}");
    assert!(r.passed(), "{r:?}");
    let off = GradientCheckConfig {
        c: matched.c * 2.0,
        ..matched
    };
    let r = check_gradient_unbiasedness(&off, 15).unwrap();
    assert!(r.passed(), "{r:?}");
    assert!(r.analytic[2].abs() > 0.01);
    let far = GradientCheckConfig { t: 1e4, ..off };
    let g = far.analytic_gradient();
    assert!(g.iter().all(|v| v.abs() < 1e-6), "{g:?}");
}

#[test]
fn energy_distance_separates_shifted_samples() {
    let g = ring();
    let a = g.sample(2000, 1, &mut stream(1, &[]));
    let b = g.sample(2000, 2, &mut stream(2, &[]));
    let shifted = GaussianMixture::ring(8, 1.3, 0.1)
        .unwrap()
        .sample(2000, 3, &mut stream(3, &[]));
    let same = energy_distance(&a, &b).unwrap().value;
    let diff = energy_distance(&a, &shifted).unwrap().value;
    assert!(same < 0.01 && diff > 5.0 * same, "{same} {diff}");
}
