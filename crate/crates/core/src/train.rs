//! Noise-conditional variational score distillation.
//!
//! Four networks are trained together. The generator `G(y, sigma, z)` draws
//! `x0` given a noisy observation; the score model `D_phi(x_t, t; y, sigma)`
//! tracks the denoiser of the generator's own noised outputs; the
//! discriminator `C(x_t, t; y, sigma)` separates noised data from noised
//! generator samples; the uncertainty net `w(t)` balances the loss across
//! diffusion times. The teacher denoiser is queried at the fused observation
//! `(y_eff, sigma_eff)` of `(y, sigma)` and `(x_t, t)`, which turns the
//! unconditional teacher into the conditional score `grad log q(x_t | y)`.
//!
//! Every batch runs, in order: one score-model step, one discriminator step,
//! one generator step (generator and uncertainty net) and an EMA update.
//! Per-element randomness comes from streams keyed by `(seed, tag, step,
//! element)`, so results do not depend on how elements are scheduled.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gmm::{fuse, GaussianMixture};
use crate::nn::{
    check_finite_grad, log_sigmoid, AdamState, DenoiserArch, DenoiserCache, Discriminator,
    EmaState, MlpDenoiser, Parameterized, UncertaintyNet,
};
use crate::rng::{normal_vec, standard_normal, stream, tag, StreamRng};
use crate::sampler::{unconditional_sample, GenerativeDenoiser, SamplerConfig};
use crate::schedule::AnnealingSchedule;
use crate::verify::sliced_wasserstein;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(rename_all = "lowercase")
)]
pub enum TeacherMode {
    /// The mixture's exact posterior mean is the teacher denoiser.
    Analytic,
    /// A network regressed on noisy samples is the teacher.
    Learned,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(default, deny_unknown_fields)
)]
pub struct TrainConfig {
    pub seed: u64,
    pub teacher_mode: TeacherMode,
    /// Log-normal parameters of the diffusion time `t`.
    pub p_mean: f64,
    pub p_std: f64,
    /// Grid from which observation levels `sigma` are drawn uniformly.
    pub sigma_grid_n: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_rho: f64,
    pub batch_size: usize,
    pub total_images: u64,
    /// Peak learning rate.
    pub alpha_ref: f64,
    /// Decay constant in optimizer steps.
    pub t_ref: f64,
    pub lr_warmup_images: u64,
    pub adv_warmup_images: u64,
    pub lr_scale_disc: f64,
    pub lr_scale_gen: f64,
    pub lr_scale_uncertainty: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub ema_rate: f64,
    pub sigma_data: f64,
    pub width: usize,
    pub depth: usize,
    pub uncertainty_width: usize,
    /// Regression steps for the network every trained model starts from.
    pub pretrain_steps: u64,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    /// Held-out error the pretrained denoiser should stay below.
    pub pretrain_threshold: f64,
    pub metric_every: u64,
    pub metric_samples: usize,
    pub metric_projections: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            teacher_mode: TeacherMode::Analytic,
            p_mean: -0.8,
            p_std: 1.6,
            sigma_grid_n: 1000,
            sigma_min: 0.002,
            sigma_max: 80.0,
            sigma_rho: 7.0,
            batch_size: 128,
            total_images: 128 * 4000,
            alpha_ref: 1e-3,
            t_ref: 1000.0,
            lr_warmup_images: 128 * 100,
            adv_warmup_images: 128 * 500,
            lr_scale_disc: 0.1,
            lr_scale_gen: 0.1,
            lr_scale_uncertainty: 1.0,
            beta1: 0.9,
            beta2: 0.99,
            gamma: 0.414,
            ema_rate: 0.999,
            sigma_data: 0.5,
            width: 64,
            depth: 3,
            uncertainty_width: 64,
            pretrain_steps: 2000,
            pretrain_batch: 128,
            pretrain_lr: 2e-3,
            pretrain_threshold: 0.05,
            metric_every: 500,
            metric_samples: 4096,
            metric_projections: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("p_std", self.p_std),
            ("sigma_min", self.sigma_min),
            ("sigma_max", self.sigma_max),
            ("sigma_rho", self.sigma_rho),
            ("t_ref", self.t_ref),
            ("gamma", self.gamma),
            ("sigma_data", self.sigma_data),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(name, "must be positive and finite"));
            }
        }
        let nonneg = [
            ("alpha_ref", self.alpha_ref),
            ("lr_scale_disc", self.lr_scale_disc),
            ("lr_scale_gen", self.lr_scale_gen),
            ("lr_scale_uncertainty", self.lr_scale_uncertainty),
            ("pretrain_lr", self.pretrain_lr),
            ("pretrain_threshold", self.pretrain_threshold),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(name, "must be non-negative and finite"));
            }
        }
        if !self.p_mean.is_finite() {
            return Err(Error::param("p_mean", "must be finite"));
        }
        if self.sigma_min >= self.sigma_max {
            return Err(Error::param("sigma_min", "must be below sigma_max"));
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("ema_rate", self.ema_rate),
        ] {
            if !(0.0..=1.0).contains(&v) || (name != "ema_rate" && v >= 1.0) {
                return Err(Error::param(name, "must lie in [0, 1)"));
            }
        }
        let counts = [
            ("sigma_grid_n", self.sigma_grid_n),
            ("batch_size", self.batch_size),
            ("width", self.width),
            ("uncertainty_width", self.uncertainty_width),
            ("pretrain_batch", self.pretrain_batch),
            ("metric_samples", self.metric_samples),
            ("metric_projections", self.metric_projections),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::param(name, "must be at least 1"));
            }
        }
        if self.depth < 2 {
            return Err(Error::param("depth", "must be at least 2"));
        }
        Ok(())
    }

    pub fn arch(&self, dim: usize) -> DenoiserArch {
        DenoiserArch::new(dim, self.width, self.depth, self.sigma_data)
    }

    pub fn sigma_schedule(&self) -> Result<AnnealingSchedule> {
        AnnealingSchedule::edm(
            self.sigma_grid_n,
            self.sigma_min,
            self.sigma_max,
            self.sigma_rho,
        )
    }

    pub fn total_steps(&self) -> u64 {
        self.total_images / self.batch_size as u64
    }
}

/// `log t ~ N(p_mean, p_std^2)`.
pub fn sample_t<R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R) -> f64 {
    libm::exp(config.p_mean + config.p_std * standard_normal(rng))
}

/// Uniform draw from the observation-level grid.
pub fn sample_sigma<R: Rng + ?Sized>(schedule: &AnnealingSchedule, rng: &mut R) -> f64 {
    schedule.level(rng.random_range(0..schedule.len()))
}

/// Linear warmup to `alpha_ref`, then `alpha_ref / sqrt(max(k / t_ref, 1))`
/// in optimizer steps `k`.
pub fn learning_rate(config: &TrainConfig, images_seen: u64) -> f64 {
    let warm = if config.lr_warmup_images == 0 {
        1.0
    } else {
        (images_seen as f64 / config.lr_warmup_images as f64).min(1.0)
    };
    let k = images_seen as f64 / config.batch_size as f64;
    config.alpha_ref * warm / libm::sqrt((k / config.t_ref).max(1.0))
}

/// EDM loss weight `1 / c_out(sigma)^2`.
fn edm_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma * sigma_data * sigma_data)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Teacher {
    Analytic(GaussianMixture),
    Learned(MlpDenoiser),
}

impl Teacher {
    pub fn denoise(&self, y: &[f64], sigma: f64) -> Vec<f64> {
        match self {
            Teacher::Analytic(g) => g.posterior_mean_raw(y, sigma),
            Teacher::Learned(net) => net.forward(y, sigma, None),
        }
    }
}

/// Held-out quality of a pretrained denoiser.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean `||D(y, sigma) - E[x0 | y]||` over levels spread across the grid.
    pub error: f64,
    pub threshold: f64,
    pub converged: bool,
    pub final_loss: f64,
}

/// Regresses an unconditioned denoiser onto `x0` (learned mode) or onto the
/// exact posterior mean (analytic mode, where the result only serves as the
/// initialization of the other networks).
pub fn pretrain_teacher(
    config: &TrainConfig,
    gmm: &GaussianMixture,
    mode: TeacherMode,
) -> Result<(MlpDenoiser, PretrainReport)> {
    config.validate()?;
    let dim = gmm.dim();
    let mut init_rng = stream(config.seed, &[tag::INIT, 0]);
    let mut net = MlpDenoiser::new(config.arch(dim), &mut init_rng)?;
    let mut adam = AdamState::new(net.n_params(), config.beta1, config.beta2);
    let schedule = config.sigma_schedule()?;
    let sd = config.sigma_data;
    let b = config.pretrain_batch;
    let mut last_loss = f64::NAN;
    for step in 0..config.pretrain_steps {
        let parts = crate::par::map_chunks(b, |range| {
            let mut grad = vec![0.0; net.n_params()];
            let mut loss = 0.0;
            for e in range {
                let mut rng = stream(config.seed, &[tag::PRETRAIN, step, e as u64]);
                let x0 = gmm.sample_one(&mut rng);
                let sigma = if e % 2 == 0 {
                    sample_t(config, &mut rng)
                } else {
                    sample_sigma(&schedule, &mut rng)
                };
                let y: Vec<f64> = x0
                    .iter()
                    .map(|v| v + sigma * standard_normal(&mut rng))
                    .collect();
                let target = match mode {
                    TeacherMode::Analytic => gmm.posterior_mean_raw(&y, sigma),
                    TeacherMode::Learned => x0,
                };
                let cache = net.forward_cached(&y, sigma, None);
                let w = edm_weight(sigma, sd);
                let diff: Vec<f64> = cache
                    .output
                    .iter()
                    .zip(&target)
                    .map(|(d, t)| d - t)
                    .collect();
                loss += w * diff.iter().map(|v| v * v).sum::<f64>();
                let up: Vec<f64> = diff.iter().map(|v| 2.0 * w * v / b as f64).collect();
                net.backward(&cache, &up, &mut grad);
            }
            (grad, loss)
        });
        let (grad, loss) = reduce(parts, net.n_params());
        check_finite_grad(&net, &grad)?;
        last_loss = loss / b as f64;
        let lr = config.pretrain_lr
            / libm::sqrt((step as f64 / (config.pretrain_steps as f64 / 4.0).max(1.0)).max(1.0));
        adam.step(net.params_mut(), &grad, lr)?;
    }
    let error = heldout_error(&net, gmm, &schedule, config.seed);
    let report = PretrainReport {
        error,
        threshold: config.pretrain_threshold,
        converged: error < config.pretrain_threshold,
        final_loss: last_loss,
    };
    Ok((net, report))
}

/// Mean distance to the exact posterior mean over 50 evenly spaced grid
/// levels, 64 draws each.
pub fn heldout_error(
    net: &MlpDenoiser,
    gmm: &GaussianMixture,
    schedule: &AnnealingSchedule,
    seed: u64,
) -> f64 {
    let levels = 50.min(schedule.len());
    let per = 64;
    let mut total = 0.0;
    for l in 0..levels {
        let idx = if levels == 1 {
            0
        } else {
            l * (schedule.len() - 1) / (levels - 1)
        };
        let sigma = schedule.level(idx);
        let mut rng = stream(seed, &[tag::HELDOUT, l as u64]);
        for _ in 0..per {
            let x0 = gmm.sample_one(&mut rng);
            let y: Vec<f64> = x0
                .iter()
                .map(|v| v + sigma * standard_normal(&mut rng))
                .collect();
            let d = net.forward(&y, sigma, None);
            let m = gmm.posterior_mean_raw(&y, sigma);
            total += libm::sqrt(crate::linalg::sq_dist(&d, &m));
        }
    }
    total / (levels * per) as f64
}

fn reduce(parts: Vec<(Vec<f64>, f64)>, n: usize) -> (Vec<f64>, f64) {
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;
    for (g, l) in parts {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        loss += l;
    }
    (grad, loss)
}

/// One row of training telemetry.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricRow {
    pub step: u64,
    pub images_seen: u64,
    pub loss_gen: f64,
    pub loss_score: f64,
    pub loss_disc: f64,
    pub w_lambda_mean: f64,
    pub swd_1step: f64,
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub loss_gen: f64,
    pub loss_score: f64,
    pub loss_disc: f64,
    pub w_lambda_mean: f64,
}

const TELEMETRY: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub teacher: Teacher,
    pub generator: MlpDenoiser,
    pub ema: EmaState,
    pub score: MlpDenoiser,
    pub disc: Discriminator,
    pub uncertainty: UncertaintyNet,
    pub adam_gen: AdamState,
    pub adam_score: AdamState,
    pub adam_disc: AdamState,
    pub adam_uncertainty: AdamState,
    pub step: u64,
    pub images_seen: u64,
    pub telemetry: VecDeque<StepLosses>,
    pub pretrain: Option<PretrainReport>,
}

/// Data-side draws shared by the discriminator and generator steps.
struct Shared {
    x0: Vec<f64>,
    sigma: f64,
    y: Vec<f64>,
}

fn draw_shared(
    config: &TrainConfig,
    gmm: &GaussianMixture,
    schedule: &AnnealingSchedule,
    step: u64,
    e: usize,
) -> Shared {
    let mut rng = stream(config.seed, &[tag::GEN, step, e as u64, 0]);
    let x0 = gmm.sample_one(&mut rng);
    let sigma = sample_sigma(schedule, &mut rng);
    let y = x0
        .iter()
        .map(|v| v + sigma * standard_normal(&mut rng))
        .collect();
    Shared { x0, sigma, y }
}

fn add_noise(x: &[f64], t: f64, rng: &mut StreamRng) -> Vec<f64> {
    x.iter().map(|v| v + t * standard_normal(rng)).collect()
}

/// Per-element generator loss and gradients; exposed for testing.
#[derive(Debug, Clone)]
pub struct GeneratorTerms {
    pub x_theta: Vec<f64>,
    pub x_t: Vec<f64>,
    pub t: f64,
    pub w: f64,
    /// `D_phi(x_t) - D_0(x_t)`, which equals `x_theta - stopgrad(target)`.
    pub mismatch: Vec<f64>,
    pub prob_fake: f64,
    pub loss: f64,
    /// `dL/dx_theta`.
    pub grad_x: Vec<f64>,
    /// `dL/dw`.
    pub grad_w: f64,
    cache: DenoiserCache,
}

impl TrainState {
    pub fn new(config: TrainConfig, gmm: &GaussianMixture) -> Result<Self> {
        config.validate()?;
        let (init, report) = pretrain_teacher(&config, gmm, config.teacher_mode)?;
        Self::from_init(config, gmm, init, Some(report))
    }

    /// Builds the state from an already pretrained unconditioned denoiser.
    pub fn from_init(
        config: TrainConfig,
        gmm: &GaussianMixture,
        init: MlpDenoiser,
        pretrain: Option<PretrainReport>,
    ) -> Result<Self> {
        config.validate()?;
        if init.dim() != gmm.dim() {
            return Err(Error::dim("TrainState::from_init", gmm.dim(), init.dim()));
        }
        let generator = MlpDenoiser::conditioned_from(&init)?;
        let score = MlpDenoiser::conditioned_from(&init)?;
        let disc = Discriminator::from_teacher(&init)?;
        let mut rng = stream(config.seed, &[tag::INIT, 1]);
        let uncertainty = UncertaintyNet::new(config.uncertainty_width, &mut rng);
        let teacher = match config.teacher_mode {
            TeacherMode::Analytic => Teacher::Analytic(gmm.clone()),
            TeacherMode::Learned => Teacher::Learned(init),
        };
        let (b1, b2) = (config.beta1, config.beta2);
        Ok(TrainState {
            ema: EmaState::new(generator.params(), config.ema_rate),
            adam_gen: AdamState::new(generator.n_params(), b1, b2),
            adam_score: AdamState::new(score.n_params(), b1, b2),
            adam_disc: AdamState::new(disc.n_params(), b1, b2),
            adam_uncertainty: AdamState::new(uncertainty.n_params(), b1, b2),
            config,
            teacher,
            generator,
            score,
            disc,
            uncertainty,
            step: 0,
            images_seen: 0,
            telemetry: VecDeque::new(),
            pretrain,
        })
    }

    /// The generator with EMA parameters.
    pub fn ema_generator(&self) -> MlpDenoiser {
        let mut g = self.generator.clone();
        g.params_mut().copy_from_slice(&self.ema.shadow);
        g
    }

    pub fn adversarial_active(&self) -> bool {
        self.images_seen >= self.config.adv_warmup_images
    }

    fn lr(&self) -> f64 {
        learning_rate(&self.config, self.images_seen)
    }

    /// Regresses `D_phi(x_t, t; y, sigma)` onto fresh generator samples.
    pub fn score_model_step(&mut self, gmm: &GaussianMixture) -> Result<f64> {
        let cfg = &self.config;
        let schedule = cfg.sigma_schedule()?;
        let b = cfg.batch_size;
        let (step, sd) = (self.step, cfg.sigma_data);
        let (gen, score) = (&self.generator, &self.score);
        let parts = crate::par::map_chunks(b, |range| {
            let mut grad = vec![0.0; score.n_params()];
            let mut loss = 0.0;
            for e in range {
                let mut rng = stream(cfg.seed, &[tag::SCORE, step, e as u64]);
                let x0 = gmm.sample_one(&mut rng);
                let sigma = sample_sigma(&schedule, &mut rng);
                let y = add_noise(&x0, sigma, &mut rng);
                let z = normal_vec(&mut rng, x0.len());
                let x_theta = gen.generate(&y, sigma, &z, cfg.gamma);
                let t = sample_t(cfg, &mut rng);
                let x_t = add_noise(&x_theta, t, &mut rng);
                let cache = score.forward_cached(&x_t, t, Some((&y, sigma)));
                let w = edm_weight(t, sd);
                let diff: Vec<f64> = cache
                    .output
                    .iter()
                    .zip(&x_theta)
                    .map(|(d, x)| d - x)
                    .collect();
                loss += w * diff.iter().map(|v| v * v).sum::<f64>();
                let up: Vec<f64> = diff.iter().map(|v| 2.0 * w * v / b as f64).collect();
                score.backward(&cache, &up, &mut grad);
            }
            (grad, loss)
        });
        let (grad, loss) = reduce(parts, self.score.n_params());
        let loss = loss / b as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "score loss",
                stage: "score_model_step",
                step: self.step,
            });
        }
        check_finite_grad(&self.score, &grad)?;
        let lr = self.lr();
        self.adam_score.step(self.score.params_mut(), &grad, lr)?;
        self.score.project();
        Ok(loss)
    }

    /// Non-saturating discriminator update on noised data (real) versus
    /// noised generator samples (fake), both paired with the same `(y, sigma)`.
    pub fn discriminator_step(&mut self, gmm: &GaussianMixture) -> Result<f64> {
        let cfg = &self.config;
        let schedule = cfg.sigma_schedule()?;
        let b = cfg.batch_size;
        let step = self.step;
        let (gen, disc) = (&self.generator, &self.disc);
        let parts = crate::par::map_chunks(b, |range| {
            let mut grad = vec![0.0; disc.n_params()];
            let mut loss = 0.0;
            for e in range {
                let sh = draw_shared(cfg, gmm, &schedule, step, e);
                let mut rng = stream(cfg.seed, &[tag::DISC, step, e as u64]);
                let z = normal_vec(&mut rng, sh.x0.len());
                let x_theta = gen.generate(&sh.y, sh.sigma, &z, cfg.gamma);
                let t = sample_t(cfg, &mut rng);
                let real = add_noise(&sh.x0, t, &mut rng);
                let fake = add_noise(&x_theta, t, &mut rng);
                let cr = disc.forward_cached(&real, t, &sh.y, sh.sigma);
                let cf = disc.forward_cached(&fake, t, &sh.y, sh.sigma);
                loss += -log_sigmoid(cr.logit) - log_sigmoid(-cf.logit);
                disc.backward(&cr, (cr.prob() - 1.0) / b as f64, &mut grad);
                disc.backward(&cf, cf.prob() / b as f64, &mut grad);
            }
            (grad, loss)
        });
        let (grad, loss) = reduce(parts, self.disc.n_params());
        let loss = loss / b as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "discriminator loss",
                stage: "discriminator_step",
                step: self.step,
            });
        }
        check_finite_grad(&self.disc, &grad)?;
        let lr = self.lr() * self.config.lr_scale_disc;
        self.adam_disc.step(self.disc.params_mut(), &grad, lr)?;
        Ok(loss)
    }

    /// Loss and gradients of one generator sample, for given draws.
    pub fn generator_terms(
        &self,
        y: &[f64],
        sigma: f64,
        z: &[f64],
        t: f64,
        eps: &[f64],
        adversarial: bool,
    ) -> GeneratorTerms {
        let cfg = &self.config;
        let dim = y.len() as f64;
        let cache = self.generator.generate_cached(y, sigma, z, cfg.gamma);
        let x_theta = cache.output.clone();
        let x_t: Vec<f64> = x_theta.iter().zip(eps).map(|(x, e)| x + t * e).collect();
        let d_phi = self.score.forward(&x_t, t, Some((y, sigma)));
        let (y_eff, s_eff) = fuse(y, sigma, &x_t, t);
        let d_0 = self.teacher.denoise(&y_eff, s_eff);
        let mismatch: Vec<f64> = d_phi.iter().zip(&d_0).map(|(a, b)| a - b).collect();
        let w = self.uncertainty.forward(t);
        let scale = libm::exp(-w);
        let sq: f64 = mismatch.iter().map(|v| v * v).sum();
        let mut loss = scale * sq + dim * w;
        let mut grad_x: Vec<f64> = mismatch.iter().map(|v| 2.0 * scale * v).collect();
        let mut prob_fake = 0.5;
        if adversarial {
            let cache = self.disc.forward_cached(&x_t, t, y, sigma);
            prob_fake = cache.prob();
            loss += -dim * log_sigmoid(cache.logit);
            let mut scratch = vec![0.0; self.disc.n_params()];
            let g = self
                .disc
                .backward_with_input(&cache, dim * (prob_fake - 1.0), &mut scratch);
            for (gx, gi) in grad_x.iter_mut().zip(&g) {
                *gx += gi;
            }
        }
        GeneratorTerms {
            x_theta,
            x_t,
            t,
            w,
            mismatch,
            prob_fake,
            loss,
            grad_x,
            grad_w: -scale * sq + dim,
            cache,
        }
    }

    /// Updates the generator and the uncertainty net, then the EMA.
    pub fn generator_step(&mut self, gmm: &GaussianMixture) -> Result<(f64, f64)> {
        let cfg = &self.config;
        let schedule = cfg.sigma_schedule()?;
        let b = cfg.batch_size;
        let step = self.step;
        let adversarial = self.adversarial_active();
        let this = &*self;
        let n_gen = this.generator.n_params();
        let n_unc = this.uncertainty.n_params();
        let parts = crate::par::map_chunks(b, |range| {
            let mut grad = vec![0.0; n_gen + n_unc];
            let mut loss = 0.0;
            let mut w_sum = 0.0;
            for e in range {
                let sh = draw_shared(cfg, gmm, &schedule, step, e);
                let mut rng = stream(cfg.seed, &[tag::GEN, step, e as u64, 1]);
                let d = sh.x0.len();
                let z = normal_vec(&mut rng, d);
                let t = sample_t(cfg, &mut rng);
                let eps = normal_vec(&mut rng, d);
                let terms = this.generator_terms(&sh.y, sh.sigma, &z, t, &eps, adversarial);
                loss += terms.loss;
                w_sum += terms.w;
                let up: Vec<f64> = terms.grad_x.iter().map(|g| g / b as f64).collect();
                let (g_gen, g_unc) = grad.split_at_mut(n_gen);
                this.generator.backward(&terms.cache, &up, g_gen);
                let uc = this.uncertainty.forward_cached(t);
                this.uncertainty
                    .backward(&uc, terms.grad_w / b as f64, g_unc);
            }
            (grad, loss, w_sum)
        });
        let mut grad = vec![0.0; n_gen + n_unc];
        let (mut loss, mut w_sum) = (0.0, 0.0);
        for (g, l, w) in parts {
            for (a, v) in grad.iter_mut().zip(&g) {
                *a += v;
            }
            loss += l;
            w_sum += w;
        }
        let loss = loss / b as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "generator loss",
                stage: "generator_step",
                step: self.step,
            });
        }
        let (g_gen, g_unc) = grad.split_at(n_gen);
        check_finite_grad(&self.generator, g_gen)?;
        check_finite_grad(&self.uncertainty, g_unc)?;
        let lr = self.lr();
        self.adam_gen.step(
            self.generator.params_mut(),
            g_gen,
            lr * self.config.lr_scale_gen,
        )?;
        self.generator.project();
        self.adam_uncertainty.step(
            self.uncertainty.params_mut(),
            g_unc,
            lr * self.config.lr_scale_uncertainty,
        )?;
        self.ema.update(self.generator.params())?;
        Ok((loss, w_sum / b as f64))
    }

    /// One full batch. On error the state may hold a partial update; callers
    /// that need a last-good snapshot should clone before stepping.
    pub fn train_step(&mut self, gmm: &GaussianMixture) -> Result<StepLosses> {
        let loss_score = self.score_model_step(gmm)?;
        let loss_disc = self.discriminator_step(gmm)?;
        let (loss_gen, w_lambda_mean) = self.generator_step(gmm)?;
        self.step += 1;
        self.images_seen += self.config.batch_size as u64;
        let losses = StepLosses {
            loss_gen,
            loss_score,
            loss_disc,
            w_lambda_mean,
        };
        if self.telemetry.len() == TELEMETRY {
            self.telemetry.pop_front();
        }
        self.telemetry.push_back(losses);
        Ok(losses)
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    /// 1-step unconditional sliced-Wasserstein distance of the EMA generator
    /// against exact samples.
    pub fn swd_1step(&self, gmm: &GaussianMixture, seed: u64) -> Result<f64> {
        evaluate_swd(
            &self.ema_generator(),
            self.config.gamma,
            gmm,
            1,
            &self.config,
            seed,
        )
    }

    /// Metric row averaged over the last `metric_every` steps.
    pub fn metric_row(&self, gmm: &GaussianMixture) -> Result<MetricRow> {
        let n = (self.config.metric_every as usize).clamp(1, self.telemetry.len().max(1));
        let recent: Vec<&StepLosses> = self.telemetry.iter().rev().take(n).collect();
        let k = recent.len().max(1) as f64;
        let avg = |f: fn(&StepLosses) -> f64| recent.iter().map(|s| f(s)).sum::<f64>() / k;
        Ok(MetricRow {
            step: self.step,
            images_seen: self.images_seen,
            loss_gen: avg(|s| s.loss_gen),
            loss_score: avg(|s| s.loss_score),
            loss_disc: avg(|s| s.loss_disc),
            w_lambda_mean: avg(|s| s.w_lambda_mean),
            swd_1step: self.swd_1step(
                gmm,
                crate::rng::child_seed(self.config.seed, &[tag::METRIC, self.step]),
            )?,
        })
    }
}

/// Sliced-Wasserstein distance between `steps`-step unconditional samples
/// of `generator` and exact mixture samples, with the metric sizes of
/// `config`.
pub fn evaluate_swd(
    generator: &MlpDenoiser,
    gamma: f64,
    gmm: &GaussianMixture,
    steps: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let sampler = SamplerConfig::few_step(steps)?;
    let den = GenerativeDenoiser {
        net: generator,
        gamma,
    };
    let fake = unconditional_sample(&den, &sampler, config.metric_samples, seed)?;
    let mut rng = stream(seed, &[tag::METRIC, 1]);
    let real = gmm.sample(config.metric_samples, seed, &mut rng);
    Ok(sliced_wasserstein(&fake, &real, config.metric_projections, seed)?.value)
}

/// Runs to the end of the budget, emitting a metric row every
/// `metric_every` steps and after the last one.
pub fn train(config: TrainConfig, gmm: &GaussianMixture) -> Result<(TrainState, Vec<MetricRow>)> {
    let mut state = TrainState::new(config, gmm)?;
    let mut log = Vec::new();
    resume(&mut state, gmm, |row| log.push(*row))?;
    Ok((state, log))
}

/// Continues training from `state`, calling `on_metric` with each row.
pub fn resume(
    state: &mut TrainState,
    gmm: &GaussianMixture,
    mut on_metric: impl FnMut(&MetricRow),
) -> Result<()> {
    let total = state.config.total_steps();
    let every = state.config.metric_every.max(1);
    while state.step < total {
        state.train_step(gmm)?;
        if state.step % every == 0 || state.step == total {
            let row = state.metric_row(gmm)?;
            on_metric(&row);
        }
    }
    Ok(())
}
