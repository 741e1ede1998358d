//! The five subcommands.
//!
//! Every command creates a fresh output directory, writes `manifest.json` and
//! the resolved `config.toml` before any computation, and derives all
//! randomness from the run seed through [`ncvsd_core::rng::stream`].

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use ncvsd_core::pnp::{run_pnp_batch, run_pnp_gd, Energy};
use ncvsd_core::rng::{child_seed, stream, tag};
use ncvsd_core::sampler::{
    sample_batch, GenerativeDenoiser, OracleDenoiser, PosteriorSampler, SamplerConfig,
};
use ncvsd_core::train::{
    evaluate_swd, pretrain_teacher, MetricRow, PretrainReport, TeacherMode, TrainState,
};
use ncvsd_core::verify::{energy_distance, sliced_wasserstein, DistanceReport};
use ncvsd_core::{GaussianMixture, NoiseLevel, NoisyObservation};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, Kind};
use crate::config::RunConfig;
use crate::io::{
    sha256_file, write_atomic, write_json, write_metrics, write_samples, write_trajectory,
    OutputDir,
};
use crate::suites::{run_suite, VerifyReport};

/// Sampling step counts evaluated at the end of training.
pub const EVAL_STEPS: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Passed,
    Failed,
}

/// Resolved command-line inputs shared by all commands.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: RunConfig,
    pub config_path: Option<PathBuf>,
    pub out: PathBuf,
    pub threads: usize,
    pub checkpoint: Option<PathBuf>,
    pub steps: Option<u64>,
    pub n: Option<usize>,
}

#[derive(Debug, Serialize)]
struct CheckpointRef {
    path: String,
    sha256: String,
}

/// Everything that determines a run's outputs, plus bookkeeping that does
/// not (`config_path`, `out`, `threads`, `started_unix`). `experiment_id`
/// hashes the former.
#[derive(Debug, Serialize)]
struct Manifest {
    experiment_id: String,
    tool: &'static str,
    version: &'static str,
    command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    suite: Option<String>,
    seed: u64,
    stream_rule: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<CheckpointRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    config: String,
    config_path: Option<String>,
    out: String,
    threads: usize,
    started_unix: u64,
}

const STREAM_RULE: &str = "ChaCha8 keyed by SplitMix64 folding of (seed, path); \
tags SCORE=1 DISC=2 GEN=3 METRIC=4 INIT=5 PRETRAIN=6 HELDOUT=7 SAMPLE=8 CHAIN=9 PROJECTION=10 TRIAL=11";

fn start(
    inv: &Invocation,
    command: &str,
    suite: Option<&str>,
    config: &RunConfig,
) -> Result<OutputDir> {
    let config_text = config.to_toml()?;
    let checkpoint = match &inv.checkpoint {
        Some(p) => Some(CheckpointRef {
            path: p.display().to_string(),
            sha256: sha256_file(p)?,
        }),
        None => None,
    };
    let mut h = Sha256::new();
    for part in [
        command,
        suite.unwrap_or(""),
        &config_text,
        checkpoint.as_ref().map_or("", |c| c.sha256.as_str()),
        &format!("{:?}/{:?}", inv.steps, inv.n),
    ] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    let id: String = h
        .finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect();
    let manifest = Manifest {
        experiment_id: id,
        tool: "ncvsd",
        version: env!("CARGO_PKG_VERSION"),
        command: command.into(),
        suite: suite.map(Into::into),
        seed: config.seed(),
        stream_rule: STREAM_RULE,
        checkpoint,
        steps: inv.steps,
        n: inv.n,
        config: config_text.clone(),
        config_path: inv.config_path.as_ref().map(|p| p.display().to_string()),
        out: inv.out.display().to_string(),
        threads: inv.threads,
        started_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    let dir = OutputDir::create(&inv.out)?;
    write_json(&dir.path("manifest.json"), &manifest)?;
    write_atomic(&dir.path("config.toml"), config_text.as_bytes())?;
    Ok(dir)
}

fn config_dir(inv: &Invocation) -> Option<&Path> {
    inv.config_path.as_deref().and_then(Path::parent)
}

fn load_checkpoint(inv: &Invocation) -> Result<Option<Checkpoint>> {
    inv.checkpoint.as_deref().map(Checkpoint::load).transpose()
}

#[derive(Debug, Serialize)]
struct PretrainOutput {
    teacher_mode: TeacherMode,
    note: &'static str,
    report: PretrainReport,
}

pub fn pretrain(inv: &Invocation) -> Result<Status> {
    let config = &inv.config;
    config.validate()?;
    let gmm = config.mixture(config_dir(inv))?;
    let dir = start(inv, "pretrain", None, config)?;
    let train = &config.train;
    let note = match train.teacher_mode {
        TeacherMode::Analytic => "analytic teacher: the mixture's posterior mean is used directly; only the shared initialization was fitted",
        TeacherMode::Learned => "learned teacher: fitted by denoising regression",
    };
    log::info!("pretraining ({note})");
    let (init, report) = pretrain_teacher(train, &gmm, train.teacher_mode)?;
    Checkpoint::pretrained(train, &gmm, &init, report.clone())
        .save(&dir.path("checkpoint.json"))?;
    write_json(
        &dir.path("report.json"),
        &PretrainOutput {
            teacher_mode: train.teacher_mode,
            note,
            report: report.clone(),
        },
    )?;
    println!(
        "held-out error {:.4e} (threshold {:.2e}): {}",
        report.error,
        report.threshold,
        if report.converged {
            "ok"
        } else {
            "above threshold"
        }
    );
    Ok(Status::Passed)
}

/// Unconditional SWD of the EMA generator at 1, 2 and 4 steps, on streams
/// disjoint from those used during training.
pub fn final_swd(state: &TrainState, gmm: &GaussianMixture) -> Result<[f64; 3]> {
    let ema = state.ema_generator();
    let mut out = [0.0; 3];
    for (slot, &steps) in out.iter_mut().zip(&EVAL_STEPS) {
        let seed = child_seed(state.config.seed, &[tag::HELDOUT, steps as u64]);
        *slot = evaluate_swd(&ema, state.config.gamma, gmm, steps, &state.config, seed)?;
    }
    Ok(out)
}

/// Trains until the budget is spent or `max_steps` more steps have run,
/// logging a metric row on the same cadence as an uninterrupted run.
pub fn run_training(
    state: &mut TrainState,
    gmm: &GaussianMixture,
    max_steps: Option<u64>,
) -> Result<Vec<MetricRow>> {
    let total = state.config.total_steps();
    let stop = max_steps.map_or(total, |m| total.min(state.step.saturating_add(m)));
    let every = state.config.metric_every.max(1);
    let mut rows = Vec::new();
    while state.step < stop {
        state.train_step(gmm)?;
        if state.step % every == 0 || state.step == total {
            let row = state.metric_row(gmm)?;
            log::info!("step {} swd_1step {:.4}", row.step, row.swd_1step);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct TrainOutput {
    step: u64,
    total_steps: u64,
    finished: bool,
    pretrain: Option<PretrainReport>,
    /// `[1-step, 2-step, 4-step]` sliced-Wasserstein distances.
    #[serde(skip_serializing_if = "Option::is_none")]
    swd: Option<[f64; 3]>,
}

pub fn train(inv: &Invocation) -> Result<Status> {
    let ck = load_checkpoint(inv)?;
    let (config, gmm) = match &ck {
        // the checkpoint fixes the training keys and the mixture
        Some(ck) => (
            RunConfig {
                train: ck.config.clone(),
                settings: inv.config.settings.clone(),
            },
            ck.mixture()?,
        ),
        None => (inv.config.clone(), inv.config.mixture(config_dir(inv))?),
    };
    config.validate()?;
    let dir = start(inv, "train", None, &config)?;
    let (mut state, init) = match ck {
        Some(ck) => (ck.train_state()?, ck.init_network()?),
        None => {
            let (init, report) = pretrain_teacher(&config.train, &gmm, config.train.teacher_mode)?;
            (
                TrainState::from_init(config.train.clone(), &gmm, init.clone(), Some(report))?,
                init,
            )
        }
    };
    let rows = run_training(&mut state, &gmm, inv.steps)?;
    write_metrics(&dir.path("metrics.csv"), &rows)?;
    Checkpoint::from_state(&state, &gmm, &init).save(&dir.path("checkpoint.json"))?;
    let finished = state.finished();
    let swd = if finished {
        Some(final_swd(&state, &gmm)?)
    } else {
        None
    };
    write_json(
        &dir.path("report.json"),
        &TrainOutput {
            step: state.step,
            total_steps: state.config.total_steps(),
            finished,
            pretrain: state.pretrain.clone(),
            swd,
        },
    )?;
    match swd {
        Some(s) => println!(
            "step {}: swd 1-step {:.4}, 2-step {:.4}, 4-step {:.4}",
            state.step, s[0], s[1], s[2]
        ),
        None => println!(
            "stopped at step {} of {}",
            state.step,
            state.config.total_steps()
        ),
    }
    Ok(Status::Passed)
}

/// The prior a sampling command draws from: exact, or a checkpoint's EMA
/// generator.
fn prior(
    inv: &Invocation,
) -> Result<(GaussianMixture, Option<(ncvsd_core::nn::MlpDenoiser, f64)>)> {
    match load_checkpoint(inv)? {
        Some(ck) if ck.kind == Kind::Train => {
            Ok((ck.mixture()?, Some((ck.ema_generator()?, ck.config.gamma))))
        }
        Some(_) => bail!("sampling needs a training checkpoint, not a pretrain checkpoint"),
        None => Ok((inv.config.mixture(config_dir(inv))?, None)),
    }
}

fn with_denoiser<T>(
    net: &Option<(ncvsd_core::nn::MlpDenoiser, f64)>,
    gmm: &GaussianMixture,
    f: impl FnOnce(&dyn PosteriorSampler) -> Result<T>,
) -> Result<T> {
    match net {
        Some((net, gamma)) => f(&GenerativeDenoiser { net, gamma: *gamma }),
        None => f(&OracleDenoiser(gmm)),
    }
}

#[derive(Debug, Serialize)]
struct SampleOutput {
    provenance: &'static str,
    n: usize,
    steps: usize,
    conditional: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    swd: Option<DistanceReport>,
}

pub fn sample(inv: &Invocation) -> Result<Status> {
    let config = &inv.config;
    config.validate()?;
    let s = &config.settings;
    let steps = inv.steps.map_or(s.sample_steps, |v| v as usize);
    let n = inv.n.unwrap_or(s.sample_count);
    let indices = SamplerConfig::preset_indices(steps)?;
    let sampler = SamplerConfig::new(
        ncvsd_core::schedule::AnnealingSchedule::generation(),
        indices,
        s.sample_zeta,
    )?;
    let (gmm, net) = prior(inv)?;
    let obs = if s.sample_y.is_empty() {
        None
    } else {
        if s.sample_y.len() != gmm.dim() {
            bail!(
                "sample_y has {} entries, the prior has dimension {}",
                s.sample_y.len(),
                gmm.dim()
            );
        }
        Some(NoisyObservation::new(
            s.sample_y.clone(),
            NoiseLevel::new(s.sample_sigma)?,
        ))
    };
    let dir = start(inv, "sample", None, config)?;
    let seed = config.seed();
    let batch = with_denoiser(&net, &gmm, |d| {
        Ok(sample_batch(d, obs.as_ref(), &sampler, n, seed)?)
    })?;
    write_samples(&dir.path("samples.csv"), &batch)?;
    let swd = if n > 0 {
        let target = match &obs {
            Some(o) => gmm.denoising_posterior(o)?,
            None => gmm.clone(),
        };
        let exact = target.sample(n, seed, &mut stream(seed, &[tag::HELDOUT]));
        Some(sliced_wasserstein(
            &batch,
            &exact,
            s.sample_projections,
            seed,
        )?)
    } else {
        None
    };
    write_json(
        &dir.path("report.json"),
        &SampleOutput {
            provenance: batch.provenance.as_str(),
            n,
            steps,
            conditional: obs.is_some(),
            swd: swd.clone(),
        },
    )?;
    match swd {
        Some(r) => println!(
            "{n} samples ({}), swd vs exact {:.4}",
            batch.provenance.as_str(),
            r.value
        ),
        None => println!("0 samples"),
    }
    Ok(Status::Passed)
}

#[derive(Debug, Serialize)]
struct PnpReport {
    provenance: &'static str,
    chains: usize,
    levels: usize,
    beta: f64,
    energy: String,
    mean: Vec<f64>,
    /// Against exact posterior draws when the energy is linear-Gaussian, or
    /// prior draws for `none`.
    #[serde(skip_serializing_if = "Option::is_none")]
    energy_distance: Option<DistanceReport>,
}

/// Exact reference distribution of a PnP run, when one exists.
fn pnp_reference(config: &RunConfig, gmm: &GaussianMixture) -> Result<Option<GaussianMixture>> {
    Ok(match config.settings.pnp_energy.as_str() {
        "none" => Some(gmm.clone()),
        "linear-gaussian" => {
            let sigma_y = NoiseLevel::new((config.beta() / 2.0).sqrt())?;
            Some(gmm.linear_posterior(&config.operator()?, &config.settings.pnp_y, sigma_y)?)
        }
        _ => None,
    })
}

pub fn pnp(inv: &Invocation) -> Result<Status> {
    let mut config = inv.config.clone();
    if let Some(levels) = inv.steps {
        config.settings.pnp_levels = levels as usize;
    }
    config.validate()?;
    let (gmm, net) = prior(inv)?;
    let energy: Box<dyn Energy> = config.energy(gmm.dim())?;
    let pnp_cfg = config.pnp()?;
    let chains = inv.n.unwrap_or(config.settings.pnp_chains);
    let reference = pnp_reference(&config, &gmm)?;
    let dir = start(inv, "pnp", None, &config)?;
    let seed = config.seed();
    let (batch, first) = with_denoiser(&net, &gmm, |d| {
        let batch = run_pnp_batch(d, energy.as_ref(), &pnp_cfg, chains, seed)?;
        let first = run_pnp_gd(
            d,
            energy.as_ref(),
            &pnp_cfg,
            &mut stream(seed, &[tag::CHAIN, 0]),
        )?;
        Ok((batch, first))
    })?;
    write_samples(&dir.path("samples.csv"), &batch)?;
    write_trajectory(&dir.path("trajectory.csv"), &first.trajectory)?;
    let ed = match (&reference, chains) {
        (Some(target), n) if n > 1 => {
            let exact = target.sample(n, seed, &mut stream(seed, &[tag::HELDOUT]));
            Some(energy_distance(&batch, &exact)?)
        }
        _ => None,
    };
    let provenance = match &net {
        Some(_) => "learned",
        None => "oracle",
    };
    write_json(
        &dir.path("report.json"),
        &PnpReport {
            provenance,
            chains,
            levels: pnp_cfg.schedule.len(),
            beta: pnp_cfg.beta,
            energy: config.settings.pnp_energy.clone(),
            mean: if batch.is_empty() {
                Vec::new()
            } else {
                batch.mean()
            },
            energy_distance: ed.clone(),
        },
    )?;
    match ed {
        Some(r) => println!(
            "{chains} chains ({provenance} prior), energy distance to the exact posterior {:.4}",
            r.value
        ),
        None => println!("{chains} chains ({provenance} prior)"),
    }
    Ok(Status::Passed)
}

pub fn verify(inv: &Invocation, suite: &str) -> Result<Status> {
    let config = &inv.config;
    if !crate::suites::SUITES.contains(&suite) {
        bail!(
            "unknown suite `{suite}` (expected one of {})",
            crate::suites::SUITES.join(", ")
        );
    }
    let dir = start(inv, "verify", Some(suite), config)?;
    let report: VerifyReport =
        run_suite(suite, config.seed(), &config.settings).context("running verification")?;
    write_json(&dir.path("report.json"), &report)?;
    print!("{}", report.table());
    Ok(if report.passed {
        Status::Passed
    } else {
        Status::Failed
    })
}
