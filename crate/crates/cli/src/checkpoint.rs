//! Versioned JSON checkpoints.
//!
//! A checkpoint is self-contained: it carries the training config, the
//! mixture it was trained on, the pretrained unconditioned network and, for
//! training checkpoints, every parameter vector, optimizer moment and EMA
//! shadow. Floats are written in shortest round-trip form, so loading
//! restores the exact bits and a resumed run continues bit-identically.

use std::collections::VecDeque;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ncvsd_core::nn::{AdamState, DenoiserArch, EmaState, MlpDenoiser, Parameterized};
use ncvsd_core::rng::stream;
use ncvsd_core::train::{PretrainReport, StepLosses, TrainConfig, TrainState};
use ncvsd_core::GaussianMixture;
use serde::{Deserialize, Serialize};

use crate::io::{read_json, write_json, MixtureFile};

pub const FORMAT: &str = "ncvsd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Pretrain,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSnapshot {
    pub step: u64,
    pub images_seen: u64,
    pub generator: Vec<f64>,
    pub ema: EmaState,
    pub score: Vec<f64>,
    pub disc: Vec<f64>,
    pub uncertainty: Vec<f64>,
    pub adam_gen: AdamState,
    pub adam_score: AdamState,
    pub adam_disc: AdamState,
    pub adam_uncertainty: AdamState,
    pub telemetry: Vec<StepLosses>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: Kind,
    pub seed: u64,
    pub config: TrainConfig,
    pub mixture: MixtureFile,
    pub arch: DenoiserArch,
    /// Parameters of the pretrained unconditioned denoiser.
    pub init: Vec<f64>,
    pub pretrain: Option<PretrainReport>,
    pub training: Option<TrainingSnapshot>,
}

fn template(arch: DenoiserArch, params: &[f64]) -> Result<MlpDenoiser> {
    // initial values are overwritten, so any stream will do
    let mut net = MlpDenoiser::new(arch, &mut stream(0, &[]))?;
    ensure!(
        net.n_params() == params.len(),
        "checkpoint holds {} parameters, architecture needs {}",
        params.len(),
        net.n_params()
    );
    net.params_mut().copy_from_slice(params);
    Ok(net)
}

fn restore(dst: &mut [f64], src: &[f64], what: &str) -> Result<()> {
    ensure!(
        dst.len() == src.len(),
        "{what}: checkpoint holds {} values, network needs {}",
        src.len(),
        dst.len()
    );
    dst.copy_from_slice(src);
    Ok(())
}

impl Checkpoint {
    pub fn pretrained(
        config: &TrainConfig,
        gmm: &GaussianMixture,
        init: &MlpDenoiser,
        report: PretrainReport,
    ) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            kind: Kind::Pretrain,
            seed: config.seed,
            config: config.clone(),
            mixture: MixtureFile::from_mixture(gmm),
            arch: *init.arch(),
            init: init.params().to_vec(),
            pretrain: Some(report),
            training: None,
        }
    }

    /// `init` is the unconditioned network the state was built from.
    pub fn from_state(state: &TrainState, gmm: &GaussianMixture, init: &MlpDenoiser) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            kind: Kind::Train,
            seed: state.config.seed,
            config: state.config.clone(),
            mixture: MixtureFile::from_mixture(gmm),
            arch: *init.arch(),
            init: init.params().to_vec(),
            pretrain: state.pretrain.clone(),
            training: Some(TrainingSnapshot {
                step: state.step,
                images_seen: state.images_seen,
                generator: state.generator.params().to_vec(),
                ema: state.ema.clone(),
                score: state.score.params().to_vec(),
                disc: state.disc.params().to_vec(),
                uncertainty: state.uncertainty.params().to_vec(),
                adam_gen: state.adam_gen.clone(),
                adam_score: state.adam_score.clone(),
                adam_disc: state.adam_disc.clone(),
                adam_uncertainty: state.adam_uncertainty.clone(),
                telemetry: state.telemetry.iter().copied().collect(),
            }),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = read_json(path)?;
        if ck.format != FORMAT {
            bail!(
                "{} is not an ncvsd checkpoint (format `{}`)",
                path.display(),
                ck.format
            );
        }
        if ck.version != VERSION {
            bail!(
                "{}: checkpoint version {} is not supported (expected {VERSION})",
                path.display(),
                ck.version
            );
        }
        ensure!(
            ck.training.is_some() == (ck.kind == Kind::Train),
            "{}: kind and contents disagree",
            path.display()
        );
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self).with_context(|| format!("writing checkpoint {}", path.display()))
    }

    pub fn mixture(&self) -> Result<GaussianMixture> {
        self.mixture.to_mixture()
    }

    pub fn init_network(&self) -> Result<MlpDenoiser> {
        template(self.arch, &self.init)
    }

    /// Rebuilds the training state: from scratch on top of the pretrained
    /// network for a pretrain checkpoint, exactly as saved otherwise.
    pub fn train_state(&self) -> Result<TrainState> {
        let gmm = self.mixture()?;
        let init = self.init_network()?;
        let mut state =
            TrainState::from_init(self.config.clone(), &gmm, init, self.pretrain.clone())?;
        let Some(snap) = &self.training else {
            return Ok(state);
        };
        state.step = snap.step;
        state.images_seen = snap.images_seen;
        restore(state.generator.params_mut(), &snap.generator, "generator")?;
        restore(state.score.params_mut(), &snap.score, "score model")?;
        restore(state.disc.params_mut(), &snap.disc, "discriminator")?;
        restore(
            state.uncertainty.params_mut(),
            &snap.uncertainty,
            "uncertainty net",
        )?;
        ensure!(
            snap.ema.shadow.len() == state.generator.n_params(),
            "EMA shadow has the wrong length"
        );
        state.ema = snap.ema.clone();
        for (dst, src, what) in [
            (&mut state.adam_gen, &snap.adam_gen, "generator optimizer"),
            (&mut state.adam_score, &snap.adam_score, "score optimizer"),
            (
                &mut state.adam_disc,
                &snap.adam_disc,
                "discriminator optimizer",
            ),
            (
                &mut state.adam_uncertainty,
                &snap.adam_uncertainty,
                "uncertainty optimizer",
            ),
        ] {
            ensure!(
                src.m.len() == dst.m.len() && src.v.len() == dst.v.len(),
                "{what}: moment length mismatch"
            );
            *dst = src.clone();
        }
        state.telemetry = snap.telemetry.iter().copied().collect::<VecDeque<_>>();
        Ok(state)
    }

    /// The EMA generator of a training checkpoint.
    pub fn ema_generator(&self) -> Result<MlpDenoiser> {
        match self.kind {
            Kind::Train => Ok(self.train_state()?.ema_generator()),
            Kind::Pretrain => bail!("a pretrain checkpoint holds no generator; run `train` first"),
        }
    }
}
