//! Files: mixtures, sample and trajectory CSVs, JSON reports, output
//! directories.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use ncvsd_core::pnp::TrajectoryRow;
use ncvsd_core::train::MetricRow;
use ncvsd_core::{GaussianMixture, SampleBatch};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureFile {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl MixtureFile {
    pub fn from_mixture(g: &GaussianMixture) -> Self {
        MixtureFile {
            weights: g.weights().to_vec(),
            means: g.means().to_vec(),
            covariances: g
                .covariances()
                .iter()
                .map(|c| {
                    (0..c.nrows())
                        .map(|i| c.row(i).iter().copied().collect())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn to_mixture(&self) -> Result<GaussianMixture> {
        let mut covs = Vec::with_capacity(self.covariances.len());
        for (k, c) in self.covariances.iter().enumerate() {
            let n = c.len();
            if c.iter().any(|r| r.len() != n) {
                bail!("covariance {k} is not square");
            }
            covs.push(DMatrix::from_fn(n, n, |i, j| c[i][j]));
        }
        Ok(GaussianMixture::new(
            self.weights.clone(),
            self.means.clone(),
            covs,
        )?)
    }
}

pub fn read_mixture(path: &Path) -> Result<GaussianMixture> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading mixture {}", path.display()))?;
    let file: MixtureFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing mixture {}", path.display()))?;
    file.to_mixture()
        .with_context(|| format!("invalid mixture in {}", path.display()))
}

pub fn write_mixture(path: &Path, g: &GaussianMixture) -> Result<()> {
    write_json(path, &MixtureFile::from_mixture(g))
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f =
            fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn csv_bytes(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w)?;
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

/// One row per sample: coordinates, then the seed and step count.
pub fn write_samples(path: &Path, batch: &SampleBatch) -> Result<()> {
    let steps = batch.steps.map_or(String::new(), |s| s.to_string());
    let seed = batch.seed.to_string();
    let bytes = csv_bytes(|w| {
        let mut header: Vec<String> = (0..batch.dim()).map(|j| format!("x{j}")).collect();
        header.extend(["seed".into(), "steps".into()]);
        w.write_record(&header)?;
        for row in batch.rows() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(seed.clone());
            rec.push(steps.clone());
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    write_atomic(path, &bytes)
}

pub fn read_samples(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let dim = r.headers()?.iter().filter(|h| h.starts_with('x')).count();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row: Result<Vec<f64>, _> = rec.iter().take(dim).map(str::parse).collect();
        out.push(row?);
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let bytes = csv_bytes(|w| {
        if rows.is_empty() {
            w.write_record([
                "step",
                "images_seen",
                "loss_gen",
                "loss_score",
                "loss_disc",
                "w_lambda_mean",
                "swd_1step",
            ])?;
        }
        for r in rows {
            w.serialize(r)?;
        }
        Ok(())
    })?;
    write_atomic(path, &bytes)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.x0.len());
    let bytes = csv_bytes(|w| {
        let mut header = vec!["step".to_string(), "sigma".to_string()];
        header.extend((0..dim).map(|j| format!("x0_{j}")));
        header.extend((0..dim).map(|j| format!("u_{j}")));
        w.write_record(&header)?;
        for r in rows {
            let mut rec = vec![r.step.to_string(), r.sigma.to_string()];
            rec.extend(r.x0.iter().chain(&r.u).map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    write_atomic(path, &bytes)
}

/// A freshly created output directory. Creation fails if the path exists,
/// so two runs never write into the same directory.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        if let Some(parent) = root.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::create_dir(root).with_context(|| {
            format!(
                "creating output directory {} (it must not exist yet)",
                root.display()
            )
        })?;
        Ok(OutputDir {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}
