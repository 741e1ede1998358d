use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Where a batch of samples came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Oracle,
    Learned1Step,
    LearnedKStep,
    PnpGd,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Oracle => "oracle",
            Provenance::Learned1Step => "learned-1step",
            Provenance::LearnedKStep => "learned-kstep",
            Provenance::PnpGd => "pnp-gd",
        }
    }
}

/// An `n x dim` row-major matrix of samples plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    dim: usize,
    data: Vec<f64>,
    pub seed: u64,
    pub provenance: Provenance,
    pub sigma: Option<f64>,
    pub steps: Option<usize>,
}

impl SampleBatch {
    pub fn new(dim: usize, seed: u64, provenance: Provenance) -> Self {
        SampleBatch {
            dim,
            data: Vec::new(),
            seed,
            provenance,
            sigma: None,
            steps: None,
        }
    }

    pub fn from_rows(
        dim: usize,
        data: Vec<f64>,
        seed: u64,
        provenance: Provenance,
    ) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::dim("SampleBatch::from_rows", dim, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("data", "sample batch entries must be finite"));
        }
        Ok(SampleBatch {
            dim,
            data,
            seed,
            provenance,
            sigma: None,
            steps: None,
        })
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::dim("SampleBatch::push", self.dim, row.len()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("row", "sample batch entries must be finite"));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Coordinate `j` of every sample.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = alloc::vec![0.0; self.dim];
        for r in self.rows() {
            for (mj, v) in m.iter_mut().zip(r) {
                *mj += v;
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}
