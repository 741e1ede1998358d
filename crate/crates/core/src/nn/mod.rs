//! Hand-differentiated MLPs for the denoisers, the discriminator and the
//! uncertainty-weighting network.
//!
//! Every network stores its parameters in one flat `Vec<f64>`; layers are
//! views into it described by [`Dense`]. That keeps Adam, EMA, gradient
//! accumulation and checkpointing uniform across network types.

use alloc::string::String;
use alloc::vec::Vec;

mod adam;
mod denoiser;
mod discriminator;
mod layers;
mod uncertainty;

pub mod fd;

pub use adam::{AdamState, EmaState};
pub use denoiser::{generator_input, DenoiserArch, DenoiserCache, MlpDenoiser};
pub use discriminator::{log_sigmoid, DiscCache, Discriminator, LOGIT_CLAMP};
pub use layers::{mp_sum, noise_features, silu, silu_grad, Dense, Precond, NOISE_FEATURES};
pub use uncertainty::{UncertaintyCache, UncertaintyNet};

/// A named tensor inside a network's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub trait Parameterized {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn tensors(&self) -> Vec<TensorInfo>;

    fn n_params(&self) -> usize {
        self.params().len()
    }
}

/// Fails with the name of the first tensor holding a non-finite gradient.
pub fn check_finite_grad<N: Parameterized + ?Sized>(net: &N, grad: &[f64]) -> crate::Result<()> {
    if grad.iter().all(|g| g.is_finite()) {
        return Ok(());
    }
    for t in net.tensors() {
        if grad[t.offset..t.offset + t.len()]
            .iter()
            .any(|g| !g.is_finite())
        {
            return Err(crate::Error::NonFiniteGradient { layer: t.name });
        }
    }
    Err(crate::Error::NonFiniteGradient {
        layer: String::from("<unknown>"),
    })
}
