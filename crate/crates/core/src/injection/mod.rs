//! Injection distribution learning from smart-meter data.
//!
//! Meters report energy accumulated over `T` fast intervals. A Gaussian
//! mixture is fitted to those slow readings by EM and then mapped to the
//! fast-interval mixture: means scale by `1/T`, variances go through the
//! autocovariance system of an AR model of the fast process.

mod ar;
mod gmm;
mod meter;

pub use ar::{build_autocovariance_system, downscale_mixture, downscale_variance, fit_ar_ls, ARModel};
pub use gmm::{fit_gmm_em, sample_mixture, EmOptions, GaussianMixture, GmmFit, DEFAULT_VARIANCE_FLOOR};
pub use meter::{learn_fast_mixture, read_meter_csv, write_meter_csv, MeterSeries};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("{samples} samples, at least {required} required")]
    TooFewSamples { samples: usize, required: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("AR model is not stationary (companion spectral radius {spectral_radius:.4})")]
    NonStationary { spectral_radius: f64 },
    #[error("ill-conditioned AR fit: {0}")]
    IllConditioned(String),
    #[error("I - A is singular{}", component_suffix(.component))]
    Singular { component: Option<usize> },
    #[error("non-positive fast variance {value}{}", component_suffix(.component))]
    NonPositiveVariance { component: Option<usize>, value: f64 },
    #[error("meter file: {0}")]
    Meter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn component_suffix(c: &Option<usize>) -> String {
    c.map(|i| format!(" for mixture component {i}")).unwrap_or_default()
}

impl LearnError {
    pub(crate) fn for_component(self, i: usize) -> Self {
        match self {
            LearnError::Singular { .. } => LearnError::Singular { component: Some(i) },
            LearnError::NonPositiveVariance { value, .. } => {
                LearnError::NonPositiveVariance { component: Some(i), value }
            }
            other => other,
        }
    }
}
