//! Exploratory statistics on strain-rate regions: amplitude histograms,
//! single/double Gaussian fits scored by reduced chi-square, per-channel
//! amplitude spectra and their cross-channel average.

mod fit;
mod histogram;
mod spectra;

pub use fit::{fit_gaussians, fit_gaussians_xy, gaussian_sum, FitOptions, GaussianComponent, GaussianFitReport};
pub use histogram::{histogram, Histogram, DEFAULT_BINS};
pub use spectra::{average_spectral_amplitude, channel_spectra, region_sigma, ChannelSpectra, SpectralSummary};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("constant region: histogram range is zero")]
    ZeroRange,
    #[error("length mismatch: {0} observations vs {1} model values")]
    LengthMismatch(usize, usize),
    #[error("non-positive degrees of freedom ({n_points} points, {n_params} parameters)")]
    NoDegreesOfFreedom { n_points: usize, n_params: usize },
    #[error("unsupported number of components {0} (expected 1 or 2)")]
    Components(usize),
    #[error("invalid initial guess: {0}")]
    BadInit(String),
    #[error("need at least 2 samples per channel, got {0}")]
    TooFewSamples(usize),
    #[error("sample rate must be positive")]
    BadSampleRate,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Unweighted reduced chi-square, `sum((y - f)^2) / (len - n_params)`.
pub fn reduced_chi_square<T: Scalar>(y: &[T], f: &[T], n_params: usize) -> Result<T> {
    if y.len() != f.len() {
        return Err(MetricsError::LengthMismatch(y.len(), f.len()));
    }
    if y.len() <= n_params {
        return Err(MetricsError::NoDegreesOfFreedom {
            n_points: y.len(),
            n_params,
        });
    }
    let rss: T = y.iter().zip(f).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(rss / T::from_usize_lossy(y.len() - n_params))
}
