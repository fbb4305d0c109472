use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};
use crate::scalar::Scalar;

/// Per-channel amplitude spectra at bins `k = 1..=N/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpectra<T> {
    /// `k * fs / N` for each retained bin.
    pub freqs: Vec<f64>,
    /// `n_channels x freqs.len()`.
    pub amplitudes: Array2<T>,
    pub n_samples: usize,
    pub sample_rate_hz: f64,
}

/// Cross-channel mean of the amplitude spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary<T> {
    pub freqs: Vec<f64>,
    pub avg_amplitude: Vec<T>,
    pub n_channels: usize,
    pub n_samples: usize,
}

impl<T: Scalar> SpectralSummary<T> {
    /// Lowest resolved frequency, the inverse of the record length.
    pub fn f_min(&self) -> f64 {
        self.freqs.first().copied().unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("freq_hz,avg_amplitude\n");
        for (f, a) in self.freqs.iter().zip(&self.avg_amplitude) {
            out.push_str(&format!("{f},{a}\n"));
        }
        out
    }
}

/// Unnormalized forward DFT magnitude of every row:
/// `|sum_n x_n exp(-2 pi i k n / N)|` for `k = 1..=N/2`.
pub fn channel_spectra<T: Scalar>(region: ArrayView2<'_, T>, sample_rate_hz: f64) -> Result<ChannelSpectra<T>> {
    let (channels, n) = region.dim();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    if channels == 0 {
        return Err(MetricsError::Empty);
    }
    if !(sample_rate_hz > 0.0) {
        return Err(MetricsError::BadSampleRate);
    }
    let half = n / 2;
    let fft = FftPlanner::<T>::new().plan_fft_forward(n);
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    let mut amplitudes = Array2::zeros((channels, half));
    for (row, mut out) in region.rows().into_iter().zip(amplitudes.rows_mut()) {
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            *b = Complex::new(v, T::zero());
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (o, c) in out.iter_mut().zip(&buf[1..=half]) {
            *o = c.norm();
        }
    }
    Ok(ChannelSpectra {
        freqs: (1..=half).map(|k| k as f64 * sample_rate_hz / n as f64).collect(),
        amplitudes,
        n_samples: n,
        sample_rate_hz,
    })
}

pub fn average_spectral_amplitude<T: Scalar>(spectra: &ChannelSpectra<T>) -> SpectralSummary<T> {
    let channels = spectra.amplitudes.nrows();
    let denom = T::from_usize_lossy(channels.max(1));
    let avg_amplitude = spectra
        .amplitudes
        .columns()
        .into_iter()
        .map(|col| col.iter().cloned().sum::<T>() / denom)
        .collect();
    SpectralSummary {
        freqs: spectra.freqs.clone(),
        avg_amplitude,
        n_channels: channels,
        n_samples: spectra.n_samples,
    }
}

/// Population standard deviation of all values in the region.
pub fn region_sigma<T: Scalar>(region: ArrayView2<'_, T>) -> T {
    let n = region.len();
    if n == 0 {
        return T::zero();
    }
    let count = T::from_usize_lossy(n);
    let mean = region.iter().cloned().sum::<T>() / count;
    let var = region.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
    var.sqrt()
}
