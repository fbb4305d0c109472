use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};
use crate::scalar::Scalar;

pub const DEFAULT_BINS: usize = 201;

/// Equal-width histogram with counts and unit-area density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram<T> {
    pub bin_edges: Vec<T>,
    pub counts: Vec<u64>,
    pub density: Vec<T>,
}

impl<T: Scalar> Histogram<T> {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn n_values(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn centers(&self) -> Vec<T> {
        let half = T::lit(0.5);
        self.bin_edges.windows(2).map(|w| (w[0] + w[1]) * half).collect()
    }

    pub fn widths(&self) -> Vec<T> {
        self.bin_edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `sum(density * width)`; 1 up to rounding for any histogram built here.
    pub fn integral(&self) -> T {
        self.density.iter().zip(self.widths()).map(|(&d, w)| d * w).sum()
    }
}

/// Bins `values` into `n_bins` equal-width bins spanning `[min, max]`.
/// The maximum lands in the last bin.
pub fn histogram<T: Scalar>(values: &[T], n_bins: usize) -> Result<Histogram<T>> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if n_bins < 2 {
        return Err(MetricsError::TooFewBins(n_bins));
    }
    let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(MetricsError::NonFinite(i));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if !(range > T::zero()) {
        return Err(MetricsError::ZeroRange);
    }
    let nb = T::from_usize_lossy(n_bins);
    let width = range / nb;
    let mut counts = vec![0u64; n_bins];
    for &v in values {
        let idx = ((v - lo) / range * nb).floor().to_usize().unwrap_or(0).min(n_bins - 1);
        counts[idx] += 1;
    }
    let bin_edges: Vec<T> = (0..=n_bins)
        .map(|i| if i == n_bins { hi } else { lo + width * T::from_usize_lossy(i) })
        .collect();
    let total = T::from_usize_lossy(values.len());
    let density = counts
        .iter()
        .zip(bin_edges.windows(2))
        .map(|(&c, w)| T::from_u64(c).unwrap() / (total * (w[1] - w[0])))
        .collect();
    Ok(Histogram {
        bin_edges,
        counts,
        density,
    })
}
