//! Segment and tile data model, the DASF segment container, grayscale tile
//! export and the directory-per-label training corpus.

mod corpus;
mod dasf;
mod tile;

pub use corpus::{export_labeled_tile, read_pgm, write_pgm, CorpusLabel, CorpusManifest, ManifestRecord};
pub use dasf::{read_segment, write_segment, DASF_MAGIC, DASF_VERSION};
pub use tile::{tile_grid, tile_segment, tile_to_gray, GrayTile, Tile, TileGrid};

use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite value at channel {channel}, sample {sample}")]
    NonFinite { channel: usize, sample: usize },
    #[error("invalid segment: {0}")]
    InvalidSegment(String),
    #[error("bad magic {found:?}, expected \"DASF\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: expected {expected} bytes of {what}, found {found}")]
    Truncated {
        what: &'static str,
        expected: u64,
        found: u64,
    },
    #[error("header/payload size mismatch: header describes {expected} payload bytes, file holds {found}")]
    SizeMismatch { expected: u64, found: u64 },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("tile size {tile} larger than segment ({channels} channels x {samples} samples)")]
    TileTooLarge {
        tile: usize,
        channels: usize,
        samples: usize,
    },
    #[error("invalid tiling: {0}")]
    InvalidTiling(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("malformed PGM {path}: {reason}")]
    BadPgm { path: PathBuf, reason: String },
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> StoreError {
    let path = path.into();
    move |source| StoreError::Io { path, source }
}

/// Acquisition metadata carried alongside the strain-rate matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub sample_rate_hz: f64,
    /// Fiber index of the first row.
    pub channel_start: i64,
    pub channel_spacing_m: f64,
    pub start_time_ns: i64,
}

impl Default for SegmentMeta {
    fn default() -> Self {
        Self {
            sample_rate_hz: 500.0,
            channel_start: 0,
            channel_spacing_m: 2.0,
            start_time_ns: 0,
        }
    }
}

/// Strain-rate recording: one row per channel, one column per time sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DasSegment {
    data: Array2<f32>,
    meta: SegmentMeta,
}

impl DasSegment {
    pub fn new(data: Array2<f32>, meta: SegmentMeta) -> Result<Self> {
        let (channels, samples) = data.dim();
        if channels == 0 || samples == 0 {
            return Err(StoreError::InvalidSegment(format!(
                "empty segment ({channels} x {samples})"
            )));
        }
        if !(meta.sample_rate_hz.is_finite() && meta.sample_rate_hz > 0.0) {
            return Err(StoreError::InvalidSegment(format!(
                "sample rate must be positive, got {}",
                meta.sample_rate_hz
            )));
        }
        if !(meta.channel_spacing_m.is_finite() && meta.channel_spacing_m > 0.0) {
            return Err(StoreError::InvalidSegment(format!(
                "channel spacing must be positive, got {}",
                meta.channel_spacing_m
            )));
        }
        check_finite(&data)?;
        Ok(Self { data, meta })
    }

    /// Zero-filled segment.
    pub fn zeros(channels: usize, samples: usize, meta: SegmentMeta) -> Result<Self> {
        Self::new(Array2::zeros((channels, samples)), meta)
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn meta(&self) -> &SegmentMeta {
        &self.meta
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.meta.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.meta.sample_rate_hz
    }

    /// Applies `f` to the data and re-validates finiteness.
    pub fn map_data(mut self, f: impl FnOnce(&mut Array2<f32>)) -> Result<Self> {
        f(&mut self.data);
        check_finite(&self.data)?;
        Ok(self)
    }

    pub fn into_parts(self) -> (Array2<f32>, SegmentMeta) {
        (self.data, self.meta)
    }
}

fn check_finite(data: &Array2<f32>) -> Result<()> {
    if let Some(((channel, sample), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(StoreError::NonFinite { channel, sample });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_bad_rate() {
        assert!(DasSegment::zeros(0, 5, SegmentMeta::default()).is_err());
        let meta = SegmentMeta {
            sample_rate_hz: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            DasSegment::zeros(1, 1, meta),
            Err(StoreError::InvalidSegment(_))
        ));
    }

    #[test]
    fn rejects_nan() {
        let mut a = Array2::zeros((2, 3));
        a[[1, 2]] = f32::NAN;
        let err = DasSegment::new(a, SegmentMeta::default()).unwrap_err();
        assert!(matches!(err, StoreError::NonFinite { channel: 1, sample: 2 }));
        assert!(err.to_string().contains("non-finite"));
    }
}
