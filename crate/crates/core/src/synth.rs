//! Synthetic DAS scenes with per-tile ground truth.
//!
//! A scene is spectrally shaped background noise plus Ricker-wavelet events
//! with V-shaped moveout and exponential amplitude decay along the fiber,
//! optionally clipped to mimic interrogator saturation. Ground truth is
//! derived from the clean event field, not from the data itself.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{tile_grid, tile_segment, tile_to_gray, CorpusLabel, CorpusManifest, DasSegment, GrayTile, SegmentMeta, StoreError, TileGrid};

/// Frequency above which shaped noise rises linearly.
pub const NOISE_KNEE_HZ: f64 = 30.0;
/// Event energy must reach this multiple of the noise energy in a tile for the
/// tile to count as waves.
pub const WAVES_SNR_MARGIN: f64 = 2.0;
/// Tiles whose event energy stays below this fraction of the noise energy
/// count as pure noise; anything between this and the margin is ambiguous.
pub const NOISE_ENERGY_CEILING: f64 = 0.01;
/// Share of the tile's event energy the strongest event must carry for the
/// tile to be single-event (waves) rather than interfering.
pub const DOMINANT_EVENT_SHARE: f64 = 0.8;
/// Ricker support, in periods of the peak frequency, on each side.
const RICKER_SUPPORT_PERIODS: f64 = 1.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("noise sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("event peak frequency {freq} Hz is at or above Nyquist ({nyquist} Hz)")]
    AboveNyquist { freq: f64, nyquist: f64 },
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("insufficient {label} tiles: need {want}, found {have}")]
    Insufficient {
        label: CorpusLabel,
        want: usize,
        have: usize,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

/// A point source seen as a V in channel-time space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveEvent {
    /// Fiber channel index of the apex.
    pub apex_channel: i64,
    pub apex_time_s: f64,
    pub apparent_velocity_mps: f64,
    pub peak_frequency_hz: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub decay_per_m: f64,
}

impl WaveEvent {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidEvent(m));
        if !(self.apparent_velocity_mps.is_finite() && self.apparent_velocity_mps > 0.0) {
            return bad(format!("apparent velocity must be positive, got {}", self.apparent_velocity_mps));
        }
        if !(self.peak_frequency_hz > 2.5 && self.peak_frequency_hz < 40.0) {
            return bad(format!("peak frequency must lie in (2.5, 40) Hz, got {}", self.peak_frequency_hz));
        }
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return bad(format!("amplitude must be non-negative, got {}", self.amplitude));
        }
        if !(self.decay_per_m.is_finite() && self.decay_per_m >= 0.0) {
            return bad(format!("decay must be non-negative, got {}", self.decay_per_m));
        }
        if !self.apex_time_s.is_finite() {
            return bad("apex time must be finite".into());
        }
        Ok(())
    }
}

/// Ranges for the randomly placed events of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomEventRanges {
    pub velocity_mps: (f64, f64),
    pub peak_frequency_hz: (f64, f64),
    /// Amplitude range, sampled log-uniformly.
    pub amplitude: (f64, f64),
    pub decay_per_m: (f64, f64),
}

impl Default for RandomEventRanges {
    fn default() -> Self {
        Self {
            velocity_mps: (300.0, 1200.0),
            peak_frequency_hz: (6.0, 25.0),
            amplitude: (150.0, 800.0),
            decay_per_m: (0.0, 0.004),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_channels: usize,
    pub n_samples: usize,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
    #[serde(default = "default_spacing")]
    pub channel_spacing_m: f64,
    #[serde(default)]
    pub channel_start: i64,
    #[serde(default)]
    pub start_time_ns: i64,
    pub noise_sigma: f64,
    /// Amplitude gain per Hz above [`NOISE_KNEE_HZ`]; 0 gives white noise.
    #[serde(default)]
    pub noise_spectral_slope: f64,
    #[serde(default)]
    pub events: Vec<WaveEvent>,
    /// Samples beyond `+-clip` are clipped and their tiles marked saturated.
    #[serde(default)]
    pub saturation_clip: Option<f64>,
    /// Randomly placed events per second of record, on top of `events`.
    #[serde(default)]
    pub interference_density: f64,
    #[serde(default)]
    pub random_events: RandomEventRanges,
    pub seed: u64,
}

fn default_rate() -> f64 {
    500.0
}

fn default_spacing() -> f64 {
    2.0
}

impl SceneConfig {
    pub fn meta(&self) -> SegmentMeta {
        SegmentMeta {
            sample_rate_hz: self.sample_rate_hz,
            channel_start: self.channel_start,
            channel_spacing_m: self.channel_spacing_m,
            start_time_ns: self.start_time_ns,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples as f64 / self.sample_rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_owned()));
        if self.n_channels == 0 || self.n_samples == 0 {
            return bad("channel and sample counts must be positive");
        }
        if !(self.sample_rate_hz > 0.0 && self.channel_spacing_m > 0.0) {
            return bad("sample rate and channel spacing must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(SynthError::NonPositiveSigma(self.noise_sigma));
        }
        if !(self.noise_spectral_slope.is_finite() && self.noise_spectral_slope >= 0.0) {
            return bad("noise spectral slope must be non-negative");
        }
        if !(self.interference_density.is_finite() && self.interference_density >= 0.0) {
            return bad("interference density must be finite and non-negative");
        }
        if let Some(c) = self.saturation_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad("saturation clip must be positive");
            }
        }
        let r = &self.random_events;
        for (lo, hi) in [r.velocity_mps, r.peak_frequency_hz, r.amplitude, r.decay_per_m] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad("random event ranges must be finite with lo <= hi");
            }
        }
        if self.interference_density > 0.0 && (r.velocity_mps.0 <= 0.0 || r.amplitude.0 <= 0.0) {
            return bad("random event velocity and amplitude ranges must be positive");
        }
        Ok(())
    }
}

/// Ground-truth tile categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthLabel {
    Noise,
    Waves,
    Interfering,
    Saturated,
    Ambiguous,
}

impl TruthLabel {
    pub fn corpus_label(self) -> Option<CorpusLabel> {
        match self {
            TruthLabel::Noise => Some(CorpusLabel::Noise),
            TruthLabel::Waves => Some(CorpusLabel::Waves),
            _ => None,
        }
    }
}

/// Per-tile ground truth aligned with [`tile_segment`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMask {
    pub grid: TileGrid,
    pub labels: Vec<TruthLabel>,
    /// Event energy over noise energy, per tile.
    pub snr: Vec<f64>,
}

impl GroundTruthMask {
    pub fn get(&self, row: usize, col: usize) -> TruthLabel {
        self.labels[row * self.grid.cols + col]
    }

    pub fn count(&self, label: TruthLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Amplitude response of the noise shaping filter.
pub fn noise_shaping_gain(freq_hz: f64, slope: f64) -> f64 {
    1.0 + slope * (freq_hz - NOISE_KNEE_HZ).max(0.0)
}

/// Zero-mean Gaussian noise, shaped in the frequency domain by
/// [`noise_shaping_gain`] and scaled so its expected standard deviation is
/// `sigma`. Channels are independent.
pub fn gen_noise(shape: (usize, usize), sigma: f64, slope: f64, meta: SegmentMeta, seed: u64) -> Result<DasSegment> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(SynthError::NonPositiveSigma(sigma));
    }
    if !(slope.is_finite() && slope >= 0.0) {
        return Err(SynthError::InvalidConfig("noise spectral slope must be non-negative".into()));
    }
    let (channels, n) = shape;
    let mut data = Array2::<f32>::zeros(shape);
    if channels == 0 || n == 0 {
        return Ok(DasSegment::new(data, meta)?);
    }
    let gains: Vec<f64> = (0..n)
        .map(|k| {
            let k = k.min(n - k);
            noise_shaping_gain(k as f64 * meta.sample_rate_hz / n as f64, slope)
        })
        .collect();
    let power = gains.iter().map(|g| g * g).sum::<f64>() / n as f64;
    let scale = sigma / power.sqrt();

    let mut planner = FftPlanner::<f64>::new();
    let (fwd, inv) = (planner.plan_fft_forward(n), planner.plan_fft_inverse(n));
    let rows: Vec<Vec<f32>> = (0..channels)
        .into_par_iter()
        .map(|ch| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ch as u64);
            let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            if slope == 0.0 {
                return white.iter().map(|w| (w * sigma) as f32).collect();
            }
            let mut buf: Vec<Complex<f64>> = white.iter().map(|&w| Complex::new(w, 0.0)).collect();
            fwd.process(&mut buf);
            for (b, g) in buf.iter_mut().zip(&gains) {
                *b *= *g;
            }
            inv.process(&mut buf);
            let norm = scale / n as f64;
            buf.iter().map(|b| (b.re * norm) as f32).collect()
        })
        .collect();
    for (mut dst, src) in data.rows_mut().into_iter().zip(&rows) {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d = *s);
    }
    Ok(DasSegment::new(data, meta)?)
}

/// Ricker wavelet with unit peak at `tau = 0`.
pub fn ricker(peak_frequency_hz: f64, tau: f64) -> f64 {
    let a = (std::f64::consts::PI * peak_frequency_hz * tau).powi(2);
    (1.0 - 2.0 * a) * (-a).exp()
}

/// Calls `sink(row, sample, value)` for every non-negligible sample of the
/// event's wavefield over a `channels x samples` grid.
fn for_each_event_sample(event: &WaveEvent, meta: &SegmentMeta, channels: usize, samples: usize, mut sink: impl FnMut(usize, usize, f64)) {
    let fs = meta.sample_rate_hz;
    let half_width = RICKER_SUPPORT_PERIODS / event.peak_frequency_hz;
    for row in 0..channels {
        let channel = meta.channel_start + row as i64;
        let dist = (channel - event.apex_channel).unsigned_abs() as f64 * meta.channel_spacing_m;
        let amp = event.amplitude * (-event.decay_per_m * dist).exp();
        if amp == 0.0 {
            continue;
        }
        let arrival = event.apex_time_s + dist / event.apparent_velocity_mps;
        let first = ((arrival - half_width) * fs).ceil().max(0.0);
        let last = ((arrival + half_width) * fs).floor().min(samples as f64 - 1.0);
        if last < first {
            continue;
        }
        for s in first as usize..=last as usize {
            let tau = s as f64 / fs - arrival;
            sink(row, s, amp * ricker(event.peak_frequency_hz, tau));
        }
    }
}

fn check_event(event: &WaveEvent, segment_like: (&SegmentMeta, usize)) -> Result<()> {
    let (meta, samples) = segment_like;
    let nyquist = meta.sample_rate_hz / 2.0;
    if event.peak_frequency_hz >= nyquist {
        return Err(SynthError::AboveNyquist {
            freq: event.peak_frequency_hz,
            nyquist,
        });
    }
    event.validate()?;
    let duration = samples as f64 / meta.sample_rate_hz;
    if !(event.apex_time_s >= 0.0 && event.apex_time_s < duration) {
        return Err(SynthError::InvalidEvent(format!(
            "apex time {} s outside segment [0, {duration}) s",
            event.apex_time_s
        )));
    }
    Ok(())
}

/// Adds the event's wavefield: at distance `d` from the apex the channel
/// carries a Ricker wavelet centred at `apex_time + d / velocity` with
/// amplitude `amplitude * exp(-decay * d)`.
pub fn add_wave_event(segment: DasSegment, event: &WaveEvent) -> Result<DasSegment> {
    check_event(event, (segment.meta(), segment.n_samples()))?;
    if event.amplitude == 0.0 {
        return Ok(segment);
    }
    let meta = *segment.meta();
    let (channels, samples) = (segment.n_channels(), segment.n_samples());
    Ok(segment.map_data(|data| {
        for_each_event_sample(event, &meta, channels, samples, |r, s, v| {
            data[[r, s]] += v as f32;
        });
    })?)
}

/// Inclusive range of grid indices whose window `[i*stride, i*stride+tile)`
/// contains `pos`.
fn covering(pos: usize, tile: usize, stride: usize, count: usize) -> std::ops::Range<usize> {
    let lo = if pos + 1 > tile { (pos + 1 - tile).div_ceil(stride) } else { 0 };
    let hi = (pos / stride + 1).min(count);
    lo..hi.max(lo)
}

fn random_events(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<WaveEvent> {
    let n = (config.interference_density * config.duration_s()).round() as usize;
    let r = &config.random_events;
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
    (0..n)
        .map(|_| {
            let (alo, ahi) = r.amplitude;
            let amplitude = if ahi > alo { (rng.random_range(alo.ln()..ahi.ln())).exp() } else { alo };
            WaveEvent {
                apex_channel: config.channel_start + rng.random_range(0..config.n_channels) as i64,
                apex_time_s: rng.random_range(0.0..config.duration_s()),
                apparent_velocity_mps: uniform(rng, r.velocity_mps),
                peak_frequency_hz: uniform(rng, r.peak_frequency_hz),
                amplitude,
                decay_per_m: uniform(rng, r.decay_per_m),
            }
        })
        .collect()
}

/// All events of a scene: the configured ones followed by the random ones.
pub fn scene_events(config: &SceneConfig) -> Vec<WaveEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let mut events = config.events.clone();
    events.extend(random_events(config, &mut rng));
    events
}

/// Classifies a tile from its energies.
pub fn truth_from_energies(event_energies: &[f64], noise_energy: f64, clipped: bool) -> (TruthLabel, f64) {
    let total: f64 = event_energies.iter().sum();
    let snr = if noise_energy > 0.0 { total / noise_energy } else if total > 0.0 { f64::INFINITY } else { 0.0 };
    if clipped {
        return (TruthLabel::Saturated, snr);
    }
    let label = if snr < NOISE_ENERGY_CEILING {
        TruthLabel::Noise
    } else if snr >= WAVES_SNR_MARGIN {
        let strongest = event_energies.iter().cloned().fold(0.0, f64::max);
        if strongest >= DOMINANT_EVENT_SHARE * total {
            TruthLabel::Waves
        } else {
            TruthLabel::Interfering
        }
    } else {
        TruthLabel::Ambiguous
    };
    (label, snr)
}

/// Builds the scene and its per-tile ground truth.
///
/// A tile is `saturated` if any of its samples was clipped; otherwise, with
/// `snr` the summed per-event energy over the noise energy in the tile:
/// `noise` below [`NOISE_ENERGY_CEILING`], `ambiguous` below
/// [`WAVES_SNR_MARGIN`], else `waves` when one event carries at least
/// [`DOMINANT_EVENT_SHARE`] of the event energy and `interfering` when not.
pub fn gen_scene(config: &SceneConfig, tile_size: usize, stride: usize) -> Result<(DasSegment, GroundTruthMask)> {
    config.validate()?;
    let meta = config.meta();
    let (channels, samples) = (config.n_channels, config.n_samples);
    let grid = tile_grid(channels, samples, tile_size, stride)?;
    let events = scene_events(config);
    for e in &events {
        check_event(e, (&meta, samples))?;
    }

    let noise = gen_noise((channels, samples), config.noise_sigma, config.noise_spectral_slope, meta, config.seed)?;
    let (mut data, _) = noise.into_parts();

    let mut noise_energy = vec![0.0f64; grid.len()];
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let (c0, s0) = grid.origin(row, col);
            noise_energy[row * grid.cols + col] = data
                .slice(ndarray::s![c0..c0 + tile_size, s0..s0 + tile_size])
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum();
        }
    }

    let mut event_energy = vec![vec![0.0f64; events.len()]; grid.len()];
    for (k, e) in events.iter().enumerate() {
        if e.amplitude == 0.0 {
            continue;
        }
        for_each_event_sample(e, &meta, channels, samples, |r, s, v| {
            data[[r, s]] += v as f32;
            let e2 = v * v;
            for gr in covering(r, tile_size, stride, grid.rows) {
                for gc in covering(s, tile_size, stride, grid.cols) {
                    event_energy[gr * grid.cols + gc][k] += e2;
                }
            }
        });
    }

    let mut clipped = vec![false; grid.len()];
    if let Some(clip) = config.saturation_clip {
        let clip = clip as f32;
        for ((r, s), v) in data.indexed_iter_mut() {
            if v.abs() > clip {
                *v = v.signum() * clip;
                for gr in covering(r, tile_size, stride, grid.rows) {
                    for gc in covering(s, tile_size, stride, grid.cols) {
                        clipped[gr * grid.cols + gc] = true;
                    }
                }
            }
        }
    }

    let (labels, snr) = (0..grid.len())
        .map(|t| truth_from_energies(&event_energy[t], noise_energy[t], clipped[t]))
        .unzip();
    let segment = DasSegment::new(data, meta)?;
    Ok((segment, GroundTruthMask { grid, labels, snr }))
}

/// Exports a balanced noise/waves corpus from ground truth.
///
/// Each scene is tiled without overlap; tiles whose truth is neither noise
/// nor waves are skipped. Candidates are shuffled with `seed` and the first
/// `per_label` of each class are exported.
pub fn gen_labeled_corpus(configs: &[SceneConfig], tile_size: usize, out_root: impl AsRef<Path>, per_label: usize, seed: u64) -> Result<CorpusManifest> {
    let mut candidates: Vec<(GrayTile, CorpusLabel)> = Vec::new();
    for (i, config) in configs.iter().enumerate() {
        let (segment, mask) = gen_scene(config, tile_size, tile_size)?;
        let source = format!("scene{i}-seed{}", config.seed);
        for (tile, truth) in tile_segment(&segment, tile_size, tile_size)?.iter().zip(&mask.labels) {
            if let Some(label) = truth.corpus_label() {
                candidates.push((tile_to_gray(tile).with_source(source.clone()), label));
            }
        }
    }
    let selected = select_balanced(candidates, per_label, seed)?;
    let mut manifest = CorpusManifest::new(out_root.as_ref(), tile_size, seed);
    std::fs::create_dir_all(out_root.as_ref()).map_err(|source| {
        StoreError::Io {
            path: out_root.as_ref().to_owned(),
            source,
        }
    })?;
    for (gray, label) in &selected {
        manifest.export(gray, *label)?;
    }
    manifest.save()?;
    Ok(manifest)
}

/// Seeded shuffle, then the first `per_label` of each class in shuffled order.
pub(crate) fn select_balanced<X>(mut candidates: Vec<(X, CorpusLabel)>, per_label: usize, seed: u64) -> Result<Vec<(X, CorpusLabel)>> {
    use rand::seq::SliceRandom;
    for label in CorpusLabel::ALL {
        let have = candidates.iter().filter(|(_, l)| *l == label).count();
        if have < per_label {
            return Err(SynthError::Insufficient {
                label,
                want: per_label,
                have,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let mut taken = [0usize; 2];
    Ok(candidates
        .into_iter()
        .filter(|(_, l)| {
            let t = &mut taken[l.index()];
            *t += 1;
            *t <= per_label
        })
        .collect())
}
