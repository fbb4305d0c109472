//! Rule-based tile labeling from amplitude spread and average spectrum.
//!
//! Decision order for a tile:
//! 1. `Saturated` when the region sigma exceeds `saturation_sigma`;
//! 2. `Noise` when the largest average spectral amplitude below
//!    `split_freq_hz` is smaller than the smallest one at or above it;
//! 3. `Waves` when that largest low-frequency amplitude is at least
//!    `waves_ratio` times the mean amplitude over `[split, Nyquist]`;
//! 4. `Ambiguous` otherwise.
//!
//! A bin belongs to the low band when its centre frequency is strictly below
//! the split.

use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{average_spectral_amplitude, channel_spectra, region_sigma, MetricsError};
use crate::store::{tile_segment, tile_to_gray, CorpusLabel, CorpusManifest, DasSegment, StoreError};

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("invalid criteria: {0}")]
    InvalidCriteria(String),
    #[error("tile has no spectral bins {0} the split frequency")]
    EmptyBand(&'static str),
    #[error("target unreachable: {}", shortfall_message(.0))]
    Shortfall(Vec<(CorpusLabel, usize, usize)>),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn shortfall_message(items: &[(CorpusLabel, usize, usize)]) -> String {
    items
        .iter()
        .map(|(l, have, want)| format!("insufficient {l} tiles (found {have}, need {want})"))
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T, E = LabelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelCriteria {
    pub split_freq_hz: f64,
    pub waves_ratio: f64,
    pub saturation_sigma: f64,
    /// Typical sigma of pure noise; informational, not part of the decision.
    pub noise_sigma_hint: f64,
}

impl Default for LabelCriteria {
    fn default() -> Self {
        Self {
            split_freq_hz: 40.0,
            waves_ratio: 2.0,
            saturation_sigma: 1000.0,
            noise_sigma_hint: 200.0,
        }
    }
}

impl LabelCriteria {
    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        let nyquist = sample_rate_hz / 2.0;
        let bad = |m: String| Err(LabelError::InvalidCriteria(m));
        if !(self.split_freq_hz > 0.0 && self.split_freq_hz < nyquist) {
            return bad(format!("split frequency {} must lie in (0, {nyquist})", self.split_freq_hz));
        }
        if !(self.waves_ratio > 1.0) {
            return bad(format!("waves ratio must exceed 1, got {}", self.waves_ratio));
        }
        if !(self.noise_sigma_hint > 0.0 && self.saturation_sigma > self.noise_sigma_hint) {
            return bad("need saturation_sigma > noise_sigma_hint > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelCategory {
    Noise,
    Waves,
    Saturated,
    Ambiguous,
}

impl LabelCategory {
    pub fn corpus_label(self) -> Option<CorpusLabel> {
        match self {
            LabelCategory::Noise => Some(CorpusLabel::Noise),
            LabelCategory::Waves => Some(CorpusLabel::Waves),
            _ => None,
        }
    }
}

/// Quantities the decision is made from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelDiagnostics {
    pub region_sigma: f64,
    pub max_below: f64,
    pub min_above: f64,
    pub mean_above: f64,
}

impl LabelDiagnostics {
    pub fn decide(&self, criteria: &LabelCriteria) -> LabelCategory {
        if self.region_sigma > criteria.saturation_sigma {
            LabelCategory::Saturated
        } else if self.max_below < self.min_above {
            LabelCategory::Noise
        } else if self.max_below >= criteria.waves_ratio * self.mean_above {
            LabelCategory::Waves
        } else {
            LabelCategory::Ambiguous
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileLabel {
    pub category: LabelCategory,
    pub diagnostics: LabelDiagnostics,
}

/// Labels one tile (`channels x samples`).
pub fn classify_tile(tile: ArrayView2<'_, f32>, criteria: &LabelCriteria, sample_rate_hz: f64) -> Result<TileLabel> {
    criteria.validate(sample_rate_hz)?;
    let region = tile.mapv(f64::from);
    let spectra = channel_spectra(region.view(), sample_rate_hz)?;
    let summary = average_spectral_amplitude(&spectra);

    let (mut max_below, mut min_above, mut sum_above, mut n_below, mut n_above) = (f64::NEG_INFINITY, f64::INFINITY, 0.0, 0usize, 0usize);
    for (&f, &a) in summary.freqs.iter().zip(&summary.avg_amplitude) {
        if f < criteria.split_freq_hz {
            max_below = max_below.max(a);
            n_below += 1;
        } else {
            min_above = min_above.min(a);
            sum_above += a;
            n_above += 1;
        }
    }
    if n_below == 0 {
        return Err(LabelError::EmptyBand("below"));
    }
    if n_above == 0 {
        return Err(LabelError::EmptyBand("at or above"));
    }
    let diagnostics = LabelDiagnostics {
        region_sigma: region_sigma(region.view()),
        max_below,
        min_above,
        mean_above: sum_above / n_above as f64,
    };
    Ok(TileLabel {
        category: diagnostics.decide(criteria),
        diagnostics,
    })
}

/// Labels every tile of a segment, in [`tile_segment`] order.
pub fn label_segment(segment: &DasSegment, criteria: &LabelCriteria, tile_size: usize, stride: usize) -> Result<Vec<TileLabel>> {
    let tiles = tile_segment(segment, tile_size, stride)?;
    tiles
        .par_iter()
        .map(|t| classify_tile(t.values, criteria, segment.sample_rate_hz()))
        .collect()
}

/// Builds a balanced noise/waves corpus from labeled tiles.
///
/// Every segment is cut into non-overlapping tiles; the visiting order is a
/// seeded shuffle fixed before the tiles are classified in parallel.
/// Saturated and ambiguous tiles are discarded, and the first
/// `per_label_target` noise and waves tiles in visiting order are exported.
/// `sources` pairs each segment with a name that keeps file names unique.
pub fn build_training_set(
    sources: &[(String, DasSegment)],
    criteria: &LabelCriteria,
    tile_size: usize,
    out_root: impl AsRef<Path>,
    per_label_target: usize,
    seed: u64,
) -> Result<CorpusManifest> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let mut tiles = Vec::new();
    for (i, (_, segment)) in sources.iter().enumerate() {
        criteria.validate(segment.sample_rate_hz())?;
        for tile in tile_segment(segment, tile_size, tile_size)? {
            tiles.push((i, tile));
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    tiles.shuffle(&mut rng);

    let labels: Vec<LabelCategory> = tiles
        .par_iter()
        .map(|(i, t)| classify_tile(t.values, criteria, sources[*i].1.sample_rate_hz()).map(|l| l.category))
        .collect::<Result<_>>()?;

    let mut picked: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (k, cat) in labels.iter().enumerate() {
        if let Some(l) = cat.corpus_label() {
            if picked[l.index()].len() < per_label_target {
                picked[l.index()].push(k);
            }
        }
    }
    let short: Vec<_> = CorpusLabel::ALL
        .iter()
        .filter(|l| picked[l.index()].len() < per_label_target)
        .map(|&l| (l, picked[l.index()].len(), per_label_target))
        .collect();
    if !short.is_empty() {
        return Err(LabelError::Shortfall(short));
    }

    let out_root = out_root.as_ref();
    std::fs::create_dir_all(out_root).map_err(|source| StoreError::Io {
        path: out_root.to_owned(),
        source,
    })?;
    let mut order: Vec<usize> = picked.concat();
    order.sort_unstable();
    let mut manifest = CorpusManifest::new(out_root, tile_size, seed);
    for k in order {
        let (i, tile) = &tiles[k];
        let label = labels[k].corpus_label().expect("picked tiles are noise or waves");
        let gray = tile_to_gray(tile).with_source(sources[*i].0.clone());
        manifest.export(&gray, label)?;
    }
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::SegmentMeta;
    use crate::synth::{add_wave_event, gen_noise, WaveEvent};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn meta() -> SegmentMeta {
        SegmentMeta::default()
    }

    fn blue_tile(seed: u64) -> DasSegment {
        gen_noise((200, 200), 100.0, 1.0, meta(), seed).unwrap()
    }

    fn wave_tile(seed: u64) -> DasSegment {
        let noise = gen_noise((200, 200), 20.0, 1.0, meta(), seed).unwrap();
        add_wave_event(
            noise,
            &WaveEvent {
                apex_channel: 100,
                apex_time_s: 0.15,
                apparent_velocity_mps: 2000.0,
                peak_frequency_hz: 15.0,
                amplitude: 300.0,
                decay_per_m: 0.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn high_sigma_is_saturated() {
        let seg = gen_noise((200, 200), 1500.0, 0.0, meta(), 1).unwrap();
        let l = classify_tile(seg.data().view(), &LabelCriteria::default(), 500.0).unwrap();
        assert!(l.diagnostics.region_sigma > 1000.0);
        assert_eq!(l.category, LabelCategory::Saturated);
    }

    #[test]
    fn blue_noise_is_noise() {
        for seed in 0..5 {
            let l = classify_tile(blue_tile(seed).data().view(), &LabelCriteria::default(), 500.0).unwrap();
            assert_eq!(l.category, LabelCategory::Noise, "{:?}", l.diagnostics);
        }
    }

    #[test]
    fn strictly_increasing_spectrum_is_noise() {
        // A sum of sinusoids with amplitude rising in frequency.
        let n = 200;
        let x = Array2::from_shape_fn((4, n), |(_, j)| {
            (1..=100).map(|k| k as f64 * (2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64).cos()).sum::<f64>() as f32
        });
        let l = classify_tile(x.view(), &LabelCriteria::default(), 500.0).unwrap();
        assert_eq!(l.category, LabelCategory::Noise);
    }

    #[test]
    fn ricker_over_weak_noise_is_waves_and_matches_recomputation() {
        let seg = wave_tile(3);
        let l = classify_tile(seg.data().view(), &LabelCriteria::default(), 500.0).unwrap();
        assert_eq!(l.category, LabelCategory::Waves, "{:?}", l.diagnostics);

        // Recompute rule (3) directly from the metrics outputs.
        let region = seg.data().mapv(f64::from);
        let avg = average_spectral_amplitude(&channel_spectra(region.view(), 500.0).unwrap());
        let below: Vec<f64> = avg.freqs.iter().zip(&avg.avg_amplitude).filter(|(f, _)| **f < 40.0).map(|(_, a)| *a).collect();
        let above: Vec<f64> = avg.freqs.iter().zip(&avg.avg_amplitude).filter(|(f, _)| **f >= 40.0).map(|(_, a)| *a).collect();
        let max_below = below.iter().cloned().fold(f64::MIN, f64::max);
        let mean_above = above.iter().sum::<f64>() / above.len() as f64;
        assert_eq!(below.len(), 15);
        assert_eq!(above.len(), 85);
        assert!(max_below >= 2.0 * mean_above);
        assert_eq!(l.diagnostics.max_below, max_below);
    }

    #[test]
    fn diagnostics_reproduce_decision() {
        let c = LabelCriteria::default();
        for seg in [blue_tile(9), wave_tile(9)] {
            let l = classify_tile(seg.data().view(), &c, 500.0).unwrap();
            assert_eq!(l.diagnostics.decide(&c), l.category);
        }
    }

    #[test]
    fn ambiguous_when_neither_rule_fires() {
        let d = LabelDiagnostics {
            region_sigma: 10.0,
            max_below: 3.0,
            min_above: 2.0,
            mean_above: 2.0,
        };
        assert_eq!(d.decide(&LabelCriteria::default()), LabelCategory::Ambiguous);
    }

    #[test]
    fn criteria_validation() {
        let c = LabelCriteria {
            split_freq_hz: 260.0,
            ..Default::default()
        };
        assert!(c.validate(500.0).is_err());
        let c = LabelCriteria {
            waves_ratio: 1.0,
            ..Default::default()
        };
        assert!(c.validate(500.0).is_err());
        let c = LabelCriteria {
            saturation_sigma: 100.0,
            ..Default::default()
        };
        assert!(c.validate(500.0).is_err());
        let parsed: LabelCriteria = serde_json::from_str(r#"{"waves_ratio": 3.0}"#).unwrap();
        assert_eq!(parsed.split_freq_hz, 40.0);
        assert_eq!(parsed.waves_ratio, 3.0);
    }

    #[test]
    fn short_tiles_lack_low_band() {
        let x = Array2::<f32>::from_shape_fn((2, 8), |(i, j)| (i + j) as f32);
        assert!(matches!(
            classify_tile(x.view(), &LabelCriteria::default(), 500.0),
            Err(LabelError::EmptyBand("below"))
        ));
    }

    #[test]
    fn all_saturated_input_is_short_on_both_classes() {
        let seg = gen_noise((200, 400), 3000.0, 0.0, meta(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = build_training_set(&[("loud".into(), seg)], &LabelCriteria::default(), 200, dir.path(), 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("insufficient noise tiles") && msg.contains("insufficient waves tiles"), "{msg}");
    }

    #[test]
    fn balanced_export() {
        let mut sources = Vec::new();
        for seed in 0..3 {
            sources.push((format!("noise{seed}"), blue_tile(seed)));
            sources.push((format!("wave{seed}"), wave_tile(seed)));
        }
        let dir = tempfile::tempdir().unwrap();
        let m = build_training_set(&sources, &LabelCriteria::default(), 200, dir.path(), 2, 1).unwrap();
        assert_eq!(m.count(CorpusLabel::Noise), 2);
        assert_eq!(m.count(CorpusLabel::Waves), 2);
        m.validate().unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn noise_waves_decision_invariant_under_positive_scaling(seed in 0u64..1000, wave in any::<bool>(), a in 0.01f32..100.0) {
            let seg = if wave { wave_tile(seed) } else { blue_tile(seed) };
            let c = LabelCriteria { saturation_sigma: 1e30, ..Default::default() };
            let base = classify_tile(seg.data().view(), &c, 500.0).unwrap();
            let scaled = seg.data().mapv(|v| v * a);
            let l = classify_tile(scaled.view(), &c, 500.0).unwrap();
            prop_assert_eq!(l.category, base.category);
        }
    }
}
