//! Tiled inference: probability maps, corpus scans and daily curves.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{Model, NetError};
use crate::scalar::Scalar;
use crate::store::{read_segment, tile_grid, tile_segment, tile_to_gray, write_pgm, DasSegment, StoreError, TileGrid};

/// Tiles sent through the network at once.
const INFER_CHUNK: usize = 256;

/// Default smoothing width, in downsampled points.
pub const DEFAULT_KERNEL_SIGMA: f64 = 6.0;
pub const DEFAULT_DOWNSAMPLE: usize = 10;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("model expects {model}x{model} tiles, got tile size {tile}")]
    TileSizeMismatch { model: usize, tile: usize },
    #[error("stride {stride} outside 1..={tile}")]
    InvalidStride { stride: usize, tile: usize },
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = InferError> = std::result::Result<T, E>;

/// Per-tile waves probabilities laid out on the tile grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMap {
    pub grid: TileGrid,
    pub values: Vec<f64>,
    pub source: Option<String>,
}

impl ProbabilityMap {
    pub fn tile_size(&self) -> usize {
        self.grid.tile_size
    }

    pub fn stride(&self) -> usize {
        self.grid.stride
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.cols + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `tile_row,tile_col,p_waves` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tile_row,tile_col,p_waves\n");
        for row in 0..self.grid.rows {
            for col in 0..self.grid.cols {
                out.push_str(&format!("{row},{col},{}\n", self.get(row, col)));
            }
        }
        out
    }

    /// Gray levels `round(255 p)`, one pixel per tile.
    pub fn heatmap_pixels(&self) -> Vec<u8> {
        self.values.iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn write_heatmap(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pgm(path, self.grid.cols, self.grid.rows, &self.heatmap_pixels())?;
        Ok(())
    }
}

fn check_model<T: Scalar>(model: &Model<T>, tile_size: usize) -> Result<()> {
    let c = model.config();
    if c.input_size != tile_size {
        return Err(InferError::TileSizeMismatch {
            model: c.input_size,
            tile: tile_size,
        });
    }
    if c.in_channels != 1 {
        return Err(InferError::InvalidInput(format!("model has {} input channels, tiles have 1", c.in_channels)));
    }
    Ok(())
}

/// Grayscale-normalized tiles of a segment as a `[n, 1, S, S]` batch, in
/// tile order.
pub fn inference_batch<T: Scalar>(segment: &DasSegment, tile_size: usize, stride: usize) -> Result<Array4<T>> {
    let tiles = tile_segment(segment, tile_size, stride)?;
    let per = tile_size * tile_size;
    let mut data = vec![T::zero(); tiles.len() * per];
    for (t, out) in tiles.iter().zip(data.chunks_exact_mut(per)) {
        tile_to_gray(t).write_unit(out);
    }
    Ok(Array4::from_shape_vec((tiles.len(), 1, tile_size, tile_size), data).expect("batch shape"))
}

/// Probability map of a segment, using the same grayscale transform as
/// corpus export.
pub fn infer_segment<T: Scalar>(model: &Model<T>, segment: &DasSegment, tile_size: usize, stride: usize) -> Result<ProbabilityMap> {
    check_model(model, tile_size)?;
    let grid = tile_grid(segment.n_channels(), segment.n_samples(), tile_size, stride)?;
    let tiles = tile_segment(segment, tile_size, stride)?;
    let per = tile_size * tile_size;
    let mut buf = vec![T::zero(); INFER_CHUNK.min(tiles.len()) * per];
    let mut values = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(INFER_CHUNK) {
        let data = &mut buf[..chunk.len() * per];
        for (t, out) in chunk.iter().zip(data.chunks_exact_mut(per)) {
            tile_to_gray(t).write_unit(out);
        }
        values.extend(model.predict_proba_flat(data, chunk.len())?.into_iter().map(|p| p.to_f64_lossy()));
    }
    Ok(ProbabilityMap { grid, values, source: None })
}

/// Dense map from a 50x50 model with windows moved by `stride` in both
/// dimensions. Overlapping windows are reported as-is, without pooling.
pub fn infer_overlapping<T: Scalar>(model: &Model<T>, segment: &DasSegment, stride: usize) -> Result<ProbabilityMap> {
    const SMALL_TILE: usize = 50;
    check_model(model, SMALL_TILE)?;
    if !(1..=SMALL_TILE).contains(&stride) {
        return Err(InferError::InvalidStride { stride, tile: SMALL_TILE });
    }
    infer_segment(model, segment, SMALL_TILE, stride)
}

/// One file's scan result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub path: PathBuf,
    pub mean_p: Option<f64>,
    pub n_tiles: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanTable {
    pub rows: Vec<ScanRow>,
}

impl ScanTable {
    /// Means of the files that were read, in input order.
    pub fn means(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.mean_p).collect()
    }

    pub fn errors(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    /// `path,mean_p,n_tiles,error` rows; missing values are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,mean_p,n_tiles,error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(&r.path.display().to_string()),
                r.mean_p.map(|m| m.to_string()).unwrap_or_default(),
                r.n_tiles,
                csv_field(r.error.as_deref().unwrap_or(""))
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn scan_file<T: Scalar>(model: &Model<T>, path: &Path, tile_size: usize, stride: usize) -> ScanRow {
    let result = read_segment(path)
        .map_err(InferError::from)
        .and_then(|seg| infer_segment(model, &seg, tile_size, stride));
    match result {
        Ok(map) => ScanRow {
            path: path.to_owned(),
            mean_p: Some(map.mean()),
            n_tiles: map.values.len(),
            error: None,
        },
        Err(e) => ScanRow {
            path: path.to_owned(),
            mean_p: None,
            n_tiles: 0,
            error: Some(e.to_string()),
        },
    }
}

/// Mean waves probability per file, computed by `n_workers` threads that each
/// own a copy of the model. Rows follow input order; failures become error
/// rows.
pub fn scan_corpus<T: Scalar>(model: &Model<T>, files: &[PathBuf], tile_size: usize, stride: usize, n_workers: usize) -> Result<ScanTable> {
    check_model(model, tile_size)?;
    if n_workers == 0 {
        return Err(InferError::InvalidInput("worker count must be positive".into()));
    }
    tile_grid(tile_size, tile_size, tile_size, stride)?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<ScanRow>>> = Mutex::new(vec![None; files.len()]);
    std::thread::scope(|s| {
        for _ in 0..n_workers.min(files.len().max(1)) {
            let worker_model = model.clone();
            let (next, slots) = (&next, &slots);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(path) = files.get(i) else { break };
                let row = scan_file(&worker_model, path, tile_size, stride);
                slots.lock().unwrap()[i] = Some(row);
            });
        }
    });
    let rows = slots.into_inner().unwrap().into_iter().map(|r| r.expect("every file scanned")).collect();
    Ok(ScanTable { rows })
}

/// Per-file means downsampled and smoothed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyCurve {
    pub raw: Vec<f64>,
    /// Block means of `raw`, the last block possibly partial.
    pub downsampled: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub factor: usize,
    pub kernel_sigma: f64,
}

impl DailyCurve {
    /// `index,raw_mean,smoothed` rows over the downsampled points.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,raw_mean,smoothed\n");
        for (i, (r, s)) in self.downsampled.iter().zip(&self.smoothed).enumerate() {
            out.push_str(&format!("{i},{r},{s}\n"));
        }
        out
    }
}

/// Normalized Gaussian taps over `[-ceil(4 sigma), ceil(4 sigma)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Maps an out-of-range index by mirror reflection including the edge
/// sample (`d c b a | a b c d | d c b a`), repeating as needed.
fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

/// Convolution with [`gaussian_kernel`] under reflect padding.
pub fn gaussian_smooth(x: &[f64], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    (0..x.len() as i64)
        .map(|i| kernel.iter().enumerate().map(|(k, w)| w * x[reflect_index(i + k as i64 - radius, x.len())]).sum())
        .collect()
}

/// Block-mean downsampling by `factor` followed by Gaussian smoothing.
pub fn daily_curve(values: &[f64], factor: usize, kernel_sigma: f64) -> Result<DailyCurve> {
    if factor < 1 {
        return Err(InferError::InvalidInput("downsample factor must be at least 1".into()));
    }
    if values.is_empty() {
        return Err(InferError::InvalidInput("empty series".into()));
    }
    if !(kernel_sigma >= 0.0 && kernel_sigma.is_finite()) {
        return Err(InferError::InvalidInput(format!("kernel sigma {kernel_sigma} must be finite and non-negative")));
    }
    let downsampled: Vec<f64> = values.chunks(factor).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let smoothed = gaussian_smooth(&downsampled, kernel_sigma);
    Ok(DailyCurve {
        raw: values.to_vec(),
        downsampled,
        smoothed,
        factor,
        kernel_sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_model, ModelConfig};
    use crate::store::{write_segment, SegmentMeta};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn small_model(input: usize) -> Model<f32> {
        build_model(&ModelConfig {
            stage_widths: [2, 4, 8],
            input_size: input,
            ..ModelConfig::new(8, input, 1)
        })
        .unwrap()
    }

    fn segment(channels: usize, samples: usize, seed: u64) -> DasSegment {
        let data = Array2::from_shape_fn((channels, samples), |(c, s)| {
            (((c * 31 + s * 17) as u64 ^ seed).wrapping_mul(2654435761) % 1000) as f32 - 500.0
        });
        DasSegment::new(data, SegmentMeta::default()).unwrap()
    }

    #[test]
    fn field_tiling_batch_shape() {
        let seg = segment(200, 30000, 0);
        let batch = inference_batch::<f32>(&seg, 200, 200).unwrap();
        assert_eq!(batch.shape(), &[150, 1, 200, 200]);
    }

    #[test]
    fn map_matches_tile_grid_and_batch_prediction() {
        let model = small_model(10);
        let seg = segment(25, 47, 3);
        let map = infer_segment(&model, &seg, 10, 5).unwrap();
        assert_eq!((map.grid.rows, map.grid.cols), (4, 8));
        let batch = inference_batch::<f32>(&seg, 10, 5).unwrap();
        let expect = model.predict_proba(batch.view()).unwrap();
        assert_eq!(map.values, expect.iter().map(|&p| p as f64).collect::<Vec<_>>());
        assert!(map.values.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn size_and_stride_errors() {
        let seg = segment(60, 120, 0);
        assert!(matches!(
            infer_segment(&small_model(10), &seg, 20, 20),
            Err(InferError::TileSizeMismatch { model: 10, tile: 20 })
        ));
        let m50 = small_model(50);
        assert!(matches!(infer_overlapping(&m50, &seg, 0), Err(InferError::InvalidStride { .. })));
        assert!(matches!(infer_overlapping(&m50, &seg, 51), Err(InferError::InvalidStride { .. })));
        assert!(matches!(infer_overlapping(&small_model(10), &seg, 5), Err(InferError::TileSizeMismatch { .. })));
    }

    #[test]
    fn overlapping_grid_counts() {
        let m50 = small_model(50);
        let seg = segment(200, 400, 1);
        let base = infer_overlapping(&m50, &seg, 50).unwrap();
        assert_eq!((base.grid.rows, base.grid.cols), (4, 8));
        assert_eq!(base, infer_segment(&m50, &seg, 50, 50).unwrap());
        let dense = infer_overlapping(&m50, &seg, 25).unwrap();
        assert_eq!((dense.grid.rows, dense.grid.cols), (7, 15));
        // Windows on the coarse lattice are the same windows.
        assert_eq!(dense.get(2, 4), base.get(1, 2));
    }

    #[test]
    fn csv_and_heatmap() {
        let map = ProbabilityMap {
            grid: tile_grid(2, 4, 2, 2).unwrap(),
            values: vec![0.0, 0.5],
            source: None,
        };
        assert_eq!(map.to_csv(), "tile_row,tile_col,p_waves\n0,0,0\n0,1,0.5\n");
        assert_eq!(map.heatmap_pixels(), vec![0, 128]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.pgm");
        map.write_heatmap(&p).unwrap();
        assert_eq!(crate::store::read_pgm(&p).unwrap(), (2, 1, vec![0, 128]));
    }

    #[test]
    fn scan_isolates_bad_files_and_ignores_worker_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut files = Vec::new();
        for i in 0..10 {
            let p = dir.path().join(format!("f{i}.dasf"));
            if i == 4 {
                std::fs::write(&p, b"not a segment").unwrap();
            } else {
                write_segment(&segment(20, 30 + i, i as u64), &p).unwrap();
            }
            files.push(p);
        }
        let model = small_model(10);
        let one = scan_corpus(&model, &files, 10, 10, 1).unwrap();
        assert_eq!(one.means().len(), 9);
        assert_eq!(one.errors(), 1);
        assert!(one.rows[4].error.is_some() && one.rows[4].mean_p.is_none());
        for w in [2, 3, 16] {
            assert_eq!(scan_corpus(&model, &files, 10, 10, w).unwrap(), one);
        }
        let direct = infer_segment(&model, &read_segment(&files[0]).unwrap(), 10, 10).unwrap();
        assert_eq!(one.rows[0].mean_p, Some(direct.mean()));
        assert_eq!(one.rows[0].n_tiles, 6);
        let bad_line = one.to_csv().lines().nth(5).unwrap().to_owned();
        assert!(bad_line.starts_with(&format!("{},,0,", files[4].display())), "{bad_line}");
    }

    #[test]
    fn csv_fields_are_quoted() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"x\""), "\"say \"\"x\"\"\"");
        assert_eq!(csv_field("plain"), "plain");
    }

    #[test]
    fn reflect_padding_mirrors_edges() {
        let n = 4;
        let got: Vec<usize> = (-5..9).map(|i| reflect_index(i, n)).collect();
        assert_eq!(got, vec![3, 3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0, 0]);
        assert_eq!(reflect_index(0, 1), 0);
        assert_eq!(reflect_index(-7, 1), 0);
    }

    #[test]
    fn kernel_shape() {
        let k = gaussian_kernel(6.0);
        assert_eq!(k.len(), 49);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k[0], k[48]);
        assert!(k[24] > k[23]);
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn daily_curve_lengths_and_impulse() {
        let c = daily_curve(&vec![0.25; 14_400], 10, 6.0).unwrap();
        assert_eq!(c.smoothed.len(), 1440);
        assert!(c.smoothed.iter().all(|v| (v - 0.25).abs() < 1e-12));
        assert_eq!(daily_curve(&[1.0; 25], 10, 1.0).unwrap().downsampled.len(), 3);

        let mut impulse = vec![0.0; 201];
        impulse[100] = 1.0;
        let resp = daily_curve(&impulse, 1, 6.0).unwrap().smoothed;
        assert!((resp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(matches!(daily_curve(&[1.0], 0, 6.0), Err(InferError::InvalidInput(_))));
        assert!(matches!(daily_curve(&[], 10, 6.0), Err(InferError::InvalidInput(_))));
    }

    #[test]
    fn partial_last_block_is_averaged() {
        let c = daily_curve(&[1.0, 3.0, 5.0], 2, 0.0).unwrap();
        assert_eq!(c.downsampled, vec![2.0, 5.0]);
        assert_eq!(c.smoothed, c.downsampled);
        assert_eq!(c.to_csv(), "index,raw_mean,smoothed\n0,2,2\n1,5,5\n");
    }

    proptest! {
        #[test]
        fn smoothing_stays_within_input_range(x in proptest::collection::vec(0.0f64..1.0, 1..300), factor in 1usize..12, sigma in 0.0f64..10.0) {
            let c = daily_curve(&x, factor, sigma).unwrap();
            prop_assert_eq!(c.smoothed.len(), x.len().div_ceil(factor));
            let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in &c.smoothed {
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }

        #[test]
        fn constant_series_is_reproduced(c in 0.0f64..1.0, n in 1usize..200, sigma in 0.0f64..8.0) {
            let curve = daily_curve(&vec![c; n], 3, sigma).unwrap();
            for v in &curve.smoothed {
                prop_assert!((v - c).abs() <= 1e-12);
            }
        }
    }
}
