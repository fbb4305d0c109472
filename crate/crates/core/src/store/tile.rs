use ndarray::{s, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{DasSegment, Result, StoreError};
use crate::scalar::Scalar;

/// Dimensions of a tiling: `rows` channel blocks by `cols` sample blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub tile_size: usize,
    pub stride: usize,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Local (channel, sample) offset of tile `(row, col)`.
    pub fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        (row * self.stride, col * self.stride)
    }
}

/// Grid for `tile_size` windows moved by `stride` over a `channels x samples`
/// array. Windows that would run past the edge are dropped.
pub fn tile_grid(channels: usize, samples: usize, tile_size: usize, stride: usize) -> Result<TileGrid> {
    if tile_size == 0 || stride == 0 {
        return Err(StoreError::InvalidTiling(format!(
            "tile size ({tile_size}) and stride ({stride}) must be positive"
        )));
    }
    if tile_size > channels || tile_size > samples {
        return Err(StoreError::TileTooLarge {
            tile: tile_size,
            channels,
            samples,
        });
    }
    Ok(TileGrid {
        rows: (channels - tile_size) / stride + 1,
        cols: (samples - tile_size) / stride + 1,
        tile_size,
        stride,
    })
}

/// Square window of a segment.
#[derive(Debug, Clone)]
pub struct Tile<'a> {
    pub values: ArrayView2<'a, f32>,
    /// Fiber channel index of the first row.
    pub origin_channel: i64,
    /// Sample index (within the segment) of the first column.
    pub origin_sample: usize,
    pub tile_size: usize,
    pub grid_row: usize,
    pub grid_col: usize,
}

/// Cuts `segment` into tiles, channel blocks outer and sample blocks inner.
pub fn tile_segment(segment: &DasSegment, tile_size: usize, stride: usize) -> Result<Vec<Tile<'_>>> {
    let grid = tile_grid(segment.n_channels(), segment.n_samples(), tile_size, stride)?;
    let data = segment.data();
    let mut tiles = Vec::with_capacity(grid.len());
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let (c0, s0) = grid.origin(row, col);
            tiles.push(Tile {
                values: data.slice(s![c0..c0 + tile_size, s0..s0 + tile_size]),
                origin_channel: segment.meta().channel_start + c0 as i64,
                origin_sample: s0,
                tile_size,
                grid_row: row,
                grid_col: col,
            });
        }
    }
    Ok(tiles)
}

/// 8-bit grayscale rendering of a tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrayTile {
    /// Row-major `tile_size x tile_size` pixels.
    pub pixels: Vec<u8>,
    pub tile_size: usize,
    pub origin_channel: i64,
    pub origin_sample: usize,
    /// Identifier of the source recording, used to keep exported names unique.
    pub source: Option<String>,
}

impl GrayTile {
    /// Writes pixels scaled to `[0, 1]`, the network's input convention.
    pub fn write_unit<T: Scalar>(&self, out: &mut [T]) {
        assert_eq!(out.len(), self.pixels.len());
        let max = T::lit(255.0);
        for (o, &p) in out.iter_mut().zip(&self.pixels) {
            *o = T::from_u8(p).unwrap() / max;
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }
}

/// Per-tile min-max mapping onto `[0, 255]`; constant tiles map to zero.
///
/// This is the single normalization routine used both for corpus export and
/// for inference.
pub fn tile_to_gray(tile: &Tile<'_>) -> GrayTile {
    GrayTile {
        pixels: gray_pixels(tile.values),
        tile_size: tile.tile_size,
        origin_channel: tile.origin_channel,
        origin_sample: tile.origin_sample,
        source: None,
    }
}

pub(crate) fn gray_pixels(values: ArrayView2<'_, f32>) -> Vec<u8> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values.iter() {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| (255.0 * ((v as f64 - lo) / range)).round().clamp(0.0, 255.0) as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::SegmentMeta;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn seg(channels: usize, samples: usize) -> DasSegment {
        DasSegment::zeros(channels, samples, SegmentMeta::default()).unwrap()
    }

    #[test]
    fn one_minute_file_gives_150_tiles() {
        let s = seg(200, 30000);
        assert_eq!(tile_segment(&s, 200, 200).unwrap().len(), 150);
    }

    #[test]
    fn exact_fit_and_dropped_remainder() {
        assert_eq!(tile_segment(&seg(200, 200), 200, 200).unwrap().len(), 1);
        let long = seg(200, 30100);
        let tiles = tile_segment(&long, 200, 200).unwrap();
        assert_eq!(tiles.len(), 150);
        assert_eq!(tiles.last().unwrap().origin_sample, 29800);
    }

    #[test]
    fn too_large_tile_rejected() {
        assert!(matches!(
            tile_segment(&seg(100, 30000), 200, 200),
            Err(StoreError::TileTooLarge { .. })
        ));
        assert!(tile_segment(&seg(300, 100), 200, 200).is_err());
        assert!(matches!(tile_grid(10, 10, 5, 0), Err(StoreError::InvalidTiling(_))));
    }

    #[test]
    fn enumeration_is_channel_major() {
        let meta = SegmentMeta {
            channel_start: 5500,
            ..Default::default()
        };
        let s = DasSegment::zeros(4, 6, meta).unwrap();
        let tiles = tile_segment(&s, 2, 2).unwrap();
        let origins: Vec<(i64, usize)> = tiles.iter().map(|t| (t.origin_channel, t.origin_sample)).collect();
        assert_eq!(
            origins,
            vec![(5500, 0), (5500, 2), (5500, 4), (5502, 0), (5502, 2), (5502, 4)]
        );
        assert_eq!((tiles[4].grid_row, tiles[4].grid_col), (1, 1));
    }

    #[test]
    fn two_point_and_constant_tiles() {
        let data = Array2::from_shape_vec((2, 2), vec![0.0f32, 1.0, 1.0, 0.0]).unwrap();
        let s = DasSegment::new(data, SegmentMeta::default()).unwrap();
        let g = tile_to_gray(&tile_segment(&s, 2, 2).unwrap()[0]);
        assert_eq!(g.pixels, vec![0, 255, 255, 0]);

        let c = DasSegment::new(Array2::from_elem((3, 3), 7.5f32), SegmentMeta::default()).unwrap();
        let g = tile_to_gray(&tile_segment(&c, 3, 3).unwrap()[0]);
        assert_eq!(g.pixels, vec![0; 9]);
    }

    #[test]
    fn unit_pixels_span_zero_one() {
        let g = GrayTile {
            pixels: vec![0, 255, 51],
            tile_size: 0,
            origin_channel: 0,
            origin_sample: 0,
            source: None,
        };
        let mut out = [0f32; 3];
        g.write_unit(&mut out);
        assert_eq!(out, [0.0, 1.0, 0.2]);
    }

    fn coverage(channels: usize, samples: usize, t: usize, stride: usize) -> Array2<u32> {
        let s = seg(channels, samples);
        let mut hits = Array2::<u32>::zeros((channels, samples));
        for tile in tile_segment(&s, t, stride).unwrap() {
            let c0 = tile.origin_channel as usize;
            hits.slice_mut(s![c0..c0 + t, tile.origin_sample..tile.origin_sample + t])
                .mapv_inplace(|h| h + 1);
        }
        hits
    }

    proptest! {
        #[test]
        fn count_formula(channels in 1usize..60, samples in 1usize..60, t in 1usize..20, stride in 1usize..20) {
            prop_assume!(t <= channels && t <= samples);
            let n = tile_segment(&seg(channels, samples), t, stride).unwrap().len();
            prop_assert_eq!(n, ((channels - t) / stride + 1) * ((samples - t) / stride + 1));
        }

        #[test]
        fn disjoint_cover_of_top_left_subgrid(channels in 1usize..40, samples in 1usize..40, t in 1usize..12) {
            prop_assume!(t <= channels && t <= samples);
            let hits = coverage(channels, samples, t, t);
            let (cc, cs) = ((channels / t) * t, (samples / t) * t);
            for ((c, s), &h) in hits.indexed_iter() {
                prop_assert_eq!(h, u32::from(c < cc && s < cs));
            }
        }

        #[test]
        fn gray_invariant_under_exact_affine_maps(
            values in proptest::collection::vec(-1000i32..1000, 16),
            k in 0i32..8,
            b in -4096i32..4096,
        ) {
            // Integer data, power-of-two gains and integer offsets are exact in f32.
            let a = 2f32.powi(k - 3);
            let x = Array2::from_shape_vec((4, 4), values.iter().map(|&v| v as f32).collect()).unwrap();
            let y = x.mapv(|v| a * v + b as f32);
            let gx = gray_pixels(x.view());
            let gy = gray_pixels(y.view());
            prop_assert_eq!(gx, gy);
        }

        #[test]
        fn gray_nearly_invariant_under_general_affine_maps(
            values in proptest::collection::vec(-1.0e3f32..1.0e3, 25),
            a in 1.0e-3f32..1.0e3,
            b in -1.0e3f32..1.0e3,
        ) {
            let x = Array2::from_shape_vec((5, 5), values).unwrap();
            let y = x.mapv(|v| a * v + b);
            let gx = gray_pixels(x.view());
            let gy = gray_pixels(y.view());
            for (p, q) in gx.iter().zip(&gy) {
                prop_assert!((*p as i32 - *q as i32).abs() <= 1);
            }
        }

        #[test]
        fn gray_full_range_when_non_constant(values in proptest::collection::vec(-5.0f32..5.0, 9)) {
            let x = Array2::from_shape_vec((3, 3), values).unwrap();
            let g = gray_pixels(x.view());
            let lo = x.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            if hi > lo {
                prop_assert_eq!(*g.iter().min().unwrap(), 0);
                prop_assert_eq!(*g.iter().max().unwrap(), 255);
            } else {
                prop_assert!(g.iter().all(|&p| p == 0));
            }
        }
    }
}
