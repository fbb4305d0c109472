//! DASF container.
//!
//! Layout, all little-endian:
//!
//! | offset | size         | content                                   |
//! |--------|--------------|-------------------------------------------|
//! | 0      | 4            | ASCII `DASF`                              |
//! | 4      | 4            | version `u32` = 1                         |
//! | 8      | 8            | `header_len` `u64`                        |
//! | 16     | header_len   | UTF-8 JSON header                         |
//! | ...    | 4 * C * S    | `f32` samples, channel-major              |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{check_finite, io_err, DasSegment, Result, SegmentMeta, StoreError};

pub const DASF_MAGIC: [u8; 4] = *b"DASF";
pub const DASF_VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    n_channels: u64,
    n_samples: u64,
    sample_rate_hz: f64,
    channel_start: i64,
    channel_spacing_m: f64,
    start_time_ns: i64,
    dtype: String,
}

pub fn write_segment(segment: &DasSegment, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    check_finite(segment.data())?;
    let meta = segment.meta();
    let header = Header {
        n_channels: segment.n_channels() as u64,
        n_samples: segment.n_samples() as u64,
        sample_rate_hz: meta.sample_rate_hz,
        channel_start: meta.channel_start,
        channel_spacing_m: meta.channel_spacing_m,
        start_time_ns: meta.start_time_ns,
        dtype: "f32le".to_owned(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| StoreError::BadHeader(e.to_string()))?;

    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(io_err(path));
    write(&DASF_MAGIC)?;
    write(&DASF_VERSION.to_le_bytes())?;
    write(&(header.len() as u64).to_le_bytes())?;
    write(&header)?;
    let mut payload = Vec::with_capacity(segment.data().len() * 4);
    for v in segment.data().iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write(&payload)?;
    out.flush().map_err(io_err(path))
}

pub fn read_segment(path: impl AsRef<Path>) -> Result<DasSegment> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<DasSegment> {
    if bytes.len() < 4 {
        return Err(StoreError::Truncated {
            what: "magic",
            expected: 4,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != DASF_MAGIC {
        return Err(StoreError::BadMagic { found: magic });
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(StoreError::Truncated {
            what: "preamble",
            expected: PREAMBLE_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DASF_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let available = (bytes.len() - PREAMBLE_LEN) as u64;
    if header_len > available {
        return Err(StoreError::Truncated {
            what: "header",
            expected: header_len,
            found: available,
        });
    }
    let header_end = PREAMBLE_LEN + header_len as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
        .map_err(|e| StoreError::BadHeader(e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(StoreError::BadHeader(format!("unsupported dtype {:?}", header.dtype)));
    }
    let expected = header
        .n_channels
        .checked_mul(header.n_samples)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| StoreError::BadHeader("dimensions overflow".into()))?;
    let payload = &bytes[header_end..];
    let found = payload.len() as u64;
    if found < expected {
        return Err(StoreError::Truncated {
            what: "payload",
            expected,
            found,
        });
    }
    if found > expected {
        return Err(StoreError::SizeMismatch { expected, found });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array2::from_shape_vec((header.n_channels as usize, header.n_samples as usize), values)
        .map_err(|e| StoreError::BadHeader(e.to_string()))?;
    DasSegment::new(
        data,
        SegmentMeta {
            sample_rate_hz: header.sample_rate_hz,
            channel_start: header.channel_start,
            channel_spacing_m: header.channel_spacing_m,
            start_time_ns: header.start_time_ns,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> SegmentMeta {
        SegmentMeta {
            sample_rate_hz: 500.0,
            channel_start: 4650,
            channel_spacing_m: 2.0,
            start_time_ns: 1_514_764_800_000_000_000,
        }
    }

    fn encode(seg: &DasSegment) -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.dasf");
        write_segment(seg, &p).unwrap();
        fs::read(p).unwrap()
    }

    #[test]
    fn single_value_round_trip() {
        let seg = DasSegment::zeros(1, 1, meta()).unwrap();
        let back = decode(&encode(&seg)).unwrap();
        assert_eq!(back, seg);
        assert_eq!(back.data()[[0, 0]], 0.0);
    }

    #[test]
    fn file_size_is_preamble_header_payload() {
        let seg = DasSegment::zeros(200, 30000, meta()).unwrap();
        let bytes = encode(&seg);
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + header_len + 200 * 30000 * 4);
        assert_eq!(&bytes[..4], b"DASF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        assert_eq!(header["n_channels"], 200);
        assert_eq!(header["n_samples"], 30000);
        assert_eq!(header["dtype"], "f32le");
        assert_eq!(header["channel_start"], 4650);
    }

    #[test]
    fn payload_is_channel_major_le() {
        let data = Array2::from_shape_vec((2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let seg = DasSegment::new(data, meta()).unwrap();
        let bytes = encode(&seg);
        let tail = &bytes[bytes.len() - 16..];
        let vals: Vec<f32> = tail.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(vals, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode(&DasSegment::zeros(2, 2, meta()).unwrap());
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, StoreError::BadMagic { .. }));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn short_payload_is_truncated_long_payload_is_mismatch() {
        let bytes = encode(&DasSegment::zeros(3, 4, meta()).unwrap());
        let err = decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, StoreError::Truncated { what: "payload", .. }));
        assert!(err.to_string().contains("truncated"));

        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode(&longer), Err(StoreError::SizeMismatch { .. })));
    }

    #[test]
    fn truncated_header_and_version() {
        let bytes = encode(&DasSegment::zeros(1, 1, meta()).unwrap());
        assert!(matches!(decode(&bytes[..20]), Err(StoreError::Truncated { what: "header", .. })));
        assert!(matches!(decode(&bytes[..10]), Err(StoreError::Truncated { what: "preamble", .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(StoreError::UnsupportedVersion(2))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_segment("/nonexistent/x.dasf"), Err(StoreError::Io { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bit_exact(
            channels in 1usize..6,
            samples in 1usize..40,
            seed in any::<u64>(),
            start in any::<i64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f32> = (0..channels * samples)
                .map(|_| f32::from_bits(rng.random::<u32>()))
                .map(|v| if v.is_finite() { v } else { 0.5 })
                .collect();
            let data = Array2::from_shape_vec((channels, samples), values).unwrap();
            let m = SegmentMeta { start_time_ns: start, ..meta() };
            let seg = DasSegment::new(data, m).unwrap();
            let back = decode(&encode(&seg)).unwrap();
            prop_assert_eq!(back.meta(), seg.meta());
            for (a, b) in back.data().iter().zip(seg.data().iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
