use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, GrayTile, Result, StoreError};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Training labels. The discriminant is the class index (alphabetical order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusLabel {
    Noise = 0,
    Waves = 1,
}

impl CorpusLabel {
    pub const ALL: [CorpusLabel; 2] = [CorpusLabel::Noise, CorpusLabel::Waves];

    pub fn as_str(self) -> &'static str {
        match self {
            CorpusLabel::Noise => "noise",
            CorpusLabel::Waves => "waves",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for CorpusLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorpusLabel {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(CorpusLabel::Noise),
            "waves" => Ok(CorpusLabel::Waves),
            other => Err(StoreError::UnknownLabel(other.to_owned())),
        }
    }
}

/// Binary PGM (`P5`, maxval 255).
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(pixels.len(), width * height, "pixel buffer does not match dimensions");
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a binary PGM written by [`write_pgm`] (comments are not supported).
/// Returns `(width, height, pixels)`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |reason: &str| StoreError::BadPgm {
        path: path.to_owned(),
        reason: reason.to_owned(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("incomplete header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if raster.len() != w * h {
        return Err(bad("raster size does not match dimensions"));
    }
    Ok((w, h, raster.to_vec()))
}

/// Deterministic file name for an exported tile.
///
/// `c<channel>_s<sample>_t<size>.pgm`, with `_<8 hex digits of sha256(source)>`
/// inserted before the extension when the tile carries a source identifier.
pub fn tile_file_name(gray: &GrayTile) -> String {
    let base = format!("c{}_s{}_t{}", gray.origin_channel, gray.origin_sample, gray.tile_size);
    match &gray.source {
        Some(src) => {
            let digest = Sha256::digest(src.as_bytes());
            let hex: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
            format!("{base}_{hex}.pgm")
        }
        None => format!("{base}.pgm"),
    }
}

/// Writes `gray` as `root/<label>/<name>.pgm` and returns the full path.
pub fn export_labeled_tile(gray: &GrayTile, label: &str, root: impl AsRef<Path>) -> Result<PathBuf> {
    let label: CorpusLabel = label.parse()?;
    let dir = root.as_ref().join(label.as_str());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(tile_file_name(gray));
    write_pgm(&path, gray.tile_size, gray.tile_size, &gray.pixels)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Path relative to the corpus root.
    pub path: PathBuf,
    pub label: CorpusLabel,
}

/// Index of an exported training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub counts: BTreeMap<CorpusLabel, usize>,
    pub tile_size: usize,
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

impl CorpusManifest {
    pub fn new(root: impl Into<PathBuf>, tile_size: usize, seed: u64) -> Self {
        Self {
            root: root.into(),
            counts: CorpusLabel::ALL.iter().map(|&l| (l, 0)).collect(),
            tile_size,
            seed,
            records: Vec::new(),
        }
    }

    /// Exports a tile under this corpus and records it.
    pub fn export(&mut self, gray: &GrayTile, label: CorpusLabel) -> Result<PathBuf> {
        if gray.tile_size != self.tile_size {
            return Err(StoreError::Manifest(format!(
                "tile size {} does not match corpus tile size {}",
                gray.tile_size, self.tile_size
            )));
        }
        let path = export_labeled_tile(gray, label.as_str(), &self.root)?;
        let rel = path.strip_prefix(&self.root).unwrap_or(&path).to_owned();
        if self.records.iter().any(|r| r.path == rel) {
            return Err(StoreError::Manifest(format!("duplicate tile name {}", rel.display())));
        }
        self.records.push(ManifestRecord { path: rel, label });
        *self.counts.entry(label).or_default() += 1;
        Ok(path)
    }

    pub fn count(&self, label: CorpusLabel) -> usize {
        self.counts.get(&label).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn absolute_path(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    /// Writes `root/manifest.json`.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.manifest_path();
        let json = serde_json::to_string_pretty(self).map_err(|e| StoreError::Manifest(e.to_string()))?;
        fs::write(&path, json).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Loads a manifest file, or `manifest.json` inside a corpus directory.
    /// Record paths are resolved against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_owned();
        if path.is_dir() {
            path = path.join(MANIFEST_FILE);
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut manifest: Self = serde_json::from_str(&text).map_err(|e| StoreError::Manifest(e.to_string()))?;
        if let Some(dir) = path.parent() {
            manifest.root = dir.to_owned();
        }
        manifest.validate()?;
        Ok(manifest)
    }

    /// Checks that every record lives in `root/<label>/`, exists, and that
    /// the per-label counts agree with the records.
    pub fn validate(&self) -> Result<()> {
        let mut counts: BTreeMap<CorpusLabel, usize> = BTreeMap::new();
        for r in &self.records {
            if r.path.parent() != Some(Path::new(r.label.as_str())) {
                return Err(StoreError::Manifest(format!(
                    "{} is not under {}/",
                    r.path.display(),
                    r.label
                )));
            }
            let abs = self.absolute_path(r);
            if !abs.is_file() {
                return Err(StoreError::Manifest(format!("missing file {}", abs.display())));
            }
            *counts.entry(r.label).or_default() += 1;
        }
        for label in CorpusLabel::ALL {
            if counts.get(&label).copied().unwrap_or(0) != self.count(label) {
                return Err(StoreError::Manifest(format!("count mismatch for {label}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(channel: i64, sample: usize, t: usize) -> GrayTile {
        GrayTile {
            pixels: (0..t * t).map(|i| (i % 256) as u8).collect(),
            tile_size: t,
            origin_channel: channel,
            origin_sample: sample,
            source: None,
        }
    }

    #[test]
    fn export_uses_label_directory_and_origin_name() {
        let dir = tempfile::tempdir().unwrap();
        let p = export_labeled_tile(&gray(5500, 0, 200), "waves", dir.path()).unwrap();
        assert_eq!(p, dir.path().join("waves").join("c5500_s0_t200.pgm"));
        let (w, h, px) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (200, 200));
        assert_eq!(px, gray(5500, 0, 200).pixels);
        let raw = fs::read(&p).unwrap();
        assert!(raw.starts_with(b"P5\n200 200\n255\n"));
    }

    #[test]
    fn same_origin_different_source_distinct_names() {
        let a = gray(10, 20, 4).with_source("fileA.dasf");
        let b = gray(10, 20, 4).with_source("fileB.dasf");
        let (na, nb) = (tile_file_name(&a), tile_file_name(&b));
        assert_ne!(na, nb);
        assert!(na.starts_with("c10_s20_t4_") && na.ends_with(".pgm"));
        assert_eq!(na, tile_file_name(&a.clone()));
    }

    #[test]
    fn unknown_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = export_labeled_tile(&gray(0, 0, 2), "saturated", dir.path()).unwrap_err();
        assert!(err.to_string().contains("unknown label"));
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = CorpusManifest::new(dir.path(), 4, 7);
        m.export(&gray(0, 0, 4), CorpusLabel::Noise).unwrap();
        m.export(&gray(0, 4, 4), CorpusLabel::Waves).unwrap();
        m.export(&gray(4, 4, 4), CorpusLabel::Waves).unwrap();
        assert!(m.export(&gray(4, 4, 4), CorpusLabel::Waves).is_err());
        m.save().unwrap();
        let back = CorpusManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.count(CorpusLabel::Waves), 2);

        fs::remove_file(dir.path().join("waves/c0_s4_t4.pgm")).unwrap();
        assert!(CorpusManifest::load(dir.path()).is_err());
    }

    #[test]
    fn label_index_is_alphabetical() {
        assert_eq!(CorpusLabel::Noise.index(), 0);
        assert_eq!(CorpusLabel::Waves.index(), 1);
        assert_eq!(serde_json::to_string(&CorpusLabel::Waves).unwrap(), "\"waves\"");
    }
}
