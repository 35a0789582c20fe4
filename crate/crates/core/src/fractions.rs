//! Land-cover fraction targets: tiling of label rasters, per-tile class
//! fractions, and the sequence manifest used for pretraining.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::FRACTION_BINS;
use crate::error::{Error, Result};
use crate::types::{FractionVector, Raster};

/// Total map from raw label codes to fraction bins; unmapped codes go to
/// bin 0 (background).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassMapping {
    codes: BTreeMap<i64, usize>,
}

impl ClassMapping {
    pub fn new(codes: BTreeMap<i64, usize>) -> Result<Self> {
        if let Some((code, bin)) = codes.iter().find(|(_, &b)| b >= FRACTION_BINS) {
            return Err(Error::Invalid(format!("code {code} maps to bin {bin}, max is 8")));
        }
        Ok(Self { codes })
    }

    /// Code `k` → bin `k` for `k` in `0..n`.
    pub fn identity(n: usize) -> Self {
        Self {
            codes: (0..n.min(FRACTION_BINS)).map(|k| (k as i64, k)).collect(),
        }
    }

    #[inline]
    pub fn bin(&self, code: i64) -> usize {
        self.codes.get(&code).copied().unwrap_or(0)
    }

    /// Parses a JSON object `{"code": bin, ...}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, usize> = serde_json::from_str(text)?;
        let mut codes = BTreeMap::new();
        for (k, v) in raw {
            let code: i64 = k
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("class mapping key `{k}` is not an integer")))?;
            codes.insert(code, v);
        }
        Self::new(codes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let raw: BTreeMap<String, usize> = self.codes.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        serde_json::to_string_pretty(&raw).expect("map serializes")
    }
}

/// Fraction of pixels falling in each bin.
pub fn compute_fractions<T: Copy + Into<i64>>(label_map: &Raster<T>, mapping: &ClassMapping) -> Result<FractionVector> {
    let n = label_map.data.len();
    if n == 0 || label_map.height == 0 || label_map.width == 0 {
        return Err(Error::Invalid("cannot compute fractions of an empty label map".into()));
    }
    let mut counts = [0usize; FRACTION_BINS];
    for &code in &label_map.data {
        counts[mapping.bin(code.into())] += 1;
    }
    let mut p = [0.0; FRACTION_BINS];
    for (pk, c) in p.iter_mut().zip(counts) {
        *pk = c as f64 / n as f64;
    }
    FractionVector::new(p)
}

/// Non-overlapping row-major tiles; partial tiles at the right and bottom
/// edges are dropped.
pub fn crop_tiles<T: Copy>(raster: &Raster<T>, tile: usize) -> Vec<((usize, usize), Raster<T>)> {
    if tile == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for r in 0..raster.height / tile {
        for c in 0..raster.width / tile {
            let (row, col) = (r * tile, c * tile);
            out.push(((row, col), raster.window(row, col, tile, tile)));
        }
    }
    out
}

/// A tile's annual sequence for one source, before filtering.
#[derive(Debug, Clone)]
pub struct TileSequence {
    pub geo_id: String,
    pub source: String,
    /// (time index, frame reference); need not be sorted.
    pub frames: Vec<(usize, String)>,
    pub labels: Raster<i32>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub geo_id: String,
    pub source: String,
    pub frame_paths: Vec<String>,
    pub fraction: [f64; FRACTION_BINS],
    pub split: String,
}

impl ManifestEntry {
    pub fn fraction_vector(&self) -> Result<FractionVector> {
        FractionVector::new(self.fraction)
    }
}

/// Filtered pretraining entries. Each training iteration draws `draw_len`
/// ordered frames per entry without replacement (see
/// [`crate::training::sample_frames`]).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceManifest {
    pub entries: Vec<ManifestEntry>,
    pub draw_len: usize,
}

impl SequenceManifest {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut buf, e)?;
            buf.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path, draw_len: usize) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        Ok(Self { entries, draw_len })
    }

    pub fn for_source<'a>(&'a self, source: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.source == source)
    }
}

/// Builds the manifest: sequences shorter than `min_len` are skipped with a
/// warning, background-only tiles are dropped, frames are put in time order.
pub fn build_manifest(sequences: &[TileSequence], min_len: usize, mapping: &ClassMapping) -> Result<SequenceManifest> {
    let results: Vec<Result<Option<ManifestEntry>>> = sequences
        .par_iter()
        .map(|seq| {
            if seq.frames.len() < min_len {
                log::warn!(
                    "skipping {}/{}: {} frames, need at least {min_len}",
                    seq.geo_id,
                    seq.source,
                    seq.frames.len()
                );
                return Ok(None);
            }
            let fraction = compute_fractions(&seq.labels, mapping)?;
            if fraction.background_only() {
                return Ok(None);
            }
            let mut frames = seq.frames.clone();
            frames.sort_by_key(|(t, _)| *t);
            Ok(Some(ManifestEntry {
                geo_id: seq.geo_id.clone(),
                source: seq.source.clone(),
                frame_paths: frames.into_iter().map(|(_, p)| p).collect(),
                fraction: fraction.0,
                split: seq.split.clone(),
            }))
        })
        .collect();
    let mut entries = Vec::new();
    for r in results {
        if let Some(e) = r? {
            entries.push(e);
        }
    }
    Ok(SequenceManifest {
        entries,
        draw_len: min_len,
    })
}
