//! Deterministic synthetic scenes: smoothed random class fields, sinusoidal
//! per-class phenology, Gaussian noise, and coarse sources as block means of
//! the fine signal.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Config, SourceSpec, FRACTION_BINS, SPATIAL_REDUCTION};
use crate::error::{Error, Result};
use crate::fractions::{compute_fractions, ClassMapping, ManifestEntry, SequenceManifest};
use crate::types::{LabelMap, Raster, SceneSample, SourceSeries};

/// Sinusoid parameters of one class, one entry per band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub offset: Vec<f64>,
}

impl ClassProfile {
    /// Value of band `b` at frame `t` of an `frames`-long annual sequence.
    pub fn value(&self, b: usize, t: usize, frames: usize) -> f64 {
        let b = b % self.amplitude.len();
        let x = 2.0 * PI * (t as f64 + 0.5) / frames as f64;
        self.offset[b] + self.amplitude[b] * (x + self.phase[b]).sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecipe {
    pub name: String,
    pub bands: usize,
    pub size: usize,
    pub frames: usize,
    pub cadence_days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    pub seed: u64,
    pub geo_id: String,
    pub sources: Vec<SourceRecipe>,
    pub num_classes: usize,
    pub profiles: Vec<ClassProfile>,
    pub noise: f64,
    /// Box-blur radius of the latent fields, in fine pixels.
    pub smoothing: usize,
}

impl SceneRecipe {
    pub fn fine_size(&self) -> usize {
        self.sources.iter().map(|s| s.size).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Invalid("recipe has no sources".into()));
        }
        if !(1..=FRACTION_BINS).contains(&self.num_classes) {
            return Err(Error::Invalid(format!("{} classes, expected 1..=9", self.num_classes)));
        }
        if self.profiles.len() != self.num_classes {
            return Err(Error::Invalid(format!(
                "{} profiles for {} classes",
                self.profiles.len(),
                self.num_classes
            )));
        }
        for p in &self.profiles {
            let n = p.amplitude.len();
            if n == 0 || p.phase.len() != n || p.offset.len() != n {
                return Err(Error::Invalid("profile band vectors are empty or ragged".into()));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Invalid(format!("noise level {} must be non-negative", self.noise)));
        }
        let fine = self.fine_size();
        for s in &self.sources {
            if s.size == 0 || s.size % SPATIAL_REDUCTION != 0 {
                return Err(Error::Invalid(format!(
                    "grid size {} of `{}` is not divisible by {SPATIAL_REDUCTION}",
                    s.size, s.name
                )));
            }
            if fine % s.size != 0 {
                return Err(Error::Invalid(format!(
                    "grid size {} of `{}` does not divide the fine grid {fine}",
                    s.size, s.name
                )));
            }
            if s.bands == 0 || s.frames == 0 {
                return Err(Error::Invalid(format!("source `{}` has no bands or frames", s.name)));
            }
        }
        Ok(())
    }
}

/// Profiles shared by every tile of a dataset. Class `k` has phase
/// `2πk/K`; unless `phase_only`, offsets and amplitudes also vary by class.
pub fn default_profiles(num_classes: usize, bands: usize, phase_only: bool, seed: u64) -> Vec<ClassProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f11);
    (0..num_classes)
        .map(|k| {
            let base = 2.0 * PI * k as f64 / num_classes as f64;
            let mut p = ClassProfile {
                amplitude: Vec::with_capacity(bands),
                phase: Vec::with_capacity(bands),
                offset: Vec::with_capacity(bands),
            };
            for b in 0..bands {
                let band_shift = 0.3 * b as f64;
                p.phase.push(base + band_shift);
                if phase_only {
                    p.amplitude.push(1.0);
                    p.offset.push(0.0);
                } else {
                    p.amplitude.push(rng.random_range(0.6..1.2));
                    p.offset.push(0.4 * k as f64 - 0.2 + rng.random_range(-0.1..0.1));
                }
            }
            p
        })
        .collect()
}

/// Seed of the per-tile stream, a function of (seed, geo_id) only.
pub fn tile_seed(seed: u64, geo_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(geo_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn box_blur(field: &[f64], n: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return field.to_vec();
    }
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                let mut c = 0.0;
                let (lo, hi) = (j.saturating_sub(r), (j + r).min(n - 1));
                for k in lo..=hi {
                    s += if horizontal { src[i * n + k] } else { src[k * n + i] };
                    c += 1.0;
                }
                if horizontal {
                    out[i * n + j] = s / c;
                } else {
                    out[j * n + i] = s / c;
                }
            }
        }
        out
    };
    let h = pass(field, true);
    pass(&h, false)
}

fn class_map<R: Rng>(recipe: &SceneRecipe, rng: &mut R) -> LabelMap {
    let n = recipe.fine_size();
    if recipe.num_classes == 1 {
        return Raster::filled(n, n, 0u8);
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let fields: Vec<Vec<f64>> = (0..recipe.num_classes)
        .map(|_| {
            let raw: Vec<f64> = (0..n * n).map(|_| normal.sample(rng)).collect();
            // two passes approximate a Gaussian blur
            box_blur(&box_blur(&raw, n, recipe.smoothing), n, recipe.smoothing)
        })
        .collect();
    let data = (0..n * n)
        .map(|i| {
            let mut best = 0;
            for k in 1..recipe.num_classes {
                if fields[k][i] > fields[best][i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Raster { height: n, width: n, data }
}

/// Generates one scene. Identical recipes give byte-identical scenes.
pub fn gen_scene(recipe: &SceneRecipe) -> Result<SceneSample> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tile_seed(recipe.seed, &recipe.geo_id));
    let labels = class_map(recipe, &mut rng);
    let fine = recipe.fine_size();
    let mut sources = BTreeMap::new();
    for s in &recipe.sources {
        let f = fine / s.size;
        let area = (f * f) as f64;
        // noise-free block means of the fine signal
        let mut data = vec![0f32; s.bands * s.frames * s.size * s.size];
        for b in 0..s.bands {
            for t in 0..s.frames {
                let values: Vec<f64> = recipe.profiles.iter().map(|p| p.value(b, t, s.frames)).collect();
                let plane = &mut data[(b * s.frames + t) * s.size * s.size..][..s.size * s.size];
                for y in 0..s.size {
                    for x in 0..s.size {
                        let mut acc = 0.0;
                        for dy in 0..f {
                            for dx in 0..f {
                                acc += values[labels.get(y * f + dy, x * f + dx) as usize];
                            }
                        }
                        plane[y * s.size + x] = (acc / area) as f32;
                    }
                }
            }
        }
        if recipe.noise > 0.0 {
            let normal = Normal::new(0.0, recipe.noise).map_err(|e| Error::Invalid(e.to_string()))?;
            for v in &mut data {
                *v += normal.sample(&mut rng) as f32;
            }
        }
        sources.insert(s.name.clone(), SourceSeries::new(s.bands, s.frames, s.size, s.size, data)?);
    }
    let fraction = compute_fractions(&labels, &ClassMapping::identity(recipe.num_classes))?;
    Ok(SceneSample {
        geo_id: recipe.geo_id.clone(),
        sources,
        label_map: labels,
        fraction,
    })
}

/// Recipe for tile `index` of the dataset described by `cfg`.
pub fn recipe_for(cfg: &Config, index: usize) -> SceneRecipe {
    let bands = cfg.sources.iter().map(|s| s.bands).max().unwrap_or(1);
    SceneRecipe {
        seed: cfg.training.seed,
        geo_id: geo_id(index),
        sources: cfg.sources.iter().map(|s| source_recipe(s, cfg.data.frames)).collect(),
        num_classes: cfg.data.num_classes,
        profiles: default_profiles(cfg.data.num_classes, bands, cfg.data.phase_only, cfg.training.seed),
        noise: cfg.data.noise,
        smoothing: cfg.data.smoothing,
    }
}

fn source_recipe(s: &SourceSpec, frames: usize) -> SourceRecipe {
    SourceRecipe {
        name: s.name.clone(),
        bands: s.bands,
        size: s.tile_size,
        frames,
        cadence_days: s.cadence_days,
    }
}

pub fn geo_id(index: usize) -> String {
    format!("tile_{index:04}")
}

/// Split of tile `index`: the last `⌈val_fraction·n⌉` tiles are validation
/// (at least one when `val_fraction > 0` and `n > 1`).
pub fn split_of(index: usize, n: usize, val_fraction: f64) -> &'static str {
    let mut n_val = (val_fraction * n as f64).ceil() as usize;
    if n_val >= n {
        n_val = n.saturating_sub(1);
    }
    if index + n_val >= n {
        "val"
    } else {
        "train"
    }
}

/// Generates every tile of the dataset described by `cfg` on `workers`
/// threads. The result does not depend on `workers`.
pub fn gen_dataset(cfg: &Config, workers: usize) -> Result<Vec<SceneSample>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))?;
    pool.install(|| {
        (0..cfg.data.tiles)
            .into_par_iter()
            .map(|i| gen_scene(&recipe_for(cfg, i)))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesHeader {
    /// [C, T, H, W]
    pub dims: [usize; 4],
    pub order: String,
    pub dtype: String,
    pub cadence_days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelHeader {
    /// [H, W]
    pub dims: [usize; 2],
    pub dtype: String,
    pub num_classes: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn header_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn series_path(dir: &Path, geo_id: &str, source: &str) -> PathBuf {
    dir.join("scenes").join(geo_id).join(format!("{source}.bin"))
}

pub fn label_path(dir: &Path, geo_id: &str) -> PathBuf {
    dir.join("labels").join(format!("{geo_id}.bin"))
}

pub fn write_series(path: &Path, s: &SourceSeries, cadence_days: usize) -> Result<()> {
    let bytes: Vec<u8> = s.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(path, &bytes)?;
    let header = SeriesHeader {
        dims: s.dims(),
        order: "CTHW".into(),
        dtype: "f32le".into(),
        cadence_days,
    };
    write_file(&header_path(path), serde_json::to_string_pretty(&header)?.as_bytes())
}

pub fn read_series(path: &Path) -> Result<(SourceSeries, SeriesHeader)> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: SeriesHeader = serde_json::from_str(&text)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let [c, t, h, w] = header.dims;
    if header.order != "CTHW" || header.dtype != "f32le" || bytes.len() != 4 * c * t * h * w {
        return Err(Error::Invalid(format!(
            "{} does not match its header {:?}",
            path.display(),
            header
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((SourceSeries::new(c, t, h, w, data)?, header))
}

pub fn write_labels(path: &Path, labels: &LabelMap, num_classes: usize) -> Result<()> {
    write_file(path, &labels.data)?;
    let header = LabelHeader {
        dims: [labels.height, labels.width],
        dtype: "u8".into(),
        num_classes,
    };
    write_file(&header_path(path), serde_json::to_string_pretty(&header)?.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<(LabelMap, LabelHeader)> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: LabelHeader = serde_json::from_str(&text)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((Raster::new(header.dims[0], header.dims[1], bytes)?, header))
}

/// Writes `scenes/`, `labels/` and `manifest.jsonl` (one entry per tile and
/// source; frame references are `scenes/<geo_id>/<source>.bin#<t>`).
pub fn write_dataset(dir: &Path, cfg: &Config, scenes: &[SceneSample]) -> Result<SequenceManifest> {
    let n = scenes.len();
    let mut entries = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let split = split_of(i, n, cfg.data.val_fraction);
        write_labels(&label_path(dir, &scene.geo_id), &scene.label_map, cfg.data.num_classes)?;
        for spec in &cfg.sources {
            let series = scene
                .sources
                .get(&spec.name)
                .ok_or_else(|| Error::UnknownSource(spec.name.clone()))?;
            write_series(&series_path(dir, &scene.geo_id, &spec.name), series, spec.cadence_days)?;
            entries.push(ManifestEntry {
                geo_id: scene.geo_id.clone(),
                source: spec.name.clone(),
                frame_paths: (0..series.frames)
                    .map(|t| format!("scenes/{}/{}.bin#{t}", scene.geo_id, spec.name))
                    .collect(),
                fraction: scene.fraction.0,
                split: split.to_string(),
            });
        }
    }
    let manifest = SequenceManifest {
        entries,
        draw_len: crate::training::FIXED_DRAW,
    };
    manifest.write_jsonl(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
