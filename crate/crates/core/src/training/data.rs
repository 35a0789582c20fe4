//! In-memory datasets, manifest consistency checks and batch assembly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{Config, FrameMode, FRACTION_BINS};
use crate::error::{Error, Result};
use crate::fractions::{compute_fractions, ClassMapping, SequenceManifest};
use crate::synthetic::{label_path, read_labels, read_series};
use crate::types::{SceneSample, SourceSeries};

use super::sampling::{draw_length, frames_with_length};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<SceneSample>,
    /// "train" or "val", one per scene.
    pub splits: Vec<String>,
}

/// `scenes/<geo>/<src>.bin#t` → (relative file, t).
pub fn parse_frame_ref(r: &str) -> Result<(PathBuf, usize)> {
    let (file, t) = r
        .rsplit_once('#')
        .ok_or_else(|| Error::Invalid(format!("frame reference `{r}` has no `#<index>` suffix")))?;
    let t = t
        .parse()
        .map_err(|_| Error::Invalid(format!("frame reference `{r}` has a non-numeric index")))?;
    Ok((PathBuf::from(file), t))
}

impl Dataset {
    pub fn from_scenes(scenes: Vec<SceneSample>, splits: Vec<String>) -> Result<Self> {
        if scenes.len() != splits.len() {
            return Err(Error::Invalid(format!("{} scenes but {} splits", scenes.len(), splits.len())));
        }
        Ok(Self { scenes, splits })
    }

    /// Loads the dataset under `dir` through its `manifest.jsonl` and checks
    /// it against the configured sources.
    pub fn load(dir: &Path, cfg: &Config) -> Result<Self> {
        let manifest = SequenceManifest::read_jsonl(&dir.join("manifest.jsonl"), 0)?;
        let mut by_geo: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in manifest.entries.iter().enumerate() {
            cfg.source(&e.source)?;
            by_geo.entry(e.geo_id.clone()).or_default().push(i);
        }
        let mut scenes = Vec::new();
        let mut splits = Vec::new();
        for (geo, idx) in by_geo {
            let (labels, _) = read_labels(&label_path(dir, &geo))?;
            let mut sources = BTreeMap::new();
            let mut split = None;
            let mut fraction = None;
            for i in idx {
                let e = &manifest.entries[i];
                let mut file = None;
                let mut frames = Vec::new();
                for r in &e.frame_paths {
                    let (f, t) = parse_frame_ref(r)?;
                    if file.as_ref().is_some_and(|p| p != &f) {
                        return Err(Error::Invalid(format!("{geo}/{}: frames span several files", e.source)));
                    }
                    file = Some(f);
                    frames.push(t);
                }
                let file = file.ok_or_else(|| Error::Invalid(format!("{geo}/{}: no frames", e.source)))?;
                let (series, _) = read_series(&dir.join(&file))?;
                if let Some(&t) = frames.iter().find(|&&t| t >= series.frames) {
                    return Err(Error::Invalid(format!(
                        "{geo}/{}: frame {t} beyond the {} stored frames",
                        e.source, series.frames
                    )));
                }
                let series = series.select_frames(&frames)?;
                if split.as_ref().is_some_and(|s| s != &e.split) {
                    return Err(Error::Invalid(format!("{geo}: sources disagree on the split")));
                }
                if fraction.is_some_and(|f| f != e.fraction) {
                    return Err(Error::Invalid(format!("{geo}: sources disagree on the fractions")));
                }
                split = Some(e.split.clone());
                fraction = Some(e.fraction);
                sources.insert(e.source.clone(), series);
            }
            let fraction = fraction.expect("at least one entry per geo id");
            let computed = compute_fractions(&labels, &ClassMapping::identity(FRACTION_BINS))?;
            if computed.0.iter().zip(&fraction).any(|(a, b)| (a - b).abs() > 1e-9) {
                return Err(Error::Invalid(format!("{geo}: manifest fractions disagree with the label map")));
            }
            scenes.push(SceneSample {
                geo_id: geo,
                sources,
                label_map: labels,
                fraction: computed,
            });
            splits.push(split.unwrap_or_else(|| "train".into()));
        }
        let ds = Self { scenes, splits };
        ds.check(cfg)?;
        Ok(ds)
    }

    /// Every scene carries every configured source with matching bands and
    /// tile size, and its label map sits on the finest grid.
    pub fn check(&self, cfg: &Config) -> Result<()> {
        if self.scenes.is_empty() {
            return Err(Error::Invalid("dataset is empty".into()));
        }
        let finest = cfg.sources.iter().map(|s| s.tile_size).max().unwrap_or(0);
        for scene in &self.scenes {
            for spec in &cfg.sources {
                let s = scene.sources.get(&spec.name).ok_or_else(|| {
                    Error::Invalid(format!("{}: missing source `{}`", scene.geo_id, spec.name))
                })?;
                if s.bands != spec.bands || s.height != spec.tile_size || s.width != spec.tile_size {
                    return Err(Error::Invalid(format!(
                        "{}/{}: stored [{} bands, {}x{}] but configured [{} bands, {}x{}]",
                        scene.geo_id, spec.name, s.bands, s.height, s.width, spec.bands, spec.tile_size, spec.tile_size
                    )));
                }
            }
            if scene.label_map.height != finest || scene.label_map.width != finest {
                return Err(Error::Invalid(format!(
                    "{}: label map {}x{} is not on the {finest}x{finest} grid",
                    scene.geo_id, scene.label_map.height, scene.label_map.width
                )));
            }
        }
        Ok(())
    }

    pub fn indices(&self, split: &str) -> Vec<usize> {
        (0..self.scenes.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn min_frames(&self, source: &str) -> usize {
        self.scenes
            .iter()
            .filter_map(|s| s.sources.get(source).map(|x| x.frames))
            .min()
            .unwrap_or(0)
    }
}

/// Seeded subset of `ceil(ratio·n)` indices (at least one), in original order.
pub fn ratio_subset<R: Rng>(indices: &[usize], ratio: f64, rng: &mut R) -> Vec<usize> {
    if ratio >= 1.0 || indices.is_empty() {
        return indices.to_vec();
    }
    let k = ((ratio * indices.len() as f64).ceil() as usize).clamp(1, indices.len());
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    let mut kept = shuffled[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Endless shuffled pass over an index set.
#[derive(Debug, Clone)]
pub struct Cycler {
    items: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    pub fn new(items: Vec<usize>) -> Self {
        Self {
            order: Vec::new(),
            pos: 0,
            items,
        }
    }

    pub fn take<R: Rng>(&mut self, n: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n && !self.items.is_empty() {
            if self.pos == self.order.len() {
                self.order = self.items.clone();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Stacks series into `[B, C, T, H, W]`.
pub fn stack_series(series: &[SourceSeries], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = series
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let dims = first.dims();
    let mut data = Vec::with_capacity(series.len() * first.data.len());
    for s in series {
        if s.dims() != dims {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", dims, s.dims())));
        }
        data.extend_from_slice(&s.data);
    }
    let [c, t, h, w] = dims;
    Ok(Tensor::from_vec(data, (series.len(), c, t, h, w), device)?.to_dtype(dtype)?)
}

/// Draws frames for every scene of a batch with one shared length.
pub fn sample_batch_frames<R: Rng>(
    dataset: &Dataset,
    batch: &[usize],
    source: &str,
    mode: FrameMode,
    rng: &mut R,
) -> Result<Vec<SourceSeries>> {
    let min_len = batch
        .iter()
        .map(|&i| series_of(dataset, i, source).map(|s| s.frames))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min()
        .unwrap_or(0);
    let n = match mode {
        FrameMode::All => min_len,
        _ => draw_length(mode, min_len, rng)?,
    };
    batch
        .iter()
        .map(|&i| {
            let s = series_of(dataset, i, source)?;
            let idx = match mode {
                // shared length even when sequences differ
                FrameMode::All => evenly_spaced(s.frames, n),
                _ => frames_with_length(s.frames, n, mode, rng)?,
            };
            s.select_frames(&idx)
        })
        .collect()
}

fn series_of<'a>(dataset: &'a Dataset, i: usize, source: &str) -> Result<&'a SourceSeries> {
    dataset.scenes[i]
        .sources
        .get(source)
        .ok_or_else(|| Error::UnknownSource(source.to_string()))
}

/// `n` strictly increasing indices spread over `0..len` (`n ≤ len`).
pub fn evenly_spaced(len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| ((2 * i + 1) * len) / (2 * n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_refs() {
        assert_eq!(parse_frame_ref("scenes/a/s2.bin#7").unwrap(), (PathBuf::from("scenes/a/s2.bin"), 7));
        assert!(parse_frame_ref("scenes/a/s2.bin").is_err());
        assert!(parse_frame_ref("x#y").is_err());
    }

    #[test]
    fn evenly_spaced_is_increasing() {
        for len in 1..40 {
            for n in 1..=len {
                let v = evenly_spaced(len, n);
                assert_eq!(v.len(), n);
                assert!(v.windows(2).all(|w| w[0] < w[1]));
                assert!(*v.last().unwrap() < len);
            }
        }
        assert_eq!(evenly_spaced(5, 5), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn ratio_subset_sizes() {
        let idx: Vec<usize> = (0..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, want) in [(1.0, 20), (0.5, 10), (0.33, 7), (0.25, 5), (0.2, 4), (0.1, 2), (0.05, 1)] {
            let s = ratio_subset(&idx, r, &mut rng);
            assert_eq!(s.len(), want, "ratio {r}");
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
        let a = ratio_subset(&idx, 0.25, &mut ChaCha8Rng::seed_from_u64(9));
        let b = ratio_subset(&idx, 0.25, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn cycler_visits_everything_each_pass() {
        let mut c = Cycler::new(vec![4, 5, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut first = c.take(3, &mut rng);
        first.sort_unstable();
        assert_eq!(first, vec![4, 5, 6]);
        assert_eq!(c.take(7, &mut rng).len(), 7);
    }
}
