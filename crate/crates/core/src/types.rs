//! Shared data model.
//!
//! Layout conventions: raw image sequences are `[channel, time, height, width]`
//! and stage features are `[time, height, width, channel]` (a leading batch
//! axis is added for batched tensors). [`cthw_to_thwc`] and [`thwc_to_cthw`]
//! convert between the two as a pure index permutation.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::FRACTION_BINS;
use crate::error::{Error, Result};

/// Land-cover fractions: entry 0 is background, entries 1..=8 are cropland,
/// forest, shrubland, grassland, wetland, water, bare land and urban.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FractionVector(pub [f64; FRACTION_BINS]);

impl FractionVector {
    pub const NAMES: [&'static str; FRACTION_BINS] = [
        "background",
        "cropland",
        "forest",
        "shrubland",
        "grassland",
        "wetland",
        "water",
        "bare",
        "urban",
    ];

    pub fn new(p: [f64; FRACTION_BINS]) -> Result<Self> {
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!("fraction entries must lie in [0,1]: {p:?}")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("fractions sum to {sum}, expected 1")));
        }
        Ok(Self(p))
    }

    pub fn background_only(&self) -> bool {
        self.0[0] >= 1.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A row-major 2-D grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "raster {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn window(&self, row: usize, col: usize, h: usize, w: usize) -> Raster<T> {
        let mut data = Vec::with_capacity(h * w);
        for r in row..row + h {
            data.extend_from_slice(&self.data[r * self.width + col..r * self.width + col + w]);
        }
        Raster {
            height: h,
            width: w,
            data,
        }
    }
}

pub type LabelMap = Raster<u8>;

/// One source's image sequence, `[bands, frames, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSeries {
    pub bands: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl SourceSeries {
    pub fn new(bands: usize, frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != bands * frames * height * width {
            return Err(Error::Shape(format!(
                "series [{bands},{frames},{height},{width}] needs {} values, got {}",
                bands * frames * height * width,
                data.len()
            )));
        }
        Ok(Self {
            bands,
            frames,
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.bands, self.frames, self.height, self.width]
    }

    #[inline]
    pub fn at(&self, c: usize, t: usize, h: usize, w: usize) -> f32 {
        self.data[((c * self.frames + t) * self.height + h) * self.width + w]
    }

    /// Keeps the listed frames (in the given order).
    pub fn select_frames(&self, frames: &[usize]) -> Result<SourceSeries> {
        if let Some(&bad) = frames.iter().find(|&&f| f >= self.frames) {
            return Err(Error::Invalid(format!(
                "frame {bad} out of range for a {}-frame sequence",
                self.frames
            )));
        }
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(self.bands * frames.len() * plane);
        for c in 0..self.bands {
            for &t in frames {
                let start = (c * self.frames + t) * plane;
                data.extend_from_slice(&self.data[start..start + plane]);
            }
        }
        SourceSeries::new(self.bands, frames.len(), self.height, self.width, data)
    }
}

/// One tile: co-located sequences from each source plus its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub geo_id: String,
    pub sources: BTreeMap<String, SourceSeries>,
    /// Class map at the finest source resolution.
    pub label_map: LabelMap,
    pub fraction: FractionVector,
}

/// Output of one backbone stage, `[T_i, H_i, W_i, C_i]` for one sample.
#[derive(Debug, Clone)]
pub struct StageFeatures {
    pub data: Tensor,
    pub stage_index: usize,
}

impl StageFeatures {
    pub fn new(data: Tensor, stage_index: usize) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 4 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "stage features must be a non-empty [T,H,W,C] array, got {dims:?}"
            )));
        }
        if !(1..=4).contains(&stage_index) {
            return Err(Error::Invalid(format!("stage index {stage_index} not in 1..=4")));
        }
        Ok(Self { data, stage_index })
    }

    /// (T_i, H_i, W_i, C_i)
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }
}

/// `[C, T, H, W]` → `[T, H, W, C]`.
pub fn cthw_to_thwc<T: Copy>(data: &[T], dims: [usize; 4]) -> Vec<T> {
    let [c, t, h, w] = dims;
    let mut out = Vec::with_capacity(data.len());
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                for ci in 0..c {
                    out.push(data[((ci * t + ti) * h + hi) * w + wi]);
                }
            }
        }
    }
    out
}

/// `[T, H, W, C]` → `[C, T, H, W]`; `dims` are given as `[C, T, H, W]`.
pub fn thwc_to_cthw<T: Copy>(data: &[T], dims: [usize; 4]) -> Vec<T> {
    let [c, t, h, w] = dims;
    let mut out = Vec::with_capacity(data.len());
    for ci in 0..c {
        for ti in 0..t {
            for hi in 0..h {
                for wi in 0..w {
                    out.push(data[((ti * h + hi) * w + wi) * c + ci]);
                }
            }
        }
    }
    out
}
