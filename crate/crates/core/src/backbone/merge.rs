//! Synchronized spatiotemporal patch merging between stages.
//!
//! Time is mean-pooled over consecutive windows of `S` frames (a trailing
//! partial window is averaged over the frames it has). Space is reduced by
//! gathering the `D × D` strided sub-grids with offsets `(dh, dw)` and
//! concatenating them along channels in row-major offset order, so channel
//! `(dh * D + dw) * C + c` of the output holds `x[.., h*D + dh, w*D + dw, c]`.
//! A LayerNorm and a bias-free linear map to `2·C` follow.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
    pub temporal_factor: usize,
    pub spatial_factor: usize,
    pub temporal_pooling: bool,
}

impl PatchMerge {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        temporal_factor: usize,
        spatial_factor: usize,
        temporal_pooling: bool,
    ) -> Result<Self> {
        let width = spatial_factor * spatial_factor * dim;
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), width)?,
            reduction: Linear::new(store, &format!("{name}.reduction"), width, 2 * dim, false)?,
            temporal_factor,
            spatial_factor,
            temporal_pooling,
        })
    }

    /// The pre-projection gather + pool, `[B, T, H, W, C]` → `[B, T', H/D, W/D, D·D·C]`.
    pub fn gather_pool(&self, x: &Tensor) -> Result<Tensor> {
        let s = if self.temporal_pooling { self.temporal_factor } else { 1 };
        gather_pool(x, s, self.spatial_factor)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.gather_pool(x)?;
        self.reduction.forward(&self.norm.forward(&g)?)
    }
}

/// Mean over consecutive groups of `s` frames along axis 1.
pub fn temporal_pool(x: &Tensor, s: usize) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let t = dims[1];
    if s <= 1 || t == 1 {
        return Ok(x.clone());
    }
    let full = t / s;
    let rem = t % s;
    let mut parts = Vec::with_capacity(2);
    if full > 0 {
        let mut grouped = dims.clone();
        grouped[1] = full;
        grouped.insert(2, s);
        parts.push(x.narrow(1, 0, full * s)?.reshape(grouped)?.mean(2)?);
    }
    if rem > 0 {
        parts.push(x.narrow(1, full * s, rem)?.mean_keepdim(1)?);
    }
    Ok(Tensor::cat(&parts, 1)?)
}

pub fn gather_pool(x: &Tensor, s: usize, d: usize) -> Result<Tensor> {
    let (b, _, h, w, c) = x.dims5()?;
    if h % d != 0 || w % d != 0 {
        return Err(Error::Shape(format!("{h}x{w} grid is not divisible by merge factor {d}")));
    }
    let pooled = temporal_pool(x, s)?;
    let t = pooled.dims()[1];
    Ok(pooled
        .reshape(vec![b, t, h / d, d, w / d, d, c])?
        .permute([0, 1, 2, 4, 3, 5, 6])?
        .contiguous()?
        .reshape(vec![b, t, h / d, w / d, d * d * c])?)
}
