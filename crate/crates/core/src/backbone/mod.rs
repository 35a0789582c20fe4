//! Hierarchical spatiotemporal window-attention encoder.
//!
//! Each source has its own patch embedding; merging layers, transformer
//! blocks and per-stage output norms are shared by all sources.

mod attention;
mod embed;
mod merge;
mod shapes;

use std::collections::BTreeMap;

use candle_core::Tensor;

pub use attention::{
    merge as merge_windows, partition, relative_position_index, Mlp, SwinBlock, WindowAttention, WindowGeometry,
    MASK_VALUE,
};
pub use embed::{conv3d_patch_reference, PatchEmbed};
pub use merge::{gather_pool, temporal_pool, PatchMerge};
pub use shapes::{pooled_len, stage_shapes, temporal_patch_size, StageShape};

use crate::config::{ModelConfig, SourceSpec};
use crate::error::{Error, Result};
use crate::nn::LayerNorm;
use crate::params::ParamStore;
use crate::types::{SourceSeries, StageFeatures};

#[derive(Debug, Clone)]
pub struct Stage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<SwinBlock>,
    pub out_norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: ModelConfig,
    pub embeds: BTreeMap<String, PatchEmbed>,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, sources: &[SourceSpec]) -> Result<Self> {
        let mut embeds = BTreeMap::new();
        for src in sources {
            embeds.insert(
                src.name.clone(),
                PatchEmbed::new(store, src, config.embed_dim, config.patch_norm)?,
            );
        }
        let channels = config.stage_channels();
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let prefix = format!("backbone.stage{}", i + 1);
            let merge = if i == 0 {
                None
            } else {
                Some(PatchMerge::new(
                    store,
                    &format!("{prefix}.merge"),
                    channels[i - 1],
                    config.temporal_merge_factors[i - 1],
                    config.spatial_merge_factors[i - 1],
                    config.temporal_downsampling,
                )?)
            };
            let blocks = (0..config.depths[i])
                .map(|j| {
                    SwinBlock::new(
                        store,
                        &format!("{prefix}.block{j}"),
                        channels[i],
                        config.heads[i],
                        config.window,
                        config.mlp_ratio,
                        j % 2 == 1,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let out_norm = LayerNorm::new(store, &format!("{prefix}.out_norm"), channels[i])?;
            stages.push(Stage {
                merge,
                blocks,
                out_norm,
            });
        }
        Ok(Self {
            config: config.clone(),
            embeds,
            stages,
        })
    }

    pub fn embed(&self, source: &str) -> Result<&PatchEmbed> {
        self.embeds
            .get(source)
            .ok_or_else(|| Error::UnknownSource(source.to_string()))
    }

    /// `[B, C, T, H, W]` → stage outputs `X_1..X_4`, each `[B, T_i, H_i, W_i, C_i]`.
    pub fn forward(&self, x: &Tensor, source: &str) -> Result<[Tensor; 4]> {
        let mut h = self.embed(source)?.forward(x)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                h = m.forward(&h)?;
            }
            for blk in &stage.blocks {
                h = blk.forward(&h)?;
            }
            outs.push(stage.out_norm.forward(&h)?);
        }
        Ok(outs.try_into().expect("four stages"))
    }

    /// Single-sample convenience wrapper returning [`StageFeatures`].
    pub fn forward_series(&self, series: &SourceSeries, source: &str, like: &Tensor) -> Result<[StageFeatures; 4]> {
        let x = Tensor::from_vec(series.data.clone(), series.dims().to_vec(), like.device())?
            .to_dtype(like.dtype())?
            .unsqueeze(0)?;
        let outs = self.forward(&x, source)?;
        let mut feats = Vec::with_capacity(4);
        for (i, o) in outs.into_iter().enumerate() {
            feats.push(StageFeatures::new(o.squeeze(0)?, i + 1)?);
        }
        Ok(feats.try_into().expect("four stages"))
    }
}
