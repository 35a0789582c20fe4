//! Closed-form multiply-accumulate counts of one forward pass.

use serde::Serialize;

use crate::backbone::{stage_shapes, StageShape, WindowGeometry};
use crate::config::{ModelConfig, SourceSpec, UpsampleMode};
use crate::decoder::{Decoder, SourceSlots};
use crate::error::Result;

/// MACs of one attention window of `n` tokens and width `c`: q/k/v and
/// output projections (`4nC²`) plus logits and weighted sum (`2n²C`). The
/// head count only splits `C` and does not change the total.
pub fn window_attention_macs(n: u64, c: u64) -> u64 {
    4 * n * c * c + 2 * n * n * c
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StageFlops {
    /// Patch embedding (stage 1) or merge projection (stages 2..4).
    pub entry: u64,
    pub attention: u64,
    pub mlp: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub shapes: [StageShape; 4],
    pub stages: [StageFlops; 4],
    pub decoder: u64,
    pub backbone: u64,
    pub total: u64,
}

fn block_macs(cfg: &ModelConfig, s: &StageShape, shifted: bool) -> (u64, u64) {
    let geo = WindowGeometry::new(cfg.window, [s.t, s.h, s.w], shifted);
    let n = geo.tokens_per_window() as u64;
    let c = s.c as u64;
    let attn = geo.num_windows() as u64 * window_attention_macs(n, c);
    let tokens = (s.t * s.h * s.w) as u64;
    let mlp = 2 * cfg.mlp_ratio as u64 * c * c * tokens;
    (attn, mlp)
}

/// Counts for a single-source model on a `frames × height × width` input.
pub fn flops_estimate(cfg: &ModelConfig, source: &SourceSpec, frames: usize, height: usize, width: usize) -> Result<FlopReport> {
    let shapes = stage_shapes(cfg, &source.temporal_patch_rule, source.spatial_patch, frames, height, width)?;
    let s1 = source.temporal_patch_rule.patch_for(frames)? as u64;
    let d = source.spatial_patch as u64;
    let mut stages = [StageFlops::default(); 4];
    for (i, s) in shapes.iter().enumerate() {
        let tokens = (s.t * s.h * s.w) as u64;
        let entry = if i == 0 {
            tokens * s.c as u64 * source.bands as u64 * s1 * d * d
        } else {
            let prev = shapes[i - 1].c as u64;
            tokens * 4 * prev * 2 * prev
        };
        let mut attention = 0;
        let mut mlp = 0;
        for b in 0..cfg.depths[i] {
            let (a, m) = block_macs(cfg, s, b % 2 == 1);
            attention += a;
            mlp += m;
        }
        stages[i] = StageFlops {
            entry,
            attention,
            mlp,
            total: entry + attention + mlp,
        };
    }
    let decoder = decoder_macs(cfg, source, height, width)?;
    let backbone: u64 = stages.iter().map(|s| s.total).sum();
    Ok(FlopReport {
        shapes,
        stages,
        decoder,
        backbone,
        total: backbone + decoder,
    })
}

fn decoder_macs(cfg: &ModelConfig, source: &SourceSpec, height: usize, width: usize) -> Result<u64> {
    let slots = stage_shapes(
        cfg,
        &source.temporal_patch_rule,
        source.spatial_patch,
        cfg.decoder_frames,
        height,
        width,
    )?;
    let src = [SourceSlots {
        name: source.name.clone(),
        slots: [slots[0].t, slots[1].t, slots[2].t, slots[3].t],
        tile_size: height,
    }];
    let inputs = Decoder::concat_channels(&src, &cfg.stage_channels(), &cfg.decoder_channels, cfg.aux_channels, cfg.aux_layer);
    let mut total = 0u64;
    let (mut gh, mut gw) = (height as u64 / 32, width as u64 / 32);
    for j in 0..3 {
        gh *= 2;
        gw *= 2;
        let out = cfg.decoder_channels[j] as u64;
        total += 9 * inputs[j] as u64 * out * gh * gw + 9 * out * out * gh * gw;
    }
    let last = cfg.decoder_channels[2] as u64;
    let k = cfg.num_classes as u64;
    total += last * k * gh * gw;
    if cfg.upsample == UpsampleMode::Learned {
        total += last * 16 * k * gh * gw;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (ModelConfig, SourceSpec) {
        (ModelConfig::default(), SourceSpec::sentinel2(64))
    }

    #[test]
    fn single_window_hand_count() {
        // N=2, M=7, C=32: n = 98 tokens
        // q,k,v: 3·98·32·32 = 301056; proj: 98·32·32 = 100352
        // logits and weighted sum: 2·98·98·32 = 614656
        assert_eq!(window_attention_macs(98, 32), 301_056 + 100_352 + 614_656);
    }

    #[test]
    fn doubling_grid_quadruples_spatial_terms() {
        let (cfg, src) = toy();
        let a = flops_estimate(&cfg, &src, 16, 64, 64).unwrap();
        let b = flops_estimate(&cfg, &src, 16, 128, 128).unwrap();
        assert_eq!(b.stages[0].entry, 4 * a.stages[0].entry);
        assert_eq!(b.stages[0].mlp, 4 * a.stages[0].mlp);
        for i in 1..4 {
            assert_eq!(b.stages[i].entry, 4 * a.stages[i].entry);
            assert_eq!(b.stages[i].mlp, 4 * a.stages[i].mlp);
        }
        assert_eq!(b.decoder, 4 * a.decoder);
    }

    #[test]
    fn downsampling_is_cheaper() {
        let (cfg, src) = toy();
        let off = ModelConfig {
            temporal_downsampling: false,
            ..cfg.clone()
        };
        for t in 3..=32 {
            let on = flops_estimate(&cfg, &src, t, 64, 64).unwrap().total;
            let full = flops_estimate(&off, &src, t, 64, 64).unwrap().total;
            assert!(on < full, "T={t}: {on} vs {full}");
        }
    }
}
