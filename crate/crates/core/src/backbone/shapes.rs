//! Closed-form stage shapes.

use serde::Serialize;

use crate::config::{ModelConfig, TemporalPatchRule};
use crate::error::{Error, Result};

/// (T_i, H_i, W_i, C_i) of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageShape {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl std::fmt::Display for StageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.t, self.h, self.w, self.c)
    }
}

/// First-stage temporal patch size for a sequence of `frames` frames under
/// the default rule: 2 below 16 frames, 4 from 16 on.
pub fn temporal_patch_size(frames: usize) -> Result<usize> {
    TemporalPatchRule::default().patch_for(frames)
}

/// Length after mean pooling over windows of `factor` frames, where a
/// trailing partial window still produces one output frame.
pub fn pooled_len(t: usize, factor: usize) -> usize {
    t.div_ceil(factor).max(1)
}

/// Shapes of the four stage outputs for an input of `frames × height × width`.
pub fn stage_shapes(
    cfg: &ModelConfig,
    rule: &TemporalPatchRule,
    spatial_patch: usize,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<[StageShape; 4]> {
    let s1 = rule.patch_for(frames)?;
    if height % spatial_patch != 0 || width % spatial_patch != 0 {
        return Err(Error::Shape(format!(
            "{height}x{width} is not divisible by the spatial patch {spatial_patch}"
        )));
    }
    let ch = cfg.stage_channels();
    let mut shapes = [StageShape {
        t: frames / s1,
        h: height / spatial_patch,
        w: width / spatial_patch,
        c: ch[0],
    }; 4];
    for i in 1..4 {
        let prev = shapes[i - 1];
        let d = cfg.spatial_merge_factors[i - 1];
        if prev.h % d != 0 || prev.w % d != 0 {
            return Err(Error::Shape(format!(
                "stage {} grid {}x{} is not divisible by merge factor {d}",
                i, prev.h, prev.w
            )));
        }
        shapes[i] = StageShape {
            t: if cfg.temporal_downsampling {
                pooled_len(prev.t, cfg.temporal_merge_factors[i - 1])
            } else {
                prev.t
            },
            h: prev.h / d,
            w: prev.w / d,
            c: ch[i],
        };
    }
    Ok(shapes)
}
