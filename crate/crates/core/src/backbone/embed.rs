//! Per-source spatiotemporal patch embedding.
//!
//! One kernel of temporal extent `rule.long` is stored per source. Shorter
//! temporal patches reuse it by summing adjacent temporal slices, so a
//! temporally constant input embeds identically under either patch size.

use candle_core::Tensor;

use crate::config::SourceSpec;
use crate::error::{Error, Result};
use crate::nn::LayerNorm;
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub source: SourceSpec,
    /// `[C_1, bands, S_long, D_1, D_1]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: Option<LayerNorm>,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, source: &SourceSpec, embed_dim: usize, norm: bool) -> Result<Self> {
        let s = source.temporal_patch_rule.long;
        let d = source.spatial_patch;
        let prefix = format!("embed.{}", source.name);
        let fan_in = (source.bands * s * d * d) as f64;
        let weight = store.param(
            &format!("{prefix}.proj.weight"),
            &[embed_dim, source.bands, s, d, d],
            Init::Uniform((1.0 / fan_in).sqrt()),
        )?;
        let bias = store.param(&format!("{prefix}.proj.bias"), &[embed_dim], Init::Zeros)?;
        let norm = if norm {
            Some(LayerNorm::new(store, &format!("{prefix}.norm"), embed_dim)?)
        } else {
            None
        };
        Ok(Self {
            source: source.clone(),
            weight,
            bias,
            norm,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Kernel for temporal patch `s`, `[C_1, bands, s, D, D]`.
    pub fn kernel(&self, s: usize) -> Result<Tensor> {
        let [c1, bands, long, d, _]: [usize; 5] = self.weight.dims().try_into().expect("rank 5");
        if s == long {
            return Ok(self.weight.clone());
        }
        if s == 0 || long % s != 0 {
            return Err(Error::Invalid(format!("temporal patch {s} does not divide {long}")));
        }
        Ok(self
            .weight
            .reshape(vec![c1, bands, s, long / s, d, d])?
            .sum(3)?)
    }

    /// `[B, C, T, H, W]` → `[B, T_1, H_1, W_1, C_1]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, t, h, w) = x.dims5()?;
        if c != self.source.bands {
            return Err(Error::Shape(format!(
                "source `{}` expects {} bands, got {c}",
                self.source.name, self.source.bands
            )));
        }
        let s = self.source.temporal_patch_rule.patch_for(t)?;
        let d = self.source.spatial_patch;
        if h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} input is not divisible by the spatial patch {d}"
            )));
        }
        let (t1, h1, w1) = (t / s, h / d, w / d);
        let patches = x
            .narrow(2, 0, t1 * s)?
            .reshape(vec![b, c, t1, s, h1, d, w1, d])?
            .permute([0, 2, 4, 6, 1, 3, 5, 7])?
            .contiguous()?
            .reshape((b * t1 * h1 * w1, c * s * d * d))?;
        let c1 = self.embed_dim();
        let kernel = self.kernel(s)?.reshape((c1, c * s * d * d))?;
        let y = patches
            .matmul(&kernel.t()?)?
            .broadcast_add(&self.bias)?
            .reshape(vec![b, t1, h1, w1, c1])?;
        match &self.norm {
            Some(n) => n.forward(&y),
            None => Ok(y),
        }
    }
}

/// Reference Conv3D with kernel = stride, by explicit loops (used by tests).
pub fn conv3d_patch_reference(
    input: &[f64],
    dims: [usize; 4],
    kernel: &[f64],
    bias: &[f64],
    s: usize,
    d: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [c, t, h, w] = dims;
    let c1 = bias.len();
    let (t1, h1, w1) = (t / s, h / d, w / d);
    let mut out = vec![0.0; t1 * h1 * w1 * c1];
    for ot in 0..t1 {
        for oh in 0..h1 {
            for ow in 0..w1 {
                for o in 0..c1 {
                    let mut acc = bias[o];
                    for ci in 0..c {
                        for kt in 0..s {
                            for kh in 0..d {
                                for kw in 0..d {
                                    let iv = input[((ci * t + ot * s + kt) * h + oh * d + kh) * w + ow * d + kw];
                                    let kv = kernel[(((o * c + ci) * s + kt) * d + kh) * d + kw];
                                    acc += iv * kv;
                                }
                            }
                        }
                    }
                    out[((ot * h1 + oh) * w1 + ow) * c1 + o] = acc;
                }
            }
        }
    }
    (out, [t1, h1, w1, c1])
}
