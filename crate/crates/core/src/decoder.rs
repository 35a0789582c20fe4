//! Multi-source, multi-stage segmentation decoder and the hard-mined
//! cross-entropy loss.
//!
//! Stage features are "rearranged" by packing time into channels
//! (time-major: channel `t * C + c` holds `X[t, h, w, c]`). The decoder is
//! built for a fixed number of temporal slots per stage (those produced by a
//! `decoder_frames`-long input); features with a different temporal extent
//! are linearly resampled along time to that many slots first.
//!
//! Layer `j` (1..=3) upsamples the previous output ×2, concatenates the
//! rearranged stage `4 − j` features of every source (resized to the finest
//! source's grid) plus optional auxiliary features, and fuses them with
//! conv3×3 → batch norm → ReLU → conv3×3. A 1×1 classifier and a final ×4
//! upsample produce logits at input resolution.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};

use crate::backbone::stage_shapes;
use crate::config::{ModelConfig, SourceSpec, UpsampleMode};
use crate::error::{Error, Result};
use crate::nn::{log_softmax_last, resample_time, resize_bilinear, to_f64_vec, BatchNorm2d, Conv2d};
use crate::params::ParamStore;
use crate::types::StageFeatures;

/// `[T, H, W, C]` → `[H, W, T·C]` with time-major packing.
pub fn rearrange(f: &StageFeatures) -> Result<Tensor> {
    let (t, h, w, c) = f.dims();
    Ok(f.data.permute([1, 2, 0, 3])?.contiguous()?.reshape((h, w, t * c))?)
}

/// Inverse of [`rearrange`].
pub fn unrearrange(x: &Tensor, t: usize, stage_index: usize) -> Result<StageFeatures> {
    let (h, w, tc) = x.dims3()?;
    if tc % t != 0 {
        return Err(Error::Shape(format!("{tc} channels do not split into {t} time slots")));
    }
    let data = x.reshape((h, w, t, tc / t))?.permute([2, 0, 1, 3])?.contiguous()?;
    StageFeatures::new(data, stage_index)
}

/// Batched rearrange: `[B, T, H, W, C]` → `[B, T·C, H, W]` (NCHW).
pub fn rearrange_nchw(x: &Tensor) -> Result<Tensor> {
    let (b, t, h, w, c) = x.dims5()?;
    Ok(x.permute([0, 1, 4, 2, 3])?.contiguous()?.reshape((b, t * c, h, w))?)
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub conv1: Conv2d,
    pub bn: BatchNorm2d,
    pub conv2: Conv2d,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), inp, out, 3, true)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out, out, 3, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv1.forward(x)?;
        let y = self.bn.forward(&y, train)?.relu()?;
        self.conv2.forward(&y)
    }
}

/// Per-source geometry the decoder was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSlots {
    pub name: String,
    /// Temporal slots of stages 1..=4.
    pub slots: [usize; 4],
    pub tile_size: usize,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub sources: Vec<SourceSlots>,
    pub stage_channels: [usize; 4],
    pub layers: Vec<DecoderLayer>,
    pub classifier: Conv2d,
    pub learned_up: Option<Conv2d>,
    pub num_classes: usize,
    pub aux_channels: usize,
    pub aux_layer: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, sources: &[SourceSpec]) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Invalid("decoder needs at least one source".into()));
        }
        let mut slots = Vec::new();
        for s in sources {
            let shapes = stage_shapes(cfg, &s.temporal_patch_rule, s.spatial_patch, cfg.decoder_frames, s.tile_size, s.tile_size)?;
            slots.push(SourceSlots {
                name: s.name.clone(),
                slots: [shapes[0].t, shapes[1].t, shapes[2].t, shapes[3].t],
                tile_size: s.tile_size,
            });
        }
        let ch = cfg.stage_channels();
        let channels = Self::concat_channels(&slots, &ch, &cfg.decoder_channels, cfg.aux_channels, cfg.aux_layer);
        let mut layers = Vec::new();
        for j in 0..3 {
            layers.push(DecoderLayer::new(
                store,
                &format!("decoder.layer{}", j + 1),
                channels[j],
                cfg.decoder_channels[j],
            )?);
        }
        let last = cfg.decoder_channels[2];
        let (classifier, learned_up) = match cfg.upsample {
            UpsampleMode::Bilinear => (Conv2d::new(store, "decoder.classifier", last, cfg.num_classes, 1, true)?, None),
            UpsampleMode::Learned => (
                Conv2d::new(store, "decoder.classifier", last, cfg.num_classes, 1, true)?,
                Some(Conv2d::new(store, "decoder.upsample", last, 16 * cfg.num_classes, 1, true)?),
            ),
        };
        Ok(Self {
            sources: slots,
            stage_channels: ch,
            layers,
            classifier,
            learned_up,
            num_classes: cfg.num_classes,
            aux_channels: cfg.aux_channels,
            aux_layer: cfg.aux_layer,
        })
    }

    /// Input channel count of the fusion block of layers 1..=3:
    /// `C_prev + Σ_k T_i^k · C_i (+ C_aux)` with `i = 4 − j`.
    pub fn concat_channels(
        sources: &[SourceSlots],
        stage_channels: &[usize; 4],
        decoder_channels: &[usize; 3],
        aux_channels: usize,
        aux_layer: usize,
    ) -> [usize; 3] {
        let packed = |stage: usize| -> usize {
            sources.iter().map(|s| s.slots[stage] * stage_channels[stage]).sum()
        };
        let mut out = [0; 3];
        for j in 1..=3 {
            let prev = if j == 1 { packed(3) } else { decoder_channels[j - 2] };
            let aux = if j == aux_layer { aux_channels } else { 0 };
            out[j - 1] = prev + packed(3 - j) + aux;
        }
        out
    }

    fn finest(&self) -> &SourceSlots {
        self.sources.iter().max_by_key(|s| s.tile_size).expect("non-empty")
    }

    fn packed(&self, feats: &BTreeMap<String, [Tensor; 4]>, stage: usize, grid: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        for s in &self.sources {
            let f = feats
                .get(&s.name)
                .ok_or_else(|| Error::Invalid(format!("missing features for source `{}`", s.name)))?;
            let x = resample_time(&f[stage], s.slots[stage])?;
            out.push(resize_bilinear(&rearrange_nchw(&x)?, grid, grid)?);
        }
        Ok(out)
    }

    /// Per-source stage features → logits `[B, classes, H, W]` at the finest
    /// source's input resolution. `aux` is `[B, C_aux, H_a, W_a]`.
    pub fn forward(&self, feats: &BTreeMap<String, [Tensor; 4]>, aux: Option<&Tensor>, train: bool) -> Result<Tensor> {
        if feats.is_empty() {
            return Err(Error::Invalid("decoder received no sources".into()));
        }
        match (aux, self.aux_channels) {
            (Some(a), c) if a.dims().get(1) != Some(&c) => {
                return Err(Error::Shape(format!(
                    "auxiliary input has {:?} dims, decoder expects {c} channels",
                    a.dims()
                )))
            }
            (None, c) if c > 0 => return Err(Error::Invalid("decoder expects auxiliary features".into())),
            _ => {}
        }
        let tile = self.finest().tile_size;
        let mut grid = tile / 32;
        let mut u = Tensor::cat(&self.packed(feats, 3, grid)?, 1)?;
        for (j, layer) in self.layers.iter().enumerate() {
            grid *= 2;
            let mut parts = vec![resize_bilinear(&u, grid, grid)?];
            parts.extend(self.packed(feats, 2 - j, grid)?);
            if j + 1 == self.aux_layer {
                if let Some(a) = aux {
                    parts.push(resize_bilinear(a, grid, grid)?);
                }
            }
            u = layer.forward(&Tensor::cat(&parts, 1)?, train)?;
        }
        match &self.learned_up {
            None => resize_bilinear(&self.classifier.forward(&u)?, tile, tile),
            Some(up) => {
                let coarse = resize_bilinear(&self.classifier.forward(&u)?, tile, tile)?;
                let fine = pixel_shuffle(&up.forward(&u)?, 4)?;
                Ok((coarse + fine)?)
            }
        }
    }
}

/// `[B, C·r², H, W]` → `[B, C, H·r, W·r]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let oc = c / (r * r);
    Ok(x.reshape(vec![b, oc, r, r, h, w])?
        .permute([0, 1, 4, 2, 5, 3])?
        .contiguous()?
        .reshape((b, oc, h * r, w * r))?)
}

/// Per-pixel cross-entropy `[B, K, H, W]` × labels `[B·H·W]` → losses of the
/// non-ignored pixels (in pixel order) and their flat indices.
pub fn pixel_cross_entropy(logits: &Tensor, labels: &[u8], ignore: Option<u8>) -> Result<(Tensor, Vec<u32>)> {
    let (b, k, h, w) = logits.dims4()?;
    if labels.len() != b * h * w {
        return Err(Error::Shape(format!("{} labels for {b}x{h}x{w} logits", labels.len())));
    }
    let mut keep = Vec::new();
    let mut targets = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if Some(l) == ignore {
            continue;
        }
        if l as usize >= k {
            return Err(Error::Invalid(format!("label {l} outside the {k} decoder classes")));
        }
        keep.push(i as u32);
        targets.push(l as u32);
    }
    if keep.is_empty() {
        return Err(Error::Invalid("every pixel is ignored".into()));
    }
    let flat = logits.permute([0, 2, 3, 1])?.reshape((b * h * w, k))?;
    let idx = Tensor::from_vec(keep.clone(), keep.len(), logits.device())?;
    let sel = flat.index_select(&idx, 0)?;
    let lp = log_softmax_last(&sel)?;
    let tgt = Tensor::from_vec(targets, (keep.len(), 1), logits.device())?;
    let nll = lp.gather(&tgt, 1)?.squeeze(1)?.neg()?;
    Ok((nll, keep))
}

/// Number of pixels kept by hard mining out of `valid`.
pub fn mined_count(valid: usize, keep_fraction: f64, min_kept: usize) -> usize {
    let by_fraction = (keep_fraction * valid as f64).ceil() as usize;
    by_fraction.max(min_kept).min(valid)
}

/// Mean of a loss vector over its `mined_count` largest entries.
pub fn hard_mined_mean(losses: &Tensor, keep_fraction: f64, min_kept: usize) -> Result<Tensor> {
    let n = losses.dims1()?;
    let k = mined_count(n, keep_fraction, min_kept);
    if k == n {
        return Ok(losses.mean_all()?);
    }
    let values = to_f64_vec(losses)?;
    let mut order: Vec<u32> = (0..n as u32).collect();
    // stable sort: ties keep pixel order
    order.sort_by(|&a, &b| values[b as usize].total_cmp(&values[a as usize]));
    order.truncate(k);
    let idx = Tensor::from_vec(order, k, losses.device())?;
    Ok(losses.index_select(&idx, 0)?.mean_all()?)
}

/// Cross-entropy averaged over the hardest `max(⌈ρ·P⌉, min_kept)` pixels.
pub fn ce_loss_hard_mining(
    logits: &Tensor,
    labels: &[u8],
    keep_fraction: f64,
    min_kept: usize,
    ignore: Option<u8>,
) -> Result<Tensor> {
    let (losses, _) = pixel_cross_entropy(logits, labels, ignore)?;
    hard_mined_mean(&losses, keep_fraction, min_kept)
}

/// Per-pixel argmax of `[B, K, H, W]` logits as `u8` class indices.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<u8>> {
    let idx = logits.to_dtype(DType::F32)?.argmax(1)?.flatten_all()?.to_vec1::<u32>()?;
    Ok(idx.into_iter().map(|v| v as u8).collect())
}

/// Softmax probabilities `[B, K, H, W]`.
pub fn class_probabilities(logits: &Tensor) -> Result<Tensor> {
    let x = logits.permute([0, 2, 3, 1])?;
    Ok(crate::nn::softmax_last(&x)?.permute([0, 3, 1, 2])?.contiguous()?)
}
