//! Segmentation model, finetuning loop, best-model selection and
//! inference helpers.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::Backbone;
use crate::config::{Config, FrameMode, ModelConfig, SourceSpec, TeacherInit, MAX_SEQUENCE, MIN_SEQUENCE};
use crate::decoder::{argmax_classes, ce_loss_hard_mining, class_probabilities, Decoder};
use crate::error::{Error, Result};
use crate::eval::{confusion, metrics, ConfusionCounts};
use crate::params::{CheckpointBundle, CheckpointMeta, ParamStore};
use crate::types::{LabelMap, Raster, SceneSample};

use super::data::{evenly_spaced, ratio_subset, sample_batch_frames, stack_series, Dataset};
use super::Optimizer;

/// Backbone shared by all sources plus the multi-source decoder.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub backbone: Backbone,
    pub decoder: Decoder,
}

/// Parameter-name prefixes owned by the backbone (embeddings included).
pub const BACKBONE_PREFIXES: [&str; 2] = ["embed.", "backbone."];

impl SegModel {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, sources: &[SourceSpec]) -> Result<Self> {
        Ok(Self {
            backbone: Backbone::new(store, cfg, sources)?,
            decoder: Decoder::new(store, cfg, sources)?,
        })
    }

    /// Per-source inputs `[B, C, T, H, W]` → logits `[B, classes, H, W]`.
    pub fn forward(&self, inputs: &BTreeMap<String, Tensor>, aux: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let mut feats = BTreeMap::new();
        for (source, x) in inputs {
            feats.insert(source.clone(), self.backbone.forward(x, source)?);
        }
        self.decoder.forward(&feats, aux, train)
    }
}

/// Copies backbone weights from a checkpoint into `store`. Every backbone
/// entry must exist on both sides with equal shapes; otherwise the error
/// lists each offending key.
pub fn init_backbone(store: &ParamStore, bundle: &CheckpointBundle, from: TeacherInit) -> Result<usize> {
    let src = match (from, &bundle.teacher) {
        (TeacherInit::Teacher, Some(t)) => t,
        _ => &bundle.student,
    };
    let in_scope = |k: &str| BACKBONE_PREFIXES.iter().any(|p| k.starts_with(p));
    let mut problems = Vec::new();
    for (k, v) in store.iter().filter(|(k, _)| in_scope(k)) {
        match src.get(k) {
            None => problems.push(format!("{k} (missing from checkpoint)")),
            Some(o) if o.dims() != v.dims() => {
                problems.push(format!("{k} (checkpoint {:?}, model {:?})", o.dims(), v.dims()))
            }
            _ => {}
        }
    }
    for k in src.names().filter(|k| in_scope(k)) {
        if store.get(k).is_none() {
            problems.push(format!("{k} (not in model)"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint does not match the configured backbone: {}",
            problems.join(", ")
        )));
    }
    store.copy_from(src, &BACKBONE_PREFIXES)
}

/// Index of the best score; the earliest one wins ties.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Frame choice at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalFrames {
    /// `n` evenly spread frames.
    Length(usize),
    /// The middle frame repeated to the minimum length.
    Single,
}

impl EvalFrames {
    /// Default for a model trained in `mode` on `len`-frame sequences.
    pub fn for_mode(mode: FrameMode, len: usize, decoder_frames: usize) -> Self {
        match mode {
            FrameMode::Fixed16 => Self::Length(super::FIXED_DRAW.min(len)),
            FrameMode::Variable => Self::Length(decoder_frames.min(len)),
            FrameMode::All => Self::Length(len.min(MAX_SEQUENCE)),
            FrameMode::Single => Self::Single,
        }
    }

    pub fn indices(self, len: usize) -> Vec<usize> {
        match self {
            Self::Length(n) => evenly_spaced(len, n.min(len)),
            Self::Single => vec![len / 2; MIN_SEQUENCE],
        }
    }
}

/// Deterministic inputs for a set of scenes.
pub fn eval_inputs(cfg: &Config, scenes: &[&SceneSample], frames: EvalFrames) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for spec in &cfg.sources {
        let series = scenes
            .iter()
            .map(|s| {
                let x = s
                    .sources
                    .get(&spec.name)
                    .ok_or_else(|| Error::UnknownSource(spec.name.clone()))?;
                x.select_frames(&frames.indices(x.frames))
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(spec.name.clone(), stack_series(&series, DType::F32, &Device::Cpu)?);
    }
    Ok(out)
}

/// Confusion counts of `model` over `indices` (inference mode).
pub fn evaluate_indices(
    model: &SegModel,
    cfg: &Config,
    dataset: &Dataset,
    indices: &[usize],
    frames: EvalFrames,
) -> Result<ConfusionCounts> {
    let k = cfg.model.num_classes;
    let mut total = ConfusionCounts::new(k);
    for chunk in indices.chunks(cfg.training.finetune_batch_size.max(1)) {
        let scenes: Vec<&SceneSample> = chunk.iter().map(|&i| &dataset.scenes[i]).collect();
        let logits = model.forward(&eval_inputs(cfg, &scenes, frames)?, None, false)?;
        let pred = argmax_classes(&logits)?;
        let gt: Vec<u8> = scenes.iter().flat_map(|s| s.label_map.data.iter().copied()).collect();
        total.merge(&confusion(&pred, &gt, k, cfg.training.ignore_index)?)?;
    }
    Ok(total)
}

/// Class map and per-class probabilities `[K, H, W]` of one scene.
pub fn predict_scene(model: &SegModel, cfg: &Config, scene: &SceneSample, frames: EvalFrames) -> Result<(LabelMap, Vec<f32>)> {
    let logits = model.forward(&eval_inputs(cfg, &[scene], frames)?, None, false)?;
    let (_, _, h, w) = logits.dims4()?;
    let classes = argmax_classes(&logits)?;
    let probs = class_probabilities(&logits)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
    Ok((Raster::new(h, w, classes)?, probs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Macro F1 on the selection split.
    pub val_f1: f64,
    pub val_oa: f64,
}

pub struct FinetuneRun {
    pub bundle: CheckpointBundle,
    pub log: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

const FINETUNE_STREAM: u64 = 0x51_7cc1_b727_220a;

/// Trains backbone and decoder with hard-mined cross-entropy and keeps the
/// epoch with the best validation macro F1. `pretrained = None` trains from
/// scratch.
pub fn finetune(cfg: &Config, pretrained: Option<&CheckpointBundle>, dataset: &Dataset, out: Option<&Path>) -> Result<FinetuneRun> {
    cfg.validate()?;
    dataset.check(cfg)?;
    if cfg.model.aux_channels > 0 {
        return Err(Error::Invalid(
            "the dataset carries no auxiliary features; set model.aux_channels to 0".into(),
        ));
    }
    let t = &cfg.training;
    let mut store = ParamStore::new(t.seed, DType::F32);
    let model = SegModel::new(&mut store, &cfg.model, &cfg.sources)?;
    if let Some(bundle) = pretrained {
        let n = init_backbone(&store, bundle, t.init_from)?;
        log::info!("initialized {n} backbone tensors from the checkpoint");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_add(FINETUNE_STREAM));
    let train = ratio_subset(&dataset.indices("train"), t.data_ratio, &mut rng);
    if train.is_empty() {
        return Err(Error::Invalid("no training tiles for finetuning".into()));
    }
    let mut val = dataset.indices("val");
    if val.is_empty() {
        log::warn!("no validation tiles; selecting the model on the training split");
        val = train.clone();
    }
    let min_len = cfg.sources.iter().map(|s| dataset.min_frames(&s.name)).min().unwrap_or(0);
    let eval_frames = EvalFrames::for_mode(t.finetune_frame_mode, min_len, cfg.model.decoder_frames);
    let mut optimizer = Optimizer::new(&store, t, &t.freeze)?;

    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("finetune_log.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut order = train.clone();
    for epoch in 1..=t.finetune_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(t.finetune_batch_size) {
            let mut inputs = BTreeMap::new();
            for spec in &cfg.sources {
                let series = sample_batch_frames(dataset, batch, &spec.name, t.finetune_frame_mode, &mut rng)?;
                inputs.insert(spec.name.clone(), stack_series(&series, DType::F32, &Device::Cpu)?);
            }
            let labels: Vec<u8> = batch
                .iter()
                .flat_map(|&i| dataset.scenes[i].label_map.data.iter().copied())
                .collect();
            let logits = model.forward(&inputs, None, true)?;
            let loss = ce_loss_hard_mining(&logits, &labels, t.keep_fraction, t.min_kept, t.ignore_index)?;
            loss_sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            optimizer.step(&loss, t.finetune_lr)?;
            steps += 1;
        }
        let counts = evaluate_indices(&model, cfg, dataset, &val, eval_frames)?;
        let report = metrics(&counts);
        let record = EpochRecord {
            epoch,
            lr: t.finetune_lr,
            loss: loss_sum / steps.max(1) as f64,
            val_f1: report.macro_average.f1,
            val_oa: report.overall_accuracy,
        };
        log::info!("epoch {epoch}: loss {:.4}, val F1 {:.4}", record.loss, record.val_f1);
        if let Some((f, p)) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(p.as_path(), e))?;
        }
        if best.as_ref().is_none_or(|(f1, _, _)| record.val_f1 > *f1) {
            best = Some((record.val_f1, epoch, store.deep_clone()?));
        }
        log.push(record);
    }
    let (best_epoch, best_store) = match best {
        Some((_, e, s)) => (e, s),
        None => (0, store),
    };
    let bundle = CheckpointBundle::new(
        best_store,
        None,
        CheckpointMeta {
            config_hash: cfg.hash(),
            iteration: best_epoch,
            seed: t.seed,
        },
    )?;
    if let Some(dir) = out {
        bundle.save(&dir.join("checkpoint"))?;
    }
    Ok(FinetuneRun {
        bundle,
        log,
        best_epoch,
    })
}

/// Rebuilds a segmentation model on a finetuned checkpoint's weights.
pub fn load_seg_model(cfg: &Config, bundle: &CheckpointBundle) -> Result<(SegModel, ParamStore)> {
    let mut store = bundle.student.deep_clone()?;
    let before = store.len();
    let model = SegModel::new(&mut store, &cfg.model, &cfg.sources)?;
    if store.len() != before {
        return Err(Error::Checkpoint(format!(
            "checkpoint lacks {} tensors of the configured segmentation model",
            store.len() - before
        )));
    }
    Ok((model, store))
}

/// Mean wall-clock seconds of one single-tile inference pass of a freshly
/// initialized model on random input.
pub fn time_forward(cfg: &ModelConfig, source: &SourceSpec, frames: usize, size: usize, repeats: usize, seed: u64) -> Result<f64> {
    let mut store = ParamStore::new(seed, DType::F32);
    let spec = SourceSpec {
        tile_size: size,
        ..source.clone()
    };
    let model = SegModel::new(&mut store, cfg, std::slice::from_ref(&spec))?;
    let x = Tensor::randn(0f32, 1f32, (1, spec.bands, frames, size, size), &Device::Cpu)?;
    let inputs: BTreeMap<String, Tensor> = [(spec.name.clone(), x)].into();
    model.forward(&inputs, None, false)?;
    let start = std::time::Instant::now();
    for _ in 0..repeats.max(1) {
        model.forward(&inputs, None, false)?;
    }
    Ok(start.elapsed().as_secs_f64() / repeats.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_epoch_is_argmax_with_first_tie() {
        assert_eq!(select_best(&[0.3, 0.7, 0.5]), Some(1));
        assert_eq!(select_best(&[0.4, 0.4]), Some(0));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn eval_frames_defaults() {
        assert_eq!(EvalFrames::for_mode(FrameMode::Fixed16, 24, 16).indices(24).len(), 16);
        assert_eq!(EvalFrames::for_mode(FrameMode::All, 40, 16).indices(40).len(), 32);
        assert_eq!(EvalFrames::Single.indices(10), vec![5, 5, 5]);
    }
}
