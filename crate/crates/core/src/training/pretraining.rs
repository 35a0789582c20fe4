//! The pretraining loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Config, FRACTION_BINS};
use crate::error::{Error, Result};
use crate::params::{CheckpointBundle, CheckpointMeta, ParamStore};
use crate::pretrain::{pretrain_step, FractionBatch, PretrainModel, SourceLosses, StepOptions};

use super::data::{sample_batch_frames, stack_series, Cycler, Dataset};
use super::{lr_at, Optimizer, ScheduleParams};

/// One line of the pretraining log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainRecord {
    pub iteration: usize,
    pub lr: f64,
    /// Absent when the mean teacher is off.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub losses: BTreeMap<String, SourceLosses>,
    pub total: f64,
}

pub struct PretrainRun {
    pub bundle: CheckpointBundle,
    pub log: Vec<PretrainRecord>,
}

/// Stream offset so the data RNG differs from the parameter RNG.
const DATA_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Runs `training.pretrain_iterations` steps over the training split.
/// With `out`, the log goes to `out/pretrain_log.jsonl`, periodic
/// checkpoints to `out/checkpoints/iter_<n>` and the final one to
/// `out/checkpoint`.
pub fn pretrain(cfg: &Config, dataset: &Dataset, out: Option<&Path>) -> Result<PretrainRun> {
    cfg.validate()?;
    dataset.check(cfg)?;
    let t = &cfg.training;
    let train: Vec<usize> = dataset
        .indices("train")
        .into_iter()
        .filter(|&i| {
            let keep = !dataset.scenes[i].fraction.background_only();
            if !keep {
                log::warn!("{}: background-only tile left out of pretraining", dataset.scenes[i].geo_id);
            }
            keep
        })
        .collect();
    if train.is_empty() {
        return Err(Error::Invalid("no training tiles for pretraining".into()));
    }
    let sources: Vec<String> = cfg.sources.iter().map(|s| s.name.clone()).collect();

    let mut student_params = ParamStore::new(t.seed, DType::F32);
    let student = PretrainModel::new(&mut student_params, &cfg.model, &cfg.sources)?;
    let teacher = if t.mean_teacher {
        let mut tp = student_params.deep_clone()?;
        let tm = PretrainModel::new(&mut tp, &cfg.model, &cfg.sources)?;
        Some((tm, tp))
    } else {
        None
    };
    let mut optimizer = Optimizer::new(&student_params, t, &[])?;
    let schedule = ScheduleParams::pretrain(t);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_add(DATA_STREAM));
    let mut cyclers: BTreeMap<&str, Cycler> = sources.iter().map(|s| (s.as_str(), Cycler::new(train.clone()))).collect();

    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
            let p = dir.join("pretrain_log.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let meta = |iteration| CheckpointMeta {
        config_hash: cfg.hash(),
        iteration,
        seed: t.seed,
    };
    let mut log = Vec::with_capacity(t.pretrain_iterations);
    for iteration in 1..=t.pretrain_iterations {
        let lr = lr_at(iteration - 1, &schedule);
        let mut batches = BTreeMap::new();
        for source in &sources {
            let idx = cyclers.get_mut(source.as_str()).expect("cycler").take(t.pretrain_batch_size, &mut rng);
            let series = sample_batch_frames(dataset, &idx, source, t.pretrain_frame_mode, &mut rng)?;
            let images = stack_series(&series, DType::F32, &Device::Cpu)?;
            let targets: Vec<f32> = idx
                .iter()
                .flat_map(|&i| dataset.scenes[i].fraction.0.map(|v| v as f32))
                .collect();
            let targets = Tensor::from_vec(targets, (idx.len(), FRACTION_BINS), &Device::Cpu)?;
            batches.insert(source.clone(), FractionBatch { images, targets });
        }
        let report = pretrain_step(
            &student,
            &student_params,
            teacher.as_ref().map(|(m, p)| (m, p)),
            &mut optimizer,
            &batches,
            &sources,
            StepOptions {
                lr,
                tau: t.ema_tau,
                mean_teacher: t.mean_teacher,
                fraction_supervision: t.fraction_supervision,
                teacher_weight: t.teacher_loss_weight,
            },
        )?;
        let record = PretrainRecord {
            iteration,
            lr,
            tau: t.mean_teacher.then_some(t.ema_tau),
            losses: report.per_source,
            total: report.total,
        };
        if let Some((f, p)) = log_file.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        log.push(record);
        if let Some(dir) = out {
            if t.checkpoint_every > 0 && iteration % t.checkpoint_every == 0 && iteration < t.pretrain_iterations {
                let bundle = CheckpointBundle::new(
                    student_params.deep_clone()?,
                    teacher.as_ref().map(|(_, p)| p.deep_clone()).transpose()?,
                    meta(iteration),
                )?;
                bundle.save(&dir.join("checkpoints").join(format!("iter_{iteration:06}")))?;
            }
        }
    }
    let bundle = CheckpointBundle::new(
        student_params,
        teacher.map(|(_, p)| p),
        meta(t.pretrain_iterations),
    )?;
    if let Some(dir) = out {
        bundle.save(&dir.join("checkpoint"))?;
    }
    Ok(PretrainRun { bundle, log })
}

/// Mean absolute error of predicted fractions against `targets`, averaged
/// over tiles and the 9 bins, with frames picked evenly.
pub fn fraction_mae(
    model: &PretrainModel,
    cfg: &Config,
    dataset: &Dataset,
    indices: &[usize],
    targets: &[[f64; FRACTION_BINS]],
    frames: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for source in &cfg.sources {
        for (chunk, tchunk) in indices.chunks(8).zip(targets.chunks(8)) {
            let series: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let s = &dataset.scenes[i].sources[&source.name];
                    s.select_frames(&super::data::evenly_spaced(s.frames, frames.min(s.frames)))
                })
                .collect::<Result<_>>()?;
            let x = stack_series(&series, DType::F32, &Device::Cpu)?;
            let pred = crate::nn::to_f64_vec(&model.forward(&x, &source.name)?)?;
            for (row, target) in pred.chunks(FRACTION_BINS).zip(tchunk) {
                for (p, q) in row.iter().zip(target) {
                    sum += (p - q).abs();
                    count += 1;
                }
            }
        }
    }
    Ok(sum / count.max(1) as f64)
}
