//! Fraction-regression pretraining objective: global pooling, the MLP
//! fraction head, L1 supervision, teacher consistency and EMA updates.

use std::collections::BTreeMap;

use candle_core::{Tensor, D};
use serde::Serialize;

use crate::backbone::Backbone;
use crate::config::{ModelConfig, SourceSpec, FRACTION_BINS};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::training::Optimizer;

/// Mean over all (t, h, w) positions: `[B, T, H, W, C]` → `[B, C]`.
pub fn global_pool(x4: &Tensor) -> Result<Tensor> {
    Ok(x4.mean([1, 2, 3])?)
}

/// `sigmoid(W2 · relu(W1 · x + b1) + b2)`
#[derive(Debug, Clone)]
pub struct FractionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FractionHead {
    pub fn new(store: &mut ParamStore, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, "head.fc1", input, hidden, true)?,
            fc2: Linear::new(store, "head.fc2", hidden, FRACTION_BINS, true)?,
        })
    }

    /// `[B, C_4]` → `[B, 9]` with entries in (0, 1).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.fc2.forward(&self.fc1.forward(x)?.relu()?)?;
        sigmoid(&z)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "fraction loss operands differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.dims().last() != Some(&FRACTION_BINS) {
        return Err(Error::Shape(format!("fraction tensors must end in {FRACTION_BINS}, got {:?}", a.dims())));
    }
    Ok(())
}

/// Per-sample sum of absolute differences, averaged over the batch.
pub fn l1_fraction_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_pair(pred, target)?;
    Ok((pred - target)?.abs()?.sum(D::Minus1)?.mean_all()?)
}

/// L1 distance to the teacher's prediction, which is treated as a constant.
pub fn teacher_consistency_loss(teacher: &Tensor, student: &Tensor) -> Result<Tensor> {
    l1_fraction_loss(student, &teacher.detach())
}

/// `θ_t ← (1 − τ)·θ_t + τ·θ_s` for every entry (buffers included).
pub fn ema_update(teacher: &ParamStore, student: &ParamStore, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Invalid(format!("EMA step {tau} outside (0, 1)")));
    }
    crate::params::check_mirrors(teacher, student)?;
    for (name, t) in teacher.iter() {
        let s = student.get(name).expect("mirrors checked");
        let updated = ((t.as_tensor() * (1.0 - tau))? + (s.as_tensor() * tau)?)?;
        t.set(&updated)?;
    }
    Ok(())
}

/// Backbone plus fraction head.
#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub backbone: Backbone,
    pub head: FractionHead,
}

impl PretrainModel {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, sources: &[SourceSpec]) -> Result<Self> {
        let backbone = Backbone::new(store, config, sources)?;
        let head = FractionHead::new(store, config.stage_channels()[3], config.head_hidden())?;
        Ok(Self { backbone, head })
    }

    /// `[B, C, T, H, W]` → predicted fractions `[B, 9]`.
    pub fn forward(&self, x: &Tensor, source: &str) -> Result<Tensor> {
        let outs = self.backbone.forward(x, source)?;
        self.head.forward(&global_pool(&outs[3])?)
    }
}

/// One source's batch: images `[B, C, T, H, W]` and targets `[B, 9]`.
#[derive(Debug, Clone)]
pub struct FractionBatch {
    pub images: Tensor,
    pub targets: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub lr: f64,
    pub tau: f64,
    pub mean_teacher: bool,
    pub fraction_supervision: bool,
    pub teacher_weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SourceLosses {
    /// Supervised L1 term, absent when fraction supervision is off.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_p: Option<f64>,
    /// Teacher term, absent when the mean teacher is off.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_t: Option<f64>,
}

impl SourceLosses {
    pub fn total(&self, teacher_weight: f64) -> f64 {
        self.l_p.unwrap_or(0.0) + teacher_weight * self.l_t.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub per_source: BTreeMap<String, SourceLosses>,
    pub total: f64,
}

/// One pretraining iteration over independent per-source batches: student
/// and teacher forward per source, a single optimizer step on the summed
/// loss, then one EMA update of the teacher.
pub fn pretrain_step(
    student: &PretrainModel,
    student_params: &ParamStore,
    teacher: Option<(&PretrainModel, &ParamStore)>,
    optimizer: &mut Optimizer,
    batches: &BTreeMap<String, FractionBatch>,
    sources: &[String],
    opts: StepOptions,
) -> Result<StepReport> {
    let use_teacher = opts.mean_teacher && teacher.is_some();
    if !opts.fraction_supervision && !use_teacher {
        return Err(Error::Invalid("no active loss term".into()));
    }
    let mut total: Option<Tensor> = None;
    let mut per_source = BTreeMap::new();
    for source in sources {
        let Some(batch) = batches.get(source) else {
            log::warn!("no batch for source `{source}` this step; skipping it");
            continue;
        };
        let pred = student.forward(&batch.images, source)?;
        let mut losses = SourceLosses::default();
        let mut terms: Vec<Tensor> = Vec::new();
        if opts.fraction_supervision {
            let lp = l1_fraction_loss(&pred, &batch.targets)?;
            losses.l_p = Some(lp.to_dtype(candle_core::DType::F64)?.to_scalar()?);
            terms.push(lp);
        }
        if use_teacher {
            let (tmodel, _) = teacher.unwrap();
            let q = tmodel.forward(&batch.images, source)?.detach();
            let lt = teacher_consistency_loss(&q, &pred)?;
            losses.l_t = Some(lt.to_dtype(candle_core::DType::F64)?.to_scalar()?);
            terms.push((lt * opts.teacher_weight)?);
        }
        for t in terms {
            total = Some(match total {
                None => t,
                Some(acc) => (acc + t)?,
            });
        }
        per_source.insert(source.clone(), losses);
    }
    let Some(total) = total else {
        return Err(Error::Invalid("no source batch available for this step".into()));
    };
    let total_value: f64 = total.to_dtype(candle_core::DType::F64)?.to_scalar()?;
    optimizer.step(&total, opts.lr)?;
    if use_teacher {
        let (_, tparams) = teacher.unwrap();
        ema_update(tparams, student_params, opts.tau)?;
    }
    Ok(StepReport {
        per_source,
        total: total_value,
    })
}
