//! Pretraining and finetuning loops.

mod data;
mod finetuning;
mod optim;
mod pretraining;
mod sampling;
mod schedule;

pub use data::{evenly_spaced, parse_frame_ref, ratio_subset, sample_batch_frames, stack_series, Cycler, Dataset};
pub use finetuning::{
    eval_inputs, evaluate_indices, finetune, init_backbone, load_seg_model, predict_scene, select_best, time_forward, EpochRecord,
    EvalFrames, FinetuneRun, SegModel, BACKBONE_PREFIXES,
};
pub use optim::Optimizer;
pub use pretraining::{fraction_mae, pretrain, PretrainRecord, PretrainRun};
pub use sampling::{draw_length, frames_with_length, ordered_subset, sample_frames, FIXED_DRAW};
pub use schedule::{lr_at, ScheduleParams};
