//! Configuration schema: model hyper-parameters, per-source descriptions,
//! training settings and synthetic-data settings.
//!
//! A config file is a JSON object with the top-level keys `model`, `sources`,
//! `training` and `data`. Every key except `sources` may be omitted, in which
//! case the documented defaults apply.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Product of the spatial reduction factors of the four stages (4·2·2·2).
pub const SPATIAL_REDUCTION: usize = 32;

/// Shortest and longest sequence the temporal patch rule accepts.
pub const MIN_SEQUENCE: usize = 3;
pub const MAX_SEQUENCE: usize = 32;

/// Number of entries of a land-cover fraction vector (background + 8 classes).
pub const FRACTION_BINS: usize = 9;

/// Maps a sequence length to the temporal patch size of the first stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalPatchRule {
    /// Sequences with at least this many frames use `long`.
    pub threshold: usize,
    pub short: usize,
    pub long: usize,
}

impl Default for TemporalPatchRule {
    fn default() -> Self {
        Self {
            threshold: 16,
            short: 2,
            long: 4,
        }
    }
}

impl TemporalPatchRule {
    pub fn patch_for(&self, frames: usize) -> Result<usize> {
        if !(MIN_SEQUENCE..=MAX_SEQUENCE).contains(&frames) {
            return Err(Error::Invalid(format!(
                "sequence length {frames} outside the supported range [{MIN_SEQUENCE}, {MAX_SEQUENCE}]"
            )));
        }
        Ok(if frames < self.threshold {
            self.short
        } else {
            self.long
        })
    }

    fn validate(&self, field: &str) -> Result<()> {
        for (name, v) in [("short", self.short), ("long", self.long)] {
            if v != 2 && v != 4 {
                return Err(Error::config(
                    format!("{field}.{name}"),
                    format!("temporal patch must be 2 or 4, got {v}"),
                ));
            }
        }
        if self.long % self.short != 0 {
            return Err(Error::config(
                field,
                "`short` must divide `long` (the short kernel is derived from the long one)",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub name: String,
    pub bands: usize,
    pub tile_size: usize,
    #[serde(default = "default_cadence")]
    pub cadence_days: usize,
    #[serde(default)]
    pub temporal_patch_rule: TemporalPatchRule,
    #[serde(default = "default_spatial_patch")]
    pub spatial_patch: usize,
}

fn default_cadence() -> usize {
    10
}

fn default_spatial_patch() -> usize {
    4
}

impl SourceSpec {
    pub fn new(name: &str, bands: usize, tile_size: usize) -> Self {
        Self {
            name: name.to_string(),
            bands,
            tile_size,
            cadence_days: default_cadence(),
            temporal_patch_rule: TemporalPatchRule::default(),
            spatial_patch: default_spatial_patch(),
        }
    }

    pub fn modis(tile_size: usize) -> Self {
        Self {
            cadence_days: 8,
            ..Self::new("modis", 7, tile_size)
        }
    }

    pub fn landsat(tile_size: usize) -> Self {
        Self {
            cadence_days: 16,
            ..Self::new("landsat", 6, tile_size)
        }
    }

    pub fn sentinel2(tile_size: usize) -> Self {
        Self::new("sentinel2", 10, tile_size)
    }

    pub fn validate(&self, idx: usize) -> Result<()> {
        let field = |f: &str| format!("sources[{idx}].{f}");
        if self.name.is_empty() {
            return Err(Error::config(field("name"), "must not be empty"));
        }
        if self.bands == 0 {
            return Err(Error::config(field("bands"), "must be at least 1"));
        }
        if self.tile_size == 0 || self.tile_size % SPATIAL_REDUCTION != 0 {
            return Err(Error::config(
                field("tile_size"),
                format!(
                    "{} is not divisible by {SPATIAL_REDUCTION} (spatial factors 4*2*2*2 must divide the tile)",
                    self.tile_size
                ),
            ));
        }
        if self.spatial_patch != 4 {
            return Err(Error::config(
                field("spatial_patch"),
                "only a spatial patch of 4 keeps the 32-pixel shape law",
            ));
        }
        self.temporal_patch_rule
            .validate(&field("temporal_patch_rule"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    /// Fixed ×4 bilinear resize of the logits.
    Bilinear,
    /// Learned depth-to-space projection (1×1 conv to 16·classes, then pixel shuffle).
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    /// (temporal N, spatial M)
    pub window: [usize; 2],
    pub spatial_merge_factors: [usize; 3],
    pub temporal_merge_factors: [usize; 3],
    pub temporal_downsampling: bool,
    pub num_fraction_classes: usize,
    /// Hidden width of the fraction head. `None` means C_4.
    pub hidden_dim: Option<usize>,
    pub mlp_ratio: usize,
    /// LayerNorm right after the patch embedding.
    pub patch_norm: bool,
    pub decoder_channels: [usize; 3],
    /// Temporal slots per stage the decoder is built for, expressed as the
    /// sequence length they come from.
    pub decoder_frames: usize,
    pub upsample: UpsampleMode,
    pub num_classes: usize,
    pub aux_channels: usize,
    /// Decoder layer (1..=3) that receives auxiliary features.
    pub aux_layer: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            depths: [2, 2, 2, 2],
            heads: [2, 2, 4, 4],
            window: [2, 7],
            spatial_merge_factors: [2, 2, 2],
            temporal_merge_factors: [2, 2, 2],
            temporal_downsampling: true,
            num_fraction_classes: FRACTION_BINS,
            hidden_dim: None,
            mlp_ratio: 4,
            patch_norm: true,
            decoder_channels: [128, 64, 32],
            decoder_frames: 16,
            upsample: UpsampleMode::Bilinear,
            num_classes: 2,
            aux_channels: 0,
            aux_layer: 3,
        }
    }
}

impl ModelConfig {
    /// Channel width of every stage, C_{i+1} = 2·C_i.
    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.embed_dim;
        [c, 2 * c, 4 * c, 8 * c]
    }

    pub fn head_hidden(&self) -> usize {
        self.hidden_dim.unwrap_or(self.stage_channels()[3])
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("model.{name}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("embed_dim", self.embed_dim)?;
        positive("mlp_ratio", self.mlp_ratio)?;
        positive("num_classes", self.num_classes)?;
        positive("decoder_frames", self.decoder_frames)?;
        for (i, &d) in self.depths.iter().enumerate() {
            positive(&format!("depths[{i}]"), d)?;
        }
        for (i, &w) in self.window.iter().enumerate() {
            positive(&format!("window[{i}]"), w)?;
        }
        for (i, (&h, c)) in self.heads.iter().zip(self.stage_channels()).enumerate() {
            positive(&format!("heads[{i}]"), h)?;
            if c % h != 0 {
                return Err(Error::config(
                    format!("model.heads[{i}]"),
                    format!("{h} heads do not divide stage width {c}"),
                ));
            }
        }
        if self.spatial_merge_factors != [2, 2, 2] {
            return Err(Error::config(
                "model.spatial_merge_factors",
                "must be [2, 2, 2] to keep the 32-pixel shape law",
            ));
        }
        for (i, &s) in self.temporal_merge_factors.iter().enumerate() {
            positive(&format!("temporal_merge_factors[{i}]"), s)?;
        }
        if self.num_fraction_classes != FRACTION_BINS {
            return Err(Error::config(
                "model.num_fraction_classes",
                format!("must be {FRACTION_BINS} (background + 8 land covers)"),
            ));
        }
        if let Some(d) = self.hidden_dim {
            positive("hidden_dim", d)?;
        }
        for (i, &c) in self.decoder_channels.iter().enumerate() {
            positive(&format!("decoder_channels[{i}]"), c)?;
        }
        if !(1..=3).contains(&self.aux_layer) {
            return Err(Error::config("model.aux_layer", "must be 1, 2 or 3"));
        }
        if !(MIN_SEQUENCE..=MAX_SEQUENCE).contains(&self.decoder_frames) {
            return Err(Error::config(
                "model.decoder_frames",
                format!("must lie in [{MIN_SEQUENCE}, {MAX_SEQUENCE}]"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayShape {
    Cosine,
    Linear,
}

/// How frames are drawn from a sequence for one training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameMode {
    /// 16 ordered frames drawn without replacement.
    Fixed16,
    /// A length drawn uniformly from [3, 32], then that many ordered frames.
    Variable,
    /// The whole sequence.
    All,
    /// One frame at a random position, repeated to the minimum length.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherInit {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    pub seed: u64,
    pub pretrain_batch_size: usize,
    pub pretrain_iterations: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_iterations: usize,
    pub decay: DecayShape,
    pub ema_tau: f64,
    pub mean_teacher: bool,
    pub fraction_supervision: bool,
    pub teacher_loss_weight: f64,
    pub pretrain_frame_mode: FrameMode,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    /// Write an intermediate checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_batch_size: usize,
    pub finetune_frame_mode: FrameMode,
    pub keep_fraction: f64,
    pub min_kept: usize,
    pub data_ratio: f64,
    pub init_from: TeacherInit,
    /// Parameter-name prefixes excluded from finetuning updates.
    pub freeze: Vec<String>,
    pub ignore_index: Option<u8>,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            seed: 42,
            pretrain_batch_size: 80,
            pretrain_iterations: 200,
            lr_start: 1e-7,
            lr_peak: 1e-5,
            lr_floor: 1e-6,
            warmup_iterations: 5000,
            decay: DecayShape::Cosine,
            ema_tau: 0.001,
            mean_teacher: true,
            fraction_supervision: true,
            teacher_loss_weight: 1.0,
            pretrain_frame_mode: FrameMode::Fixed16,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 1.0,
            checkpoint_every: 0,
            finetune_lr: 6e-5,
            finetune_epochs: 50,
            finetune_batch_size: 16,
            finetune_frame_mode: FrameMode::Fixed16,
            keep_fraction: 0.25,
            min_kept: 4096,
            data_ratio: 1.0,
            init_from: TeacherInit::Teacher,
            freeze: Vec::new(),
            ignore_index: Some(255),
        }
    }
}

pub const DATA_RATIOS: [f64; 7] = [1.0, 0.5, 0.33, 0.25, 0.2, 0.1, 0.05];

impl TrainingSettings {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_batch_size == 0 {
            return Err(Error::config("training.pretrain_batch_size", "must be positive"));
        }
        if self.finetune_batch_size == 0 {
            return Err(Error::config("training.finetune_batch_size", "must be positive"));
        }
        if !(self.lr_start < self.lr_peak) {
            return Err(Error::config("training.lr_start", "must be below lr_peak"));
        }
        if !(self.lr_floor < self.lr_peak) {
            return Err(Error::config("training.lr_floor", "must be below lr_peak"));
        }
        if !(self.ema_tau > 0.0 && self.ema_tau < 1.0) {
            return Err(Error::config("training.ema_tau", "must lie in (0, 1)"));
        }
        if !self.mean_teacher && !self.fraction_supervision {
            return Err(Error::config(
                "training.fraction_supervision",
                "disabling both fraction supervision and the mean teacher leaves no loss",
            ));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::config("training.keep_fraction", "must lie in (0, 1]"));
        }
        if !DATA_RATIOS.iter().any(|r| (r - self.data_ratio).abs() < 1e-12) {
            return Err(Error::config(
                "training.data_ratio",
                format!("must be one of {DATA_RATIOS:?}"),
            ));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::config("training.grad_clip", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub dir: String,
    pub tiles: usize,
    /// Frames per annual sequence.
    pub frames: usize,
    pub num_classes: usize,
    pub noise: f64,
    /// Classes share amplitude and offset and differ only in phase.
    pub phase_only: bool,
    pub val_fraction: f64,
    /// Blur radius of the latent class fields, in fine pixels.
    pub smoothing: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            dir: "data".to_string(),
            tiles: 16,
            frames: 24,
            num_classes: 2,
            noise: 0.05,
            phase_only: false,
            val_fraction: 0.25,
            smoothing: 6,
        }
    }
}

impl DataSettings {
    pub fn validate(&self) -> Result<()> {
        if self.tiles == 0 {
            return Err(Error::config("data.tiles", "must be positive"));
        }
        if !(MIN_SEQUENCE..=366).contains(&self.frames) {
            return Err(Error::config("data.frames", "must lie in [3, 366]"));
        }
        if !(1..=FRACTION_BINS).contains(&self.num_classes) {
            return Err(Error::config("data.num_classes", "must lie in [1, 9]"));
        }
        if self.noise < 0.0 {
            return Err(Error::config("data.noise", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("data.val_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub model: ModelConfig,
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub training: TrainingSettings,
    #[serde(default)]
    pub data: DataSettings,
}

impl Config {
    pub fn new(sources: Vec<SourceSpec>) -> Self {
        Self {
            model: ModelConfig::default(),
            sources,
            training: TrainingSettings::default(),
            data: DataSettings::default(),
        }
    }

    /// Desk-scale preset: one 64-pixel Sentinel-2 source, batch size 4 and
    /// a 20-iteration warmup.
    pub fn toy() -> Self {
        let mut cfg = Self::new(vec![SourceSpec::sentinel2(64)]);
        cfg.training.pretrain_batch_size = 4;
        cfg.training.finetune_batch_size = 4;
        cfg.training.warmup_iterations = 20;
        cfg.training.min_kept = 256;
        cfg.training.finetune_epochs = 10;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| {
            // serde names the offending field in its message
            Error::config("<document>", e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::config("sources", "at least one source is required"));
        }
        for (i, s) in self.sources.iter().enumerate() {
            s.validate(i)?;
            if self.sources[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::config(
                    format!("sources[{i}].name"),
                    format!("duplicate source `{}`", s.name),
                ));
            }
        }
        let finest = self.sources.iter().map(|s| s.tile_size).max().unwrap();
        for (i, s) in self.sources.iter().enumerate() {
            if finest % s.tile_size != 0 {
                return Err(Error::config(
                    format!("sources[{i}].tile_size"),
                    format!("{} does not divide the finest tile size {finest}", s.tile_size),
                ));
            }
        }
        self.model.validate()?;
        self.training.validate()?;
        self.data.validate()
    }

    pub fn source(&self, name: &str) -> Result<&SourceSpec> {
        self.sources
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSource(name.to_string()))
    }

    /// Short content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Reads and validates a JSON config file.
pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Config::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_toy_defaults() {
        let cfg = Config::from_json(
            r#"{"sources": [{"name": "sentinel2", "bands": 10, "tile_size": 64}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.model.embed_dim, 32);
        assert_eq!(cfg.model.depths, [2, 2, 2, 2]);
        assert_eq!(cfg.model.heads, [2, 2, 4, 4]);
        assert_eq!(cfg.model.window, [2, 7]);
        assert_eq!(cfg.sources[0].spatial_patch, 4);
        assert_eq!(cfg.training.ema_tau, 0.001);
        assert_eq!(cfg.training.finetune_lr, 6e-5);
    }

    #[test]
    fn tile_not_divisible_by_32_is_rejected() {
        let err = Config::from_json(
            r#"{"sources": [{"name": "sentinel2", "bands": 10, "tile_size": 100}]}"#,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("not divisible by 32"), "{msg}");
        assert!(msg.contains("tile_size"), "{msg}");
    }

    #[test]
    fn paper_scale_channels_double_per_stage() {
        let cfg = Config::from_json(
            r#"{"model": {"embed_dim": 128, "depths": [2, 2, 6, 2], "heads": [4, 8, 16, 32]},
                "sources": [{"name": "sentinel2", "bands": 10, "tile_size": 224}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.model.stage_channels(), [128, 256, 512, 1024]);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = Config::from_json(
            r#"{"model": {"embedd_dim": 3}, "sources": [{"name": "s", "bands": 1, "tile_size": 32}]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("embedd_dim"));
    }

    #[test]
    fn heads_must_divide_width() {
        let err = Config::from_json(
            r#"{"model": {"heads": [3, 2, 4, 4]}, "sources": [{"name": "s", "bands": 1, "tile_size": 32}]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("heads[0]"));
    }

    #[test]
    fn round_trip_is_stable() {
        let mut cfg = Config::new(vec![SourceSpec::sentinel2(64), SourceSpec::modis(32)]);
        cfg.training.freeze = vec!["backbone.stage1".into()];
        let again = Config::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn temporal_rule_boundaries() {
        let rule = TemporalPatchRule::default();
        assert_eq!(rule.patch_for(8).unwrap(), 2);
        assert_eq!(rule.patch_for(15).unwrap(), 2);
        assert_eq!(rule.patch_for(16).unwrap(), 4);
        assert_eq!(rule.patch_for(32).unwrap(), 4);
        assert!(rule.patch_for(2).is_err());
        assert!(rule.patch_for(33).is_err());
    }
}
