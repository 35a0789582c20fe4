use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use agrimap_core::backbone::stage_shapes;
use agrimap_core::config::{load_config, Config, FrameMode, TeacherInit};
use agrimap_core::eval::{flops_estimate, metrics, plots};
use agrimap_core::fractions::{build_manifest, ClassMapping, TileSequence};
use agrimap_core::params::CheckpointBundle;
use agrimap_core::DType;
use agrimap_core::synthetic::{gen_dataset, label_path, read_labels, write_dataset};
use agrimap_core::training::{
    evaluate_indices, finetune, load_seg_model, parse_frame_ref, predict_scene, pretrain, Dataset, EvalFrames,
};

#[derive(Parser)]
#[command(name = "agrimap", version, about = "Multi-source temporal crop mapping: data, pretraining, finetuning, evaluation")]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace)
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file [default: built-in toy preset]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed, overrides training.seed [default: from config, 42]
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Restrict to these sources (repeatable) [default: all configured]
    #[arg(long = "source")]
    sources: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fixed16,
    Variable,
    All,
    Single,
}

impl From<ModeArg> for FrameMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fixed16 => FrameMode::Fixed16,
            ModeArg::Variable => FrameMode::Variable,
            ModeArg::All => FrameMode::All,
            ModeArg::Single => FrameMode::Single,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Student,
    Teacher,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-source dataset
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of tiles [default: config data.tiles, 16]
        #[arg(long)]
        tiles: Option<usize>,
        /// Frames per annual sequence [default: config data.frames, 24]
        #[arg(long)]
        frames: Option<usize>,
        /// Number of classes [default: config data.num_classes, 2]
        #[arg(long)]
        classes: Option<usize>,
        /// Gaussian noise level [default: config data.noise, 0.05]
        #[arg(long)]
        noise: Option<f64>,
        /// Classes differ only in phenology phase
        #[arg(long)]
        phase_only: bool,
        /// Worker threads
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Compute per-tile land-cover fractions and write a filtered manifest
    ExtractFractions {
        #[command(flatten)]
        common: Common,
        /// Dataset directory
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Class mapping JSON (code -> bin) [default: identity]
        #[arg(long)]
        mapping: Option<PathBuf>,
        /// Minimum frames per sequence
        #[arg(long, default_value_t = 16)]
        min_len: usize,
    },
    /// Fraction-regression pretraining with a mean teacher
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset directory
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Iterations [default: config training.pretrain_iterations, 200]
        #[arg(long)]
        iterations: Option<usize>,
        /// Per-source batch size [default: config training.pretrain_batch_size]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Frame sampling [default: config training.pretrain_frame_mode, fixed16]
        #[arg(long, value_enum)]
        frame_mode: Option<ModeArg>,
        /// EMA coefficient [default: config training.ema_tau, 0.001]
        #[arg(long)]
        tau: Option<f64>,
        /// Disable the mean teacher
        #[arg(long)]
        no_mean_teacher: bool,
        /// Disable fraction supervision (teacher term only)
        #[arg(long)]
        no_fraction_supervision: bool,
        /// Checkpoint cadence in iterations, 0 = final only [default: config training.checkpoint_every, 0]
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Train backbone and decoder for segmentation
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Dataset directory
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Pretrained checkpoint directory [default: none, train from scratch]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Epochs [default: config training.finetune_epochs]
        #[arg(long)]
        epochs: Option<usize>,
        /// Batch size [default: config training.finetune_batch_size]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Learning rate [default: config training.finetune_lr, 6e-5]
        #[arg(long)]
        lr: Option<f64>,
        /// Training data ratio, one of 1, .5, .33, .25, .2, .1, .05 [default: config training.data_ratio, 1]
        #[arg(long)]
        data_ratio: Option<f64>,
        /// Frame sampling [default: config training.finetune_frame_mode, fixed16]
        #[arg(long, value_enum)]
        frame_mode: Option<ModeArg>,
        /// Parameter prefix to freeze (repeatable) [default: config training.freeze, none]
        #[arg(long)]
        freeze: Vec<String>,
        /// Which pretrained weights initialize the backbone [default: config training.init_from, teacher]
        #[arg(long, value_enum)]
        init_from: Option<InitArg>,
    },
    /// Score a finetuned checkpoint and write a report with plots
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Finetuned checkpoint directory
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to score (train, val or all)
        #[arg(long, default_value = "val")]
        split: String,
        /// Evaluate with this many evenly spread frames [default: from the frame mode]
        #[arg(long = "T")]
        frames: Option<usize>,
        /// Positive class for the per-class report
        #[arg(long, default_value_t = 1)]
        positive: usize,
    },
    /// Write class maps for tiles
    Predict {
        #[command(flatten)]
        common: Common,
        /// Dataset directory
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Finetuned checkpoint directory
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tile ids to predict (repeatable) [default: every tile]
        #[arg(long = "tile")]
        tiles: Vec<String>,
        /// Also dump per-class probabilities as f32
        #[arg(long)]
        probabilities: bool,
        /// Use this many evenly spread frames [default: from the frame mode]
        #[arg(long = "T")]
        frames: Option<usize>,
    },
    /// Print the four-stage shape chain
    InspectShapes {
        #[command(flatten)]
        common: Common,
        /// Sequence length
        #[arg(long = "T", default_value_t = 16)]
        frames: usize,
        /// Tile size (height = width) [default: each source's tile size]
        #[arg(long)]
        size: Option<usize>,
    },
    /// Compare forward cost with and without temporal downsampling
    BenchFlops {
        #[command(flatten)]
        common: Common,
        /// Sequence length
        #[arg(long = "T", default_value_t = 16)]
        frames: usize,
        /// Tile size [default: first source's tile size]
        #[arg(long)]
        size: Option<usize>,
        /// Forward passes timed per variant, 0 disables timing
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}

/// Applies `value` to `slot` and logs the override.
fn set<T: std::fmt::Debug + PartialEq>(slot: &mut T, value: Option<T>, key: &str) {
    if let Some(v) = value {
        if *slot != v {
            log::info!("flag overrides {key}: {:?} -> {:?}", slot, v);
        }
        *slot = v;
    }
}

/// Defaults, then the config file, then flags.
fn resolve(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => {
            log::info!("config file {}", p.display());
            load_config(p).with_context(|| format!("loading {}", p.display()))?
        }
        None => {
            log::info!("no config file; using the toy preset");
            Config::toy()
        }
    };
    set(&mut cfg.training.seed, common.seed, "training.seed");
    if !common.sources.is_empty() {
        for s in &common.sources {
            cfg.source(s)?;
        }
        cfg.sources.retain(|s| common.sources.contains(&s.name));
        log::info!("flag restricts sources to {:?}", common.sources);
    }
    Ok(cfg)
}

/// Validates and writes the resolved config into the run directory.
fn snapshot(cfg: &Config, out: &Path, command: &str) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), cfg.to_json()?)?;
    let run = json!({
        "command": command,
        "seed": cfg.training.seed,
        "config_hash": cfg.hash(),
    });
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&run)?)?;
    Ok(())
}

fn load_bundle(path: &Path) -> Result<CheckpointBundle> {
    CheckpointBundle::load(path, DType::F32).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn eval_frames(cfg: &Config, dataset: &Dataset, frames: Option<usize>) -> EvalFrames {
    match frames {
        Some(n) => EvalFrames::Length(n),
        None => {
            let len = cfg.sources.iter().map(|s| dataset.min_frames(&s.name)).min().unwrap_or(0);
            EvalFrames::for_mode(cfg.training.finetune_frame_mode, len, cfg.model.decoder_frames)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            common,
            tiles,
            frames,
            classes,
            noise,
            phase_only,
            workers,
        } => {
            let mut cfg = resolve(&common)?;
            set(&mut cfg.data.tiles, tiles, "data.tiles");
            set(&mut cfg.data.frames, frames, "data.frames");
            set(&mut cfg.data.num_classes, classes, "data.num_classes");
            set(&mut cfg.data.noise, noise, "data.noise");
            if phase_only {
                set(&mut cfg.data.phase_only, Some(true), "data.phase_only");
            }
            set(&mut cfg.data.dir, Some(common.out.display().to_string()), "data.dir");
            snapshot(&cfg, &common.out, "gen-data")?;
            let scenes = gen_dataset(&cfg, workers)?;
            let manifest = write_dataset(&common.out, &cfg, &scenes)?;
            println!(
                "wrote {} tiles ({} manifest entries) to {}",
                scenes.len(),
                manifest.entries.len(),
                common.out.display()
            );
        }
        Command::ExtractFractions {
            common,
            data,
            mapping,
            min_len,
        } => {
            let cfg = resolve(&common)?;
            snapshot(&cfg, &common.out, "extract-fractions")?;
            let mapping = match mapping {
                Some(p) => ClassMapping::load(&p)?,
                None => ClassMapping::identity(9),
            };
            let source_manifest = agrimap_core::fractions::SequenceManifest::read_jsonl(&data.join("manifest.jsonl"), 0)?;
            let mut sequences = Vec::new();
            for e in &source_manifest.entries {
                if !cfg.sources.iter().any(|s| s.name == e.source) {
                    continue;
                }
                let (labels, _) = read_labels(&label_path(&data, &e.geo_id))?;
                let frames = e
                    .frame_paths
                    .iter()
                    .map(|r| Ok((parse_frame_ref(r)?.1, r.clone())))
                    .collect::<Result<Vec<_>>>()?;
                sequences.push(TileSequence {
                    geo_id: e.geo_id.clone(),
                    source: e.source.clone(),
                    frames,
                    labels: agrimap_core::types::Raster::new(
                        labels.height,
                        labels.width,
                        labels.data.iter().map(|&v| v as i32).collect(),
                    )?,
                    split: e.split.clone(),
                });
            }
            let manifest = build_manifest(&sequences, min_len, &mapping)?;
            let path = common.out.join("fractions.jsonl");
            manifest.write_jsonl(&path)?;
            println!(
                "{} of {} sequences kept; manifest at {}",
                manifest.entries.len(),
                sequences.len(),
                path.display()
            );
        }
        Command::Pretrain {
            common,
            data,
            iterations,
            batch_size,
            frame_mode,
            tau,
            no_mean_teacher,
            no_fraction_supervision,
            checkpoint_every,
        } => {
            let mut cfg = resolve(&common)?;
            let t = &mut cfg.training;
            set(&mut t.pretrain_iterations, iterations, "training.pretrain_iterations");
            set(&mut t.pretrain_batch_size, batch_size, "training.pretrain_batch_size");
            set(&mut t.pretrain_frame_mode, frame_mode.map(Into::into), "training.pretrain_frame_mode");
            set(&mut t.ema_tau, tau, "training.ema_tau");
            set(&mut t.checkpoint_every, checkpoint_every, "training.checkpoint_every");
            if no_mean_teacher {
                set(&mut t.mean_teacher, Some(false), "training.mean_teacher");
            }
            if no_fraction_supervision {
                set(&mut t.fraction_supervision, Some(false), "training.fraction_supervision");
            }
            snapshot(&cfg, &common.out, "pretrain")?;
            let dataset = Dataset::load(&data, &cfg)?;
            let start = Instant::now();
            let run = pretrain(&cfg, &dataset, Some(&common.out))?;
            let last = run.log.last().map(|r| r.total).unwrap_or(f64::NAN);
            let totals: Vec<f64> = run.log.iter().map(|r| r.total).collect();
            plots::curves(&[totals], &common.out.join("pretrain_loss.png"))?;
            println!(
                "pretrained {} iterations in {:.1}s, final loss {last:.5}; checkpoint at {}",
                run.log.len(),
                start.elapsed().as_secs_f64(),
                common.out.join("checkpoint").display()
            );
        }
        Command::Finetune {
            common,
            data,
            checkpoint,
            epochs,
            batch_size,
            lr,
            data_ratio,
            frame_mode,
            freeze,
            init_from,
        } => {
            let mut cfg = resolve(&common)?;
            let t = &mut cfg.training;
            set(&mut t.finetune_epochs, epochs, "training.finetune_epochs");
            set(&mut t.finetune_batch_size, batch_size, "training.finetune_batch_size");
            set(&mut t.finetune_lr, lr, "training.finetune_lr");
            set(&mut t.data_ratio, data_ratio, "training.data_ratio");
            set(&mut t.finetune_frame_mode, frame_mode.map(Into::into), "training.finetune_frame_mode");
            if !freeze.is_empty() {
                set(&mut t.freeze, Some(freeze), "training.freeze");
            }
            set(
                &mut t.init_from,
                init_from.map(|i| match i {
                    InitArg::Student => TeacherInit::Student,
                    InitArg::Teacher => TeacherInit::Teacher,
                }),
                "training.init_from",
            );
            snapshot(&cfg, &common.out, "finetune")?;
            let dataset = Dataset::load(&data, &cfg)?;
            let pretrained = checkpoint.as_deref().map(load_bundle).transpose()?;
            if pretrained.is_none() {
                log::info!("no checkpoint given; training from scratch");
            }
            let run = finetune(&cfg, pretrained.as_ref(), &dataset, Some(&common.out))?;
            let f1: Vec<f64> = run.log.iter().map(|r| r.val_f1).collect();
            let loss: Vec<f64> = run.log.iter().map(|r| r.loss).collect();
            plots::curves(&[loss, f1], &common.out.join("finetune_curves.png"))?;
            let best = run.log.get(run.best_epoch.saturating_sub(1));
            println!(
                "finetuned {} epochs; kept epoch {} (val F1 {:.4}); checkpoint at {}",
                run.log.len(),
                run.best_epoch,
                best.map(|r| r.val_f1).unwrap_or(f64::NAN),
                common.out.join("checkpoint").display()
            );
        }
        Command::Evaluate {
            common,
            data,
            checkpoint,
            split,
            frames,
            positive,
        } => {
            let cfg = resolve(&common)?;
            snapshot(&cfg, &common.out, "evaluate")?;
            let dataset = Dataset::load(&data, &cfg)?;
            let bundle = load_bundle(&checkpoint)?;
            let (model, _store) = load_seg_model(&cfg, &bundle)?;
            let indices: Vec<usize> = match split.as_str() {
                "all" => (0..dataset.scenes.len()).collect(),
                s => dataset.indices(s),
            };
            if indices.is_empty() {
                bail!("split `{split}` has no tiles");
            }
            let ef = eval_frames(&cfg, &dataset, frames);
            let counts = evaluate_indices(&model, &cfg, &dataset, &indices, ef)?;
            let report = metrics(&counts);
            let f1: Vec<f64> = report.per_class.iter().map(|m| m.f1).collect();
            let doc = json!({
                "config_hash": cfg.hash(),
                "checkpoint": checkpoint.display().to_string(),
                "split": split,
                "tiles": indices.len(),
                "positive_class": positive,
                "positive": report.positive(positive),
                "average": {
                    "kind": "macro over all classes, background included",
                    "precision": report.macro_average.precision,
                    "recall": report.macro_average.recall,
                    "f1": report.macro_average.f1,
                },
                "overall_accuracy": report.overall_accuracy,
                "per_class": report.per_class,
                "undefined": report.undefined,
                "confusion": counts,
            });
            let path = common.out.join("report.json");
            fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
            plots::f1_bars(&f1, &common.out.join("f1_per_class.png"))?;
            let first = &dataset.scenes[indices[0]];
            let (pred, _) = predict_scene(&model, &cfg, first, ef)?;
            plots::prediction_panel(&pred, &first.label_map, 2, &common.out.join(format!("panel_{}.png", first.geo_id)))?;
            println!(
                "{} tiles: macro F1 {:.4}, OA {:.4}; report at {}",
                indices.len(),
                report.macro_average.f1,
                report.overall_accuracy,
                path.display()
            );
        }
        Command::Predict {
            common,
            data,
            checkpoint,
            tiles,
            probabilities,
            frames,
        } => {
            let cfg = resolve(&common)?;
            snapshot(&cfg, &common.out, "predict")?;
            let dataset = Dataset::load(&data, &cfg)?;
            let bundle = load_bundle(&checkpoint)?;
            let (model, _store) = load_seg_model(&cfg, &bundle)?;
            let ef = eval_frames(&cfg, &dataset, frames);
            let palette: BTreeMap<String, [u8; 3]> = (0..cfg.model.num_classes)
                .map(|k| (k.to_string(), plots::PALETTE[k % plots::PALETTE.len()]))
                .collect();
            let mut written = 0;
            for scene in &dataset.scenes {
                if !tiles.is_empty() && !tiles.contains(&scene.geo_id) {
                    continue;
                }
                let (map, probs) = predict_scene(&model, &cfg, scene, ef)?;
                let base = common.out.join("predictions").join(&scene.geo_id);
                fs::create_dir_all(base.parent().expect("has parent"))?;
                fs::write(base.with_extension("bin"), &map.data)?;
                let header = json!({
                    "dims": [map.height, map.width],
                    "dtype": "u8",
                    "order": "row-major",
                    "num_classes": cfg.model.num_classes,
                    "palette": palette,
                    "probabilities": probabilities.then(|| json!({
                        "file": format!("{}.probs.bin", scene.geo_id),
                        "dims": [cfg.model.num_classes, map.height, map.width],
                        "dtype": "f32le",
                    })),
                });
                fs::write(base.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
                if probabilities {
                    let bytes: Vec<u8> = probs.iter().flat_map(|v| v.to_le_bytes()).collect();
                    fs::write(base.with_extension("probs.bin"), bytes)?;
                }
                written += 1;
            }
            if written == 0 {
                bail!("no matching tiles in {}", data.display());
            }
            println!("wrote {written} class maps to {}", common.out.join("predictions").display());
        }
        Command::InspectShapes { common, frames, size } => {
            let cfg = resolve(&common)?;
            snapshot(&cfg, &common.out, "inspect-shapes")?;
            for s in &cfg.sources {
                let n = size.unwrap_or(s.tile_size);
                let shapes = stage_shapes(&cfg.model, &s.temporal_patch_rule, s.spatial_patch, frames, n, n)?;
                let chain: Vec<String> = shapes.iter().map(|x| x.to_string()).collect();
                println!("{} T={frames} {n}x{n}: {}", s.name, chain.join(" -> "));
            }
        }
        Command::BenchFlops {
            common,
            frames,
            size,
            repeats,
        } => {
            let cfg = resolve(&common)?;
            snapshot(&cfg, &common.out, "bench-flops")?;
            let source = &cfg.sources[0];
            let n = size.unwrap_or(source.tile_size);
            let mut on = cfg.model.clone();
            on.temporal_downsampling = true;
            let mut off = cfg.model.clone();
            off.temporal_downsampling = false;
            let a = flops_estimate(&on, source, frames, n, n)?;
            let b = flops_estimate(&off, source, frames, n, n)?;
            let time = |m: &agrimap_core::config::ModelConfig| -> Result<Option<f64>> {
                if repeats == 0 {
                    return Ok(None);
                }
                agrimap_core::training::time_forward(m, source, frames, n, repeats, cfg.training.seed)
                    .map(Some)
                    .map_err(Into::into)
            };
            let (ta, tb) = (time(&on)?, time(&off)?);
            let ratio = a.total as f64 / b.total as f64;
            let doc = json!({
                "source": source.name,
                "T": frames,
                "size": n,
                "with_downsampling": {"macs": a.total, "backbone": a.backbone, "decoder": a.decoder, "stages": a.stages, "shapes": a.shapes, "seconds": ta},
                "without_downsampling": {"macs": b.total, "backbone": b.backbone, "decoder": b.decoder, "stages": b.stages, "shapes": b.shapes, "seconds": tb},
                "ratio": ratio,
            });
            fs::write(common.out.join("flops.json"), serde_json::to_string_pretty(&doc)?)?;
            println!("T={frames} {n}x{n} ({})", source.name);
            println!("  with temporal downsampling:    {:>14} MAC{}", a.total, fmt_time(ta));
            println!("  without temporal downsampling: {:>14} MAC{}", b.total, fmt_time(tb));
            println!("  ratio: {ratio:.3}");
        }
    }
    Ok(())
}

fn fmt_time(t: Option<f64>) -> String {
    t.map(|s| format!(", forward {:.3}s", s)).unwrap_or_default()
}
