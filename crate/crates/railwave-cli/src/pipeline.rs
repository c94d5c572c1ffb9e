//! The four pipeline stages behind the subcommands, plus the plumbing they
//! share: a directory lock, the extraction cache, and history files.
//!
//! Errors carry a process exit code: configuration and precondition
//! problems the user can fix exit 1, failures inside a run exit 2.

use crate::config::{DatasetKind, RunConfig};
use railwave_core::metrics::{accuracy, emit_report, per_class_metrics, ConfusionMatrix};
use railwave_core::resnet::{
    build_model, evaluate, load_checkpoint, predict, save_checkpoint, LabeledImages, LrSchedule,
    ResNetError, ResNetSpec, SgdBuffers, TrainerState, TrainOptions,
};
use railwave_core::signal::{
    load_recording, segment_recording, DatasetManifest, ManifestEntry, Split, NUM_CLASSES,
};
use railwave_core::synth::generate_dataset;
use railwave_core::wavelet::{
    load_feature_image, make_scale_grid, save_feature_image, scalogram_to_image, CwtPlan,
    FeatureImage, MorletParams,
};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

/// Feature images are square with this side length, matching the model
/// input shape.
pub const IMAGE_SIDE: usize = 64;

const MANIFEST_FILE: &str = "manifest.csv";
const IMAGES_DIR: &str = "images";
const CACHE_META_FILE: &str = "extract.meta";
const CHECKPOINT_FILE: &str = "checkpoint.rwck";
const LOCK_FILE: &str = ".railwave.lock";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Wrong flags, bad config, or missing inputs; fix and rerun. Exit 1.
    #[error("{0}")]
    Usage(String),
    /// The run itself failed. Exit 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

/// Exclusive claim on a directory for the duration of one command, so two
/// commands never write the same tree concurrently. The lock is a file
/// created with `create_new`; it is removed on drop, and a crashed process
/// leaves it behind for the user to delete.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| usage(format!("cannot create directory {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(runtime(format!(
                "{} is locked by another railwave command (delete {} if that run crashed)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(runtime(format!(
                "cannot create lock file {}: {e}",
                path.display()
            ))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest, CliError> {
    let path = cfg.dataset.dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(usage(format!(
            "manifest not found at {}; run `railwave generate` or point dataset.dir at an existing dataset",
            path.display()
        )));
    }
    DatasetManifest::load(&path).map_err(|e| runtime(format!("reading {}: {e}", path.display())))
}

/// Feature image paths for one manifest entry, relative to the dataset
/// root: the entry's own relative path moves under images/ and fans out
/// into one file per segment.
fn image_rel_paths(entry_path: &Path, n_parts: usize) -> Vec<PathBuf> {
    let parent = entry_path.parent().unwrap_or(Path::new(""));
    let stem = entry_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    (0..n_parts)
        .map(|k| {
            Path::new(IMAGES_DIR)
                .join(parent)
                .join(format!("{stem}_{k:02}.rwim"))
        })
        .collect()
}

/// Cache key over everything that changes extracted image content. Stored
/// beside the images; a mismatch forces a full recomputation.
fn extract_cache_key(cfg: &RunConfig) -> u32 {
    let w = &cfg.wavelet;
    let text = format!(
        "omega0={}\nf_min_hz={}\nf_max_hz={}\nn_scales={}\nchannel={}\nn_parts={}\nside={}\n",
        w.omega0,
        w.f_min_hz,
        w.f_max_hz,
        w.n_scales,
        cfg.dataset.channel,
        cfg.dataset.n_parts,
        IMAGE_SIDE
    );
    crc32fast::hash(text.as_bytes())
}

fn split_counts(manifest: &DatasetManifest) -> (usize, usize, usize) {
    let count = |s| manifest.split_entries(s).count();
    (
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
    )
}

pub fn cmd_generate(cfg: &RunConfig, dry_run: bool) -> Result<(), CliError> {
    if cfg.dataset.kind != DatasetKind::Synthetic {
        return Err(usage(
            "generate needs dataset.kind = synthetic; external datasets come with their own files",
        ));
    }
    let synth = cfg.synth_config();
    synth.validate().map_err(|e| usage(e.to_string()))?;
    let dir = &cfg.dataset.dir;
    let total = NUM_CLASSES * synth.samples_per_class;
    if dry_run {
        println!(
            "would generate {total} recordings ({} classes x {} samples, {} samples each at {} Hz) -> {}",
            NUM_CLASSES,
            synth.samples_per_class,
            synth.segment_length,
            synth.sample_rate_hz,
            dir.display()
        );
        return Ok(());
    }
    let _lock = DirLock::acquire(dir)?;
    let manifest =
        generate_dataset(&synth, dir).map_err(|e| runtime(format!("generating dataset: {e}")))?;
    let (train, val, test) = split_counts(&manifest);
    println!(
        "generated {} recordings -> {}",
        manifest.entries.len(),
        dir.display()
    );
    println!("split: {train} train / {val} val / {test} test ({MANIFEST_FILE})");
    Ok(())
}

struct ExtractJob {
    signal_path: PathBuf,
    entry: ManifestEntry,
    outputs: Vec<PathBuf>,
}

fn modified(path: &Path) -> Option<SystemTime> {
    fs::metadata(path).and_then(|m| m.modified()).ok()
}

/// An output is fresh when it is at least as new as its input recording.
fn outputs_fresh(signal_path: &Path, outputs: &[PathBuf]) -> bool {
    let Some(input_time) = modified(signal_path) else {
        return false;
    };
    outputs
        .iter()
        .all(|out| modified(out).is_some_and(|t| t >= input_time))
}

fn extract_one(job: &ExtractJob, cfg: &RunConfig) -> Result<(), String> {
    let d = &cfg.dataset;
    let rec = load_recording(&job.signal_path, d.channels, d.sample_rate_hz)
        .map_err(|e| e.to_string())?;
    let segments = segment_recording(&rec, d.channel, job.entry.class, d.n_parts)
        .map_err(|e| e.to_string())?;
    let params = MorletParams::new(cfg.wavelet.omega0).map_err(|e| e.to_string())?;
    let grid = make_scale_grid(
        cfg.wavelet.f_min_hz,
        cfg.wavelet.f_max_hz,
        cfg.wavelet.n_scales,
        rec.sample_rate_hz,
        &params,
    )
    .map_err(|e| e.to_string())?;
    let plan =
        CwtPlan::new(segments[0].samples.len(), &grid, &params).map_err(|e| e.to_string())?;
    for (segment, out) in segments.iter().zip(&job.outputs) {
        let scalogram = plan.apply(segment).map_err(|e| e.to_string())?;
        let image = scalogram_to_image(&scalogram, job.entry.class, IMAGE_SIDE, IMAGE_SIDE)
            .map_err(|e| e.to_string())?;
        if let Some(parent) = out.parent() {
            fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
        save_feature_image(&image, out).map_err(|e| e.to_string())?;
    }
    Ok(())
}

pub fn cmd_extract(cfg: &RunConfig, dry_run: bool) -> Result<(), CliError> {
    let manifest = load_manifest(cfg)?;
    let dataset_dir = &cfg.dataset.dir;
    let images_dir = dataset_dir.join(IMAGES_DIR);
    let meta_path = images_dir.join(CACHE_META_FILE);
    let cache_key = extract_cache_key(cfg);
    let cache_valid = fs::read_to_string(&meta_path)
        .is_ok_and(|text| text.trim() == format!("cache_key={cache_key:08x}"));

    let mut jobs = Vec::new();
    let mut skipped = 0usize;
    for entry in &manifest.entries {
        let signal_path = dataset_dir.join(&entry.path);
        let outputs: Vec<PathBuf> = image_rel_paths(&entry.path, cfg.dataset.n_parts)
            .into_iter()
            .map(|rel| dataset_dir.join(rel))
            .collect();
        if cache_valid && outputs_fresh(&signal_path, &outputs) {
            skipped += outputs.len();
        } else {
            jobs.push(ExtractJob {
                signal_path,
                entry: entry.clone(),
                outputs,
            });
        }
    }
    let to_write: usize = jobs.iter().map(|j| j.outputs.len()).sum();
    if dry_run {
        println!(
            "would extract {to_write} images ({skipped} up to date) -> {}",
            images_dir.display()
        );
        return Ok(());
    }
    let _lock = DirLock::acquire(dataset_dir)?;
    fs::create_dir_all(&images_dir)
        .map_err(|e| usage(format!("cannot create {}: {e}", images_dir.display())))?;

    let pool = worker_pool()?;
    let failures: Vec<(PathBuf, String)> = pool.install(|| {
        jobs.par_iter()
            .filter_map(|job| {
                extract_one(job, cfg)
                    .err()
                    .map(|msg| (job.signal_path.clone(), msg))
            })
            .collect()
    });

    if !failures.is_empty() {
        for (path, msg) in &failures {
            eprintln!("failed: {}: {msg}", path.display());
        }
        return Err(runtime(format!(
            "{} of {} recordings failed extraction",
            failures.len(),
            jobs.len()
        )));
    }
    fs::write(&meta_path, format!("cache_key={cache_key:08x}\n"))
        .map_err(|e| runtime(format!("writing {}: {e}", meta_path.display())))?;
    println!(
        "extracted {to_write} images ({skipped} up to date) -> {}",
        images_dir.display()
    );
    Ok(())
}

/// Extraction fans out across recordings; RAILWAVE_THREADS caps the
/// worker count (default: one per core).
fn worker_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var("RAILWAVE_THREADS") {
        let n: usize = raw
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| usage(format!("RAILWAVE_THREADS={raw:?} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| runtime(format!("cannot build worker pool: {e}")))
}

/// The two curves a run records: per-epoch validation accuracy and
/// per-batch training loss in encounter order.
pub struct TrainingHistory {
    pub val_accuracy: Vec<f64>,
    pub batch_loss: Vec<f64>,
}

impl TrainingHistory {
    fn save(&self, dir: &Path) -> Result<(), CliError> {
        let mut val = String::from("epoch,val_accuracy\n");
        for (epoch, acc) in self.val_accuracy.iter().enumerate() {
            writeln!(val, "{epoch},{acc:.6}").unwrap();
        }
        let path = dir.join("history_val.csv");
        fs::write(&path, val).map_err(|e| runtime(format!("writing {}: {e}", path.display())))?;

        let mut loss = String::from("batch_index,loss\n");
        for (index, l) in self.batch_loss.iter().enumerate() {
            writeln!(loss, "{index},{l:.6}").unwrap();
        }
        let path = dir.join("history_loss.csv");
        fs::write(&path, loss).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
    }
}

fn load_split_images(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<LabeledImages, CliError> {
    let mut images: Vec<FeatureImage> = Vec::new();
    for entry in manifest.split_entries(split) {
        for rel in image_rel_paths(&entry.path, cfg.dataset.n_parts) {
            let path = cfg.dataset.dir.join(rel);
            if !path.exists() {
                return Err(usage(format!(
                    "feature image {} is missing; run `railwave extract` first",
                    path.display()
                )));
            }
            images
                .push(load_feature_image(&path).map_err(|e| runtime(format!("reading image: {e}")))?);
        }
    }
    if images.is_empty() {
        return Err(usage(format!(
            "the {split} split has no entries; adjust dataset.val_fraction/test_fraction"
        )));
    }
    LabeledImages::from_images(&images).map_err(|e| runtime(e.to_string()))
}

pub fn cmd_train(cfg: &RunConfig, dry_run: bool) -> Result<(), CliError> {
    let manifest = load_manifest(cfg)?;
    let spec = ResNetSpec::by_name(&cfg.model.spec).map_err(|e| usage(e.to_string()))?;
    let t = &cfg.training;
    if dry_run {
        let (train, val, _) = split_counts(&manifest);
        let per_entry = cfg.dataset.n_parts;
        println!(
            "would train {} for {} epochs on {} images (val {}), batch size {} -> {}",
            cfg.model.spec,
            t.epochs,
            train * per_entry,
            val * per_entry,
            t.batch_size,
            cfg.output.dir.display()
        );
        return Ok(());
    }
    let train_data = load_split_images(cfg, &manifest, Split::Train)?;
    let val_data = load_split_images(cfg, &manifest, Split::Val)?;
    let _lock = DirLock::acquire(&cfg.output.dir)?;
    // The effective config (file, overrides, and seed flag applied) rides
    // along with the run so it can be reproduced from the output alone.
    let config_path = cfg.output.dir.join("config.txt");
    fs::write(&config_path, cfg.render())
        .map_err(|e| runtime(format!("writing {}: {e}", config_path.display())))?;

    let mut model = build_model(&spec, cfg.model.seed).map_err(|e| runtime(e.to_string()))?;
    let schedule = LrSchedule::two_step(t.lr, t.lr_decay, t.epochs);
    let options = TrainOptions {
        batch_size: t.batch_size,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
    };
    let mut buffers = SgdBuffers::default();
    let mut history = TrainingHistory {
        val_accuracy: Vec::new(),
        batch_loss: Vec::new(),
    };
    for epoch in 0..t.epochs {
        let lr = schedule.lr_at(epoch);
        let stats = train_epoch(cfg, &mut model, &train_data, &options, lr, &mut buffers)?;
        history.batch_loss.extend_from_slice(&stats.batch_losses);
        let (val_acc, _) = evaluate(&model, &val_data, t.batch_size)
            .map_err(|e| runtime(format!("validation failed: {e}")))?;
        history.val_accuracy.push(val_acc);
        println!(
            "epoch {}/{}: lr {lr:.6}, mean loss {:.4}, val accuracy {val_acc:.4}",
            epoch + 1,
            t.epochs,
            stats.mean_loss
        );
    }

    let state = TrainerState {
        epoch: t.epochs as u32,
        seed: t.seed,
    };
    let ckpt_path = cfg.output.dir.join(CHECKPOINT_FILE);
    save_checkpoint(&mut model, &buffers, &state, &ckpt_path)
        .map_err(|e| runtime(e.to_string()))?;
    history.save(&cfg.output.dir)?;
    match history.val_accuracy.last() {
        Some(acc) => println!("final val accuracy {acc:.4} -> {}", ckpt_path.display()),
        None => println!(
            "trained 0 epochs; wrote initial weights -> {}",
            ckpt_path.display()
        ),
    }
    Ok(())
}

fn train_epoch(
    cfg: &RunConfig,
    model: &mut railwave_core::resnet::Model,
    data: &LabeledImages,
    options: &TrainOptions,
    lr: f64,
    buffers: &mut SgdBuffers,
) -> Result<railwave_core::resnet::EpochStats, CliError> {
    railwave_core::resnet::train_epoch(model, data, options, lr, cfg.training.seed, buffers)
        .map_err(|e| match e {
            ResNetError::DivergedLoss { .. } => {
                runtime(format!("{e}; lower training.lr and rerun"))
            }
            other => runtime(other.to_string()),
        })
}

pub struct EvalArgs {
    pub split: Split,
    pub checkpoint: Option<PathBuf>,
    pub predictions_file: Option<PathBuf>,
}

/// Reads back the `index,label,pred` CSV that eval writes, allowing metric
/// computation without a model.
fn read_predictions(path: &Path) -> Result<Vec<(usize, usize)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read predictions {}: {e}", path.display())))?;
    let bad = |line: usize, why: &str| {
        usage(format!(
            "predictions {} line {line}: {why}",
            path.display()
        ))
    };
    let mut lines = text.lines();
    match lines.next() {
        Some("index,label,pred") => {}
        _ => return Err(bad(1, "expected header `index,label,pred`")),
    }
    let mut pairs = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(bad(i + 2, "expected three comma-separated fields"));
        }
        let label: usize = fields[1]
            .parse()
            .map_err(|_| bad(i + 2, "label is not an integer"))?;
        let pred: usize = fields[2]
            .parse()
            .map_err(|_| bad(i + 2, "pred is not an integer"))?;
        if label >= NUM_CLASSES || pred >= NUM_CLASSES {
            return Err(bad(i + 2, "class id out of range"));
        }
        pairs.push((label, pred));
    }
    if pairs.is_empty() {
        return Err(usage(format!(
            "predictions {} contains no rows",
            path.display()
        )));
    }
    Ok(pairs)
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, dry_run: bool) -> Result<(), CliError> {
    let out_dir = cfg.output.dir.join("eval").join(args.split.as_str());
    if dry_run {
        let source = match &args.predictions_file {
            Some(p) => format!("predictions file {}", p.display()),
            None => format!(
                "checkpoint {}",
                args.checkpoint
                    .clone()
                    .unwrap_or_else(|| cfg.output.dir.join(CHECKPOINT_FILE))
                    .display()
            ),
        };
        println!(
            "would evaluate the {} split from {source} -> {}",
            args.split,
            out_dir.display()
        );
        return Ok(());
    }
    let _lock = DirLock::acquire(&cfg.output.dir)?;

    let pairs: Vec<(usize, usize)> = match &args.predictions_file {
        Some(path) => read_predictions(path)?,
        None => {
            let ckpt_path = args
                .checkpoint
                .clone()
                .unwrap_or_else(|| cfg.output.dir.join(CHECKPOINT_FILE));
            if !ckpt_path.exists() {
                return Err(usage(format!(
                    "checkpoint not found at {}; run `railwave train` or pass --checkpoint",
                    ckpt_path.display()
                )));
            }
            let (model, _, _) =
                load_checkpoint(&ckpt_path).map_err(|e| runtime(e.to_string()))?;
            let manifest = load_manifest(cfg)?;
            let data = load_split_images(cfg, &manifest, args.split)?;
            let preds = predict(&model, &data, cfg.training.batch_size)
                .map_err(|e| runtime(e.to_string()))?;
            (0..data.len()).map(|i| (data.label(i), preds[i])).collect()
        }
    };

    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for &(label, pred) in &pairs {
        cm.add(label, pred).map_err(|e| runtime(e.to_string()))?;
    }
    let acc = accuracy(&cm).map_err(|e| runtime(e.to_string()))?;
    let metrics = per_class_metrics(&cm).map_err(|e| runtime(e.to_string()))?;
    fs::create_dir_all(&out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    emit_report(&cm, &metrics, &out_dir).map_err(|e| runtime(e.to_string()))?;

    let mut pred_csv = String::from("index,label,pred\n");
    for (i, (label, pred)) in pairs.iter().enumerate() {
        writeln!(pred_csv, "{i},{label},{pred}").unwrap();
    }
    let pred_path = out_dir.join("predictions.csv");
    fs::write(&pred_path, pred_csv)
        .map_err(|e| runtime(format!("writing {}: {e}", pred_path.display())))?;

    println!("accuracy: {acc:.4} ({} samples) -> {}", pairs.len(), out_dir.display());
    Ok(())
}
