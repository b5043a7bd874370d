//! Patch-based training with optional knowledge distillation.
//!
//! Scenes are loaded from per-scene directories, cropped to a stride grid of
//! square patches (with edge-snapped windows so borders are covered),
//! augmented by flips and quarter rotations, and optimized with Adam against
//! the μ-law-domain L1 loss of Eq.-style blending: ground truth weighted by
//! `alpha`, a precomputed teacher prediction by `1 - alpha`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::Graph;
use crate::image_io::{self, ImageIoError};
use crate::model::{self, ModelConfig, ModelError, ModelWeights};
use crate::ops;
use crate::optim::{AdamParams, AdamState};
use crate::pipeline::{self, ExposureBracket, PipelineError, Raster};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset at {path} contains no usable scenes")]
    EmptyDataset { path: PathBuf },
    #[error("cannot list dataset root {path}: {source}")]
    DatasetRoot { path: PathBuf, source: std::io::Error },
    #[error("scene `{scene}`: knowledge distillation is enabled but no teacher prediction was found")]
    MissingTeacher { scene: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("augmentation needs a square patch, got {w}x{h}")]
    NonSquarePatch { w: usize, h: usize },
    #[error("non-finite loss ({value}) at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    ImageIo(#[from] ImageIoError),
}

/// One scene: an exposure bracket with ground truth (and teacher when KD is on).
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub name: String,
    pub bracket: ExposureBracket,
}

/// Training protocol parameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_fixed_epochs: usize,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub alpha: f64,
    pub kd_enabled: bool,
    pub mu: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 256,
            stride: 128,
            batch_size: 8,
            epochs: 500,
            lr0: 1e-4,
            lr_fixed_epochs: 80,
            lr_decay: 0.8,
            lr_decay_every: 20,
            alpha: 0.2,
            kd_enabled: true,
            mu: 5000.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.patch_size == 0 || self.patch_size % 2 != 0 {
            return Err(TrainError::InvalidConfig(format!(
                "patch_size must be a positive even number, got {}",
                self.patch_size
            )));
        }
        if self.stride == 0 || self.batch_size == 0 || self.epochs == 0 || self.lr_decay_every == 0
        {
            return Err(TrainError::InvalidConfig(
                "stride, batch_size, epochs and lr_decay_every must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.lr0 <= 0.0 || self.lr_decay <= 0.0 || self.mu <= 0.0 {
            return Err(TrainError::InvalidConfig(
                "lr0, lr_decay and mu must be positive".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

/// Options for [`load_dataset`]. `load_teacher = false` guarantees teacher
/// files are never opened.
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    pub load_teacher: bool,
    /// Optional directory holding `<scene>.pfm` teacher predictions for
    /// scenes without an in-scene `teacher.pfm`.
    pub teacher_dir: Option<PathBuf>,
}

/// Scenes that failed validation are skipped; the report lists why.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub warnings: Vec<String>,
}

fn find_input(scene_dir: &Path, index: usize) -> Option<PathBuf> {
    for ext in ["png", "ppm"] {
        let p = scene_dir.join(format!("input_{index}.{ext}"));
        if p.is_file() {
            return Some(p);
        }
    }
    None
}

fn load_scene(scene_dir: &Path, name: &str, opts: &LoadOptions) -> Result<SceneSample, String> {
    let inputs: Vec<PathBuf> = (1..=3)
        .map(|i| find_input(scene_dir, i).ok_or(format!("missing input_{i}.(png|ppm)")))
        .collect::<Result<_, _>>()?;
    let exposure_path = scene_dir.join("exposure.txt");
    if !exposure_path.is_file() {
        return Err("missing exposure.txt".to_string());
    }
    let gt_path = scene_dir.join("gt.pfm");
    if !gt_path.is_file() {
        return Err("missing gt.pfm".to_string());
    }

    let evs = image_io::read_exposures(&exposure_path).map_err(|e| e.to_string())?;
    let ldr: Vec<Raster> = inputs
        .iter()
        .map(|p| image_io::read_ldr(p).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let ldr: [Raster; 3] = ldr.try_into().expect("three inputs");
    let gt = image_io::read_pfm(&gt_path).map_err(|e| e.to_string())?;

    let mut bracket = ExposureBracket::from_evs(ldr, evs)
        .and_then(|b| b.with_gt(gt))
        .map_err(|e| e.to_string())?;

    if opts.load_teacher {
        let local = scene_dir.join("teacher.pfm");
        let external = opts.teacher_dir.as_ref().map(|d| d.join(format!("{name}.pfm")));
        let teacher_path = if local.is_file() {
            Some(local)
        } else {
            external.filter(|p| p.is_file())
        };
        if let Some(p) = teacher_path {
            let teacher = image_io::read_pfm(&p).map_err(|e| e.to_string())?;
            bracket = bracket.with_teacher(teacher).map_err(|e| e.to_string())?;
        }
    }

    Ok(SceneSample { name: name.to_string(), bracket })
}

/// Loads every scene directory under `root`. Scenes missing mandatory files
/// are skipped with a warning; an empty result is an error.
pub fn load_dataset(
    root: impl AsRef<Path>,
    opts: &LoadOptions,
) -> Result<(Vec<SceneSample>, LoadReport), TrainError> {
    let root = root.as_ref();
    let mut names: Vec<(String, PathBuf)> = std::fs::read_dir(root)
        .map_err(|source| TrainError::DatasetRoot { path: root.to_path_buf(), source })?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    names.sort();

    let mut scenes = Vec::new();
    let mut report = LoadReport::default();
    for (name, dir) in names {
        match load_scene(&dir, &name, opts) {
            Ok(scene) => scenes.push(scene),
            Err(reason) => report.warnings.push(format!("scene `{name}` skipped: {reason}")),
        }
    }
    if scenes.is_empty() {
        return Err(TrainError::EmptyDataset { path: root.to_path_buf() });
    }
    Ok((scenes, report))
}

// ---------------------------------------------------------------------------
// Patches and augmentation
// ---------------------------------------------------------------------------

/// Aligned crop origins along one axis: the stride grid plus an edge-snapped
/// final position so the border is always covered.
pub fn patch_positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let last = extent - patch;
    let mut positions: Vec<usize> = (0..=last).step_by(stride).collect();
    if *positions.last().expect("non-empty") != last {
        positions.push(last);
    }
    positions
}

/// All crop windows `(x, y)` of a scene at the stride grid.
pub fn patch_windows(width: usize, height: usize, patch: usize, stride: usize) -> Vec<(usize, usize)> {
    let xs = patch_positions(width, patch, stride);
    let ys = patch_positions(height, patch, stride);
    let mut windows = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            windows.push((x, y));
        }
    }
    windows
}

fn map_sample(sample: &SceneSample, f: impl Fn(&Raster) -> Raster) -> SceneSample {
    let bracket = ExposureBracket {
        ldr: [f(&sample.bracket.ldr[0]), f(&sample.bracket.ldr[1]), f(&sample.bracket.ldr[2])],
        exposure_times: sample.bracket.exposure_times,
        gt_hdr: sample.bracket.gt_hdr.as_ref().map(&f),
        teacher_hdr: sample.bracket.teacher_hdr.as_ref().map(&f),
    };
    SceneSample { name: sample.name.clone(), bracket }
}

/// Reflection-pads every image of a sample so both extents reach `patch`.
fn pad_sample(sample: &SceneSample, patch: usize) -> SceneSample {
    if sample.bracket.width() >= patch && sample.bracket.height() >= patch {
        return sample.clone();
    }
    map_sample(sample, |r| pipeline::reflect_pad(r, patch, patch))
}

/// Crops the identical window out of every image of a sample.
pub fn crop_sample(sample: &SceneSample, x: usize, y: usize, size: usize) -> SceneSample {
    map_sample(sample, |r| r.crop(x, y, size, size))
}

/// Materializes every patch of a scene. Images smaller than the patch are
/// reflection-padded first, yielding a single full-image sample.
pub fn extract_patches(
    sample: &SceneSample,
    patch: usize,
    stride: usize,
) -> Vec<SceneSample> {
    let padded = pad_sample(sample, patch);
    patch_windows(padded.bracket.width(), padded.bracket.height(), patch, stride)
        .into_iter()
        .map(|(x, y)| crop_sample(&padded, x, y, patch))
        .collect()
}

/// Random horizontal flip (p = 0.5) followed by a rotation drawn uniformly
/// from 0/90/180/270 degrees; the same transform hits every image of the
/// sample.
pub fn augment(sample: &SceneSample, rng: &mut impl Rng) -> Result<SceneSample, TrainError> {
    let (w, h) = (sample.bracket.width(), sample.bracket.height());
    if w != h {
        return Err(TrainError::NonSquarePatch { w, h });
    }
    let flip: bool = rng.gen();
    let quarter_turns: usize = rng.gen_range(0..4);
    Ok(map_sample(sample, |r| {
        let r = if flip { r.flip_horizontal() } else { r.clone() };
        r.rotate90(quarter_turns)
    }))
}

// ---------------------------------------------------------------------------
// Loss and schedule
// ---------------------------------------------------------------------------

/// Knowledge-distillation loss in the μ-law domain:
/// `alpha * L1(T(pred), T(gt)) + (1 - alpha) * L1(T(pred), T(teacher))`.
/// Without a teacher the loss falls back to plain ground-truth supervision.
pub fn kd_loss(
    pred: &Tensor,
    gt: &Tensor,
    teacher: Option<&Tensor>,
    alpha: f64,
    mu: f64,
) -> Result<f64, TrainError> {
    let t_pred = ops::mu_law(pred, mu)?;
    let t_gt = ops::mu_law(gt, mu)?;
    let gt_term = ops::l1_loss(&t_pred, &t_gt)? as f64;
    match teacher {
        Some(teacher) => {
            let t_teacher = ops::mu_law(teacher, mu)?;
            let teacher_term = ops::l1_loss(&t_pred, &t_teacher)? as f64;
            Ok(alpha * gt_term + (1.0 - alpha) * teacher_term)
        }
        None => Ok(gt_term),
    }
}

/// Learning rate at an epoch: fixed for `lr_fixed_epochs`, then multiplied by
/// `lr_decay` once at the boundary and again every `lr_decay_every` epochs.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.lr_fixed_epochs {
        config.lr0
    } else {
        let decays = 1 + (epoch - config.lr_fixed_epochs) / config.lr_decay_every;
        config.lr0 * config.lr_decay.powi(decays as i32)
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Per-epoch log entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Callback verdict after each epoch.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TrainControl {
    Continue,
    Stop,
}

/// Serializes the loss log as `epoch,lr,train_loss` CSV.
pub fn loss_log_csv(log: &[EpochStats]) -> String {
    let mut out = String::from("epoch,lr,train_loss\n");
    for row in log {
        writeln!(out, "{},{},{}", row.epoch, row.lr, row.loss).expect("in-memory write");
    }
    out
}

fn stack_batch(tensors: &[Tensor]) -> Result<Tensor, TensorError> {
    let s0 = tensors[0].shape();
    let shape = Shape::new(tensors.len() * s0.n, s0.c, s0.h, s0.w);
    let mut data = Vec::with_capacity(shape.len());
    for t in tensors {
        if t.shape() != s0 {
            return Err(TensorError::ShapeMismatch {
                op: "stack_batch",
                left: s0,
                right: t.shape(),
            });
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

/// One optimization step over an assembled batch. Returns the taped loss.
fn train_step(
    config: &ModelConfig,
    weights: &mut ModelWeights,
    adam: &mut AdamState<f32>,
    lr: f64,
    inputs: &[Tensor; 3],
    gt: &Tensor,
    teacher: Option<&Tensor>,
    tc: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut tape: Tape<f32> = Tape::new();
    let bound = model::bind_trainable(&mut tape, config, weights)?;
    let l1 = Graph::<f32>::constant(&mut tape, inputs[0].clone());
    let l2 = Graph::<f32>::constant(&mut tape, inputs[1].clone());
    let l3 = Graph::<f32>::constant(&mut tape, inputs[2].clone());
    let pred = model::forward_graph(&mut tape, config, &bound, &l1, &l2, &l3)?;

    let t_pred = tape.mu_law(pred, tc.mu)?;
    let t_gt = Graph::<f32>::constant(&mut tape, ops::mu_law(gt, tc.mu)?);
    let gt_term = tape.l1_loss(t_pred, t_gt)?;
    let loss_node = match teacher {
        Some(teacher) => {
            let t_teacher = Graph::<f32>::constant(&mut tape, ops::mu_law(teacher, tc.mu)?);
            let teacher_term = tape.l1_loss(t_pred, t_teacher)?;
            let a = tape.scale(gt_term, tc.alpha);
            let b = tape.scale(teacher_term, 1.0 - tc.alpha);
            tape.add(a, b)?
        }
        None => gt_term,
    };
    let loss = tape.value(loss_node).scalar_value().expect("scalar loss") as f64;
    let grads = tape.backward(loss_node)?;
    adam.step(weights.as_map_mut(), &grads, lr)?;
    Ok(loss)
}

/// Runs the training loop. The callback fires once per epoch with the stats
/// row and the current weights (checkpointing lives in the caller) and may
/// stop training early.
pub fn train(
    scenes: &[SceneSample],
    config: &ModelConfig,
    weights: &mut ModelWeights,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &ModelWeights) -> TrainControl,
) -> Result<Vec<EpochStats>, TrainError> {
    tc.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::EmptyDataset { path: PathBuf::from("<in-memory>") });
    }
    for scene in scenes {
        if scene.bracket.gt_hdr.is_none() {
            return Err(TrainError::InvalidConfig(format!(
                "scene `{}` has no ground truth",
                scene.name
            )));
        }
        if tc.kd_enabled && scene.bracket.teacher_hdr.is_none() {
            return Err(TrainError::MissingTeacher { scene: scene.name.clone() });
        }
    }

    // scenes smaller than the patch grid are padded once up front
    let scenes: Vec<SceneSample> = scenes.iter().map(|s| pad_sample(s, tc.patch_size)).collect();
    let mut index: Vec<(usize, usize, usize)> = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        for (x, y) in
            patch_windows(scene.bracket.width(), scene.bracket.height(), tc.patch_size, tc.stride)
        {
            index.push((si, x, y));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = AdamState::new(AdamParams::default());
    let mut log = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        let lr = lr_at(epoch, tc);
        index.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in index.chunks(tc.batch_size) {
            let mut l1s = Vec::with_capacity(chunk.len());
            let mut l2s = Vec::with_capacity(chunk.len());
            let mut l3s = Vec::with_capacity(chunk.len());
            let mut gts = Vec::with_capacity(chunk.len());
            let mut teachers = Vec::with_capacity(chunk.len());
            for &(si, x, y) in chunk {
                let patch = crop_sample(&scenes[si], x, y, tc.patch_size);
                let patch = augment(&patch, &mut rng)?;
                let ([l1, l2, l3], _) = pipeline::assemble_inputs(&patch.bracket, config.gamma)?;
                l1s.push(l1);
                l2s.push(l2);
                l3s.push(l3);
                gts.push(pipeline::raster_to_tensor(
                    patch.bracket.gt_hdr.as_ref().expect("validated above"),
                ));
                if tc.kd_enabled {
                    teachers.push(pipeline::raster_to_tensor(
                        patch.bracket.teacher_hdr.as_ref().expect("validated above"),
                    ));
                }
            }
            let inputs = [stack_batch(&l1s)?, stack_batch(&l2s)?, stack_batch(&l3s)?];
            let gt = stack_batch(&gts)?;
            let teacher = if tc.kd_enabled { Some(stack_batch(&teachers)?) } else { None };

            let loss = train_step(
                config,
                weights,
                &mut adam,
                lr,
                &inputs,
                &gt,
                teacher.as_ref(),
                tc,
            )?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step: steps, value: loss });
            }
            epoch_loss += loss;
            steps += 1;
        }

        let stats = EpochStats { epoch, lr, loss: epoch_loss / steps.max(1) as f64 };
        log.push(stats);
        if on_epoch(&stats, weights) == TrainControl::Stop {
            break;
        }
    }
    Ok(log)
}
