//! Learning-rate schedule, optimizer, training loop, checkpoints and evaluation.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamKind, ParamStore};
use crate::config::{check_input_size, ModelConfig};
use crate::data::{
    images_to_tensor, kmeans_anchors, resize_letterbox, AugmentConfig, AugmentPipeline, DatasetManifest, Letterbox,
    Mask, Sample,
};
use crate::error::{Error, Result};
use crate::heads::{decode_boxes, nms, Detection, RawDetectionOutput};
use crate::losses::{joint_loss, BatchTargets, HeadOutputs, LossBreakdown, LossWeights};
use crate::metrics::{EvalState, GtBox, ImageRecord, MetricReport};
use crate::model::{InferenceOutputs, PerceptionModel};
use crate::tensor::{Element, Tensor};

/// Learning-rate schedule family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup from 0, then one cosine cycle to the final rate.
    WarmupCosine,
    /// One cosine cycle per epoch during the warmup epochs (restarting at the
    /// initial rate each epoch), then one cosine cycle to the final rate.
    WarmRestarts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Final rate as a fraction of `initial_lr`.
    pub final_lr_fraction: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub schedule: Schedule,
    pub eval_size: (usize, usize),
    /// Confidence threshold for reported detections.
    pub conf_threshold: f64,
    pub nms_iou_threshold: f64,
    /// Confidence threshold used when computing metrics.
    pub eval_conf_threshold: f64,
    pub auto_anchors: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.01,
            final_lr_fraction: 0.01,
            warmup_epochs: 3,
            total_epochs: 50,
            momentum: 0.937,
            weight_decay: 0.005,
            batch_size: 8,
            seed: 0,
            eval_every: 5,
            schedule: Schedule::WarmupCosine,
            eval_size: (640, 384),
            conf_threshold: 0.25,
            nms_iou_threshold: 0.45,
            eval_conf_threshold: 0.001,
            auto_anchors: false,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_lr", self.initial_lr),
            ("final_lr_fraction", self.final_lr_fraction),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("nms_iou_threshold", self.nms_iou_threshold),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.final_lr_fraction > 1.0 {
            return Err(Error::Config("final_lr_fraction must be in (0, 1]".into()));
        }
        if self.momentum >= 1.0 {
            return Err(Error::Config("momentum must be below 1".into()));
        }
        if self.batch_size == 0 || self.total_epochs == 0 {
            return Err(Error::Config("batch_size and total_epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        for (name, v) in [("conf_threshold", self.conf_threshold), ("eval_conf_threshold", self.eval_conf_threshold)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        check_input_size(self.eval_size.0, self.eval_size.1)?;
        self.augment.validate()
    }
}

fn cosine(lr0: f64, f: f64, progress: f64) -> f64 {
    lr0 * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Learning rate at optimizer step `step` (0-based).
///
/// Warmup rises linearly from 0 at step 0 to `initial_lr` at the first step
/// after the warmup epochs; the cosine phase then decays to
/// `initial_lr · final_lr_fraction` at the last step of the last epoch.
pub fn lr_at(step: usize, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let spe = steps_per_epoch.max(1);
    let warm = cfg.warmup_epochs * spe;
    let last = (cfg.total_epochs * spe).saturating_sub(1);
    let lr0 = cfg.initial_lr;
    let f = cfg.final_lr_fraction;
    if step < warm {
        return match cfg.schedule {
            Schedule::WarmupCosine => lr0 * step as f64 / warm as f64,
            Schedule::WarmRestarts => {
                let within = step % spe;
                let progress = if spe > 1 { within as f64 / (spe - 1) as f64 } else { 0.0 };
                cosine(lr0, f, progress)
            }
        };
    }
    let span = last.saturating_sub(warm);
    let progress = if span == 0 { 0.0 } else { ((step - warm) as f64 / span as f64).min(1.0) };
    cosine(lr0, f, progress)
}

/// SGD with momentum; weight decay applies to convolution weights only.
///
/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.values().iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        let mu = T::from_f64_lossy(self.momentum);
        let lr = T::from_f64_lossy(lr);
        let kinds: Vec<ParamKind> = (0..store.len()).map(|i| store.kind(i)).collect();
        for (i, (w, g)) in store.values_mut().iter_mut().zip(grads).enumerate() {
            let wd = if kinds[i] == ParamKind::Weight {
                T::from_f64_lossy(self.weight_decay)
            } else {
                T::zero()
            };
            let v = self.velocity[i].data_mut();
            for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
    }
}

pub fn batch_targets(batch: &[Sample]) -> BatchTargets {
    BatchTargets {
        objects: batch.iter().map(|s| s.objects.clone()).collect(),
        drivable: batch.iter().flat_map(|s| s.drivable.data.iter().copied()).collect(),
        lane: batch.iter().flat_map(|s| s.lane.data.iter().copied()).collect(),
    }
}

/// One optimizer step on `batch`, returning the losses before the update.
///
/// Fails without touching the model when any loss component or gradient is
/// not finite.
pub fn train_step<T: Element>(
    model: &mut PerceptionModel<T>,
    opt: &mut Sgd<T>,
    batch: &[Sample],
    weights: &LossWeights,
    lr: f64,
) -> Result<LossBreakdown> {
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let x = images_to_tensor::<T>(&images)?;
    let targets = batch_targets(batch);
    let (breakdown, grads, stats) = {
        let mut g = Graph::new(&model.store, true);
        let xi = g.constant(x);
        let out = model.forward(&mut g, xi)?;
        let heads = HeadOutputs {
            detection: out.detection.map(|v| g.value(v).cast()),
            drivable: g.value(out.drivable).cast(),
            lane: g.value(out.lane).cast(),
        };
        let (breakdown, hg) = joint_loss(
            &heads,
            &targets,
            &model.anchors,
            model.config.num_classes,
            weights,
            model.config.lane_loss_kind,
        )?;
        // gradients of the batch-summed loss, the usual one-stage detector convention
        let n = batch.len() as f64;
        let seed = |t: &Tensor<f64>| t.map(|v| v * n).cast();
        let mut seeds = Vec::with_capacity(5);
        for (v, t) in out.detection.iter().zip(&hg.detection) {
            seeds.push((*v, seed(t)));
        }
        seeds.push((out.drivable, seed(&hg.drivable)));
        seeds.push((out.lane, seed(&hg.lane)));
        let grads = g.backward(seeds).into_param_grads(&model.store);
        (breakdown, grads, g.into_stat_updates())
    };
    if grads.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteLoss { component: "gradient" });
    }
    for s in &stats {
        model.store.apply(s);
    }
    opt.step(&mut model.store, &grads, lr);
    Ok(breakdown)
}

/// Seed for one (epoch, item) pair of a run.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------- checkpoints

pub const CHECKPOINT_SCHEMA: &str = "roadsense-ckpt/1";
const CHECKPOINT_MAGIC: &[u8; 8] = b"RDSNCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Everything in a checkpoint except the raw tensor data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_id: String,
    pub dtype: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    pub has_velocity: bool,
    /// Epoch to resume at and batches of it already done.
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub step: usize,
    /// All randomness is derived from this seed and the position in the run.
    pub seed: u64,
    pub best_map50: Option<f64>,
}

fn write_tensor<T: Element>(out: &mut Vec<u8>, t: &Tensor<T>) {
    match T::DTYPE {
        "f32" => t.data().iter().for_each(|v| out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes())),
        _ => t.data().iter().for_each(|v| out.extend_from_slice(&v.as_f64().to_le_bytes())),
    }
}

fn read_tensor<T: Element>(bytes: &mut &[u8], dtype: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let width = if dtype == "f32" { 4 } else { 8 };
    if bytes.len() < n * width {
        return Err(Error::Checkpoint("truncated tensor data".into()));
    }
    let (head, rest) = bytes.split_at(n * width);
    let data = head
        .chunks_exact(width)
        .map(|c| {
            let v = if width == 4 {
                f64::from(f32::from_le_bytes(c.try_into().unwrap()))
            } else {
                f64::from_le_bytes(c.try_into().unwrap())
            };
            T::from_f64_lossy(v)
        })
        .collect();
    *bytes = rest;
    Tensor::from_vec(shape, data)
}

/// Model weights, running statistics and optional optimizer state.
pub fn save_checkpoint<T: Element>(
    path: &Path,
    model: &PerceptionModel<T>,
    opt: Option<&Sgd<T>>,
    mut header: CheckpointHeader,
) -> Result<()> {
    let store = &model.store;
    header.schema_id = CHECKPOINT_SCHEMA.into();
    header.dtype = T::DTYPE.into();
    header.model = model.config.clone();
    header.params = (0..store.len())
        .map(|i| TensorEntry {
            name: store.name(i).to_string(),
            shape: store.get(i).shape().to_vec(),
        })
        .collect();
    header.buffers = (0..store.buffers().len())
        .map(|i| TensorEntry {
            name: store.buffer_name(i).to_string(),
            shape: store.buffer(i).shape().to_vec(),
        })
        .collect();
    header.has_velocity = opt.is_some();
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 16 + 8 * store.scalar_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    store.values().iter().for_each(|t| write_tensor(&mut out, t));
    store.buffers().iter().for_each(|t| write_tensor(&mut out, t));
    if let Some(o) = opt {
        o.velocity.iter().for_each(|t| write_tensor(&mut out, t));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A loaded checkpoint.
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub model: PerceptionModel<T>,
    pub velocity: Option<Vec<Tensor<T>>>,
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
    if header.schema_id != CHECKPOINT_SCHEMA {
        return Err(bad(&format!("unsupported schema {}", header.schema_id)));
    }
    if header.dtype != "f32" && header.dtype != "f64" {
        return Err(bad(&format!("unsupported dtype {}", header.dtype)));
    }
    let mut model = PerceptionModel::<T>::new(header.model.clone(), 0)?;
    let store = &model.store;
    if header.params.len() != store.len() || header.buffers.len() != store.buffers().len() {
        return Err(bad("tensor count does not match the architecture"));
    }
    for (i, e) in header.params.iter().enumerate() {
        if e.name != store.name(i) || e.shape != store.get(i).shape() {
            return Err(bad(&format!("parameter {} does not match the architecture", e.name)));
        }
    }
    for (i, e) in header.buffers.iter().enumerate() {
        if e.name != store.buffer_name(i) || e.shape != store.buffer(i).shape() {
            return Err(bad(&format!("buffer {} does not match the architecture", e.name)));
        }
    }
    let mut rest = &bytes[16 + len..];
    for (i, e) in header.params.iter().enumerate() {
        model.store.values_mut()[i] = read_tensor(&mut rest, &header.dtype, &e.shape)?;
    }
    for (i, e) in header.buffers.iter().enumerate() {
        model.store.buffers_mut()[i] = read_tensor(&mut rest, &header.dtype, &e.shape)?;
    }
    let velocity = if header.has_velocity {
        let mut v = Vec::with_capacity(header.params.len());
        for e in &header.params {
            v.push(read_tensor(&mut rest, &header.dtype, &e.shape)?);
        }
        Some(v)
    } else {
        None
    };
    if !rest.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint { header, model, velocity })
}

// ----------------------------------------------------------------- evaluation

/// Detections kept per image before and after suppression.
pub const MAX_CANDIDATES: usize = 3000;
pub const MAX_DETECTIONS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub eval_size: (usize, usize),
    pub conf_threshold: f64,
    pub nms_iou_threshold: f64,
    pub batch_size: usize,
}

impl EvalOptions {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            eval_size: cfg.eval_size,
            conf_threshold: cfg.eval_conf_threshold,
            nms_iou_threshold: cfg.nms_iou_threshold,
            batch_size: cfg.batch_size.max(1),
        }
    }
}

/// Network-space predictions for one letterboxed image.
#[derive(Debug, Clone, PartialEq)]
pub struct NetPrediction {
    pub detections: Vec<Detection>,
    pub drivable: Mask,
    pub lane: Mask,
}

/// Suppress and cap decoded detections.
pub fn postprocess(mut dets: Vec<Detection>, nms_iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    dets.truncate(MAX_CANDIDATES);
    let mut kept = nms(dets, nms_iou);
    kept.truncate(MAX_DETECTIONS);
    kept
}

/// Decode, suppress and threshold the outputs of a network-sized batch.
pub fn decode_outputs<T: Element>(
    model: &PerceptionModel<T>,
    out: &InferenceOutputs<T>,
    conf_threshold: f64,
    nms_iou: f64,
) -> Vec<NetPrediction> {
    let (_, _, h, w) = out.drivable.dims4();
    let raw = RawDetectionOutput::from_head_outputs(&out.detection, model.config.num_classes);
    let dets = decode_boxes(&raw, &model.anchors, conf_threshold, (w, h));
    dets.into_iter()
        .enumerate()
        .map(|(n, d)| NetPrediction {
            detections: postprocess(d, nms_iou),
            drivable: Mask::from_logits(&out.drivable, n),
            lane: Mask::from_logits(&out.lane, n),
        })
        .collect()
}

/// Evaluation-mode forward of a batch of network-sized images.
pub fn predict_batch<T: Element>(
    model: &PerceptionModel<T>,
    images: &[&crate::data::Image],
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<NetPrediction>> {
    let out = model.infer(images_to_tensor::<T>(images)?)?;
    Ok(decode_outputs(model, &out, conf_threshold, nms_iou))
}

/// Map a network-space prediction back to source-image coordinates.
pub fn unletterbox(p: NetPrediction, lb: &Letterbox) -> NetPrediction {
    NetPrediction {
        detections: p
            .detections
            .into_iter()
            .map(|d| Detection {
                bbox: lb.inverse_box(d.bbox),
                ..d
            })
            .filter(|d| d.bbox[2] > d.bbox[0] && d.bbox[3] > d.bbox[1])
            .collect(),
        drivable: lb.inverse_mask(&p.drivable),
        lane: lb.inverse_mask(&p.lane),
    }
}

/// Evaluate on a split: letterbox to the evaluation size, predict, map back
/// to source coordinates and score against the source-resolution labels.
pub fn evaluate_state<T: Element>(model: &PerceptionModel<T>, manifest: &DatasetManifest, opts: &EvalOptions) -> Result<EvalState> {
    check_input_size(opts.eval_size.0, opts.eval_size.1)?;
    let mut state = EvalState::default();
    if manifest.is_empty() {
        log::warn!("evaluating an empty {} split", manifest.split);
        return Ok(state);
    }
    let idx: Vec<usize> = (0..manifest.len()).collect();
    for chunk in idx.chunks(opts.batch_size.max(1)) {
        let samples: Vec<Sample> = chunk.iter().map(|&i| manifest.load_sample(i)).collect::<Result<_>>()?;
        let boxed: Vec<Sample> = samples
            .iter()
            .map(|s| resize_letterbox(s, opts.eval_size))
            .collect::<Result<_>>()?;
        let images: Vec<_> = boxed.iter().map(|s| &s.image).collect();
        let preds = predict_batch(model, &images, opts.conf_threshold, opts.nms_iou_threshold)?;
        for ((i, s), p) in chunk.iter().zip(&samples).zip(preds) {
            let lb = Letterbox::new((s.width(), s.height()), opts.eval_size);
            let p = unletterbox(p, &lb);
            let gts = s
                .objects
                .iter()
                .map(|o| GtBox {
                    class_id: o.class_id,
                    bbox: o.bbox,
                })
                .collect();
            let rec = ImageRecord::new(p.detections, gts, (&p.drivable, &s.drivable), (&p.lane, &s.lane))?;
            state.insert(manifest.entries[*i].id.clone(), rec)?;
        }
    }
    Ok(state)
}

pub fn evaluate<T: Element>(model: &PerceptionModel<T>, manifest: &DatasetManifest, opts: &EvalOptions) -> Result<MetricReport> {
    let mut report = evaluate_state(model, manifest, opts)?.report(opts.conf_threshold);
    report.param_count = Some(model.param_count());
    if manifest.is_empty() {
        report.notes.push(format!("{} split is empty", manifest.split));
    }
    Ok(report)
}

// ------------------------------------------------------------------- fit loop

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

pub const LOG_HEADER: &str = "step,lr,class,obj,box,drivable,lane,total";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.lr, l.class_loss, l.obj_loss, l.box_loss, l.drivable_loss, l.lane_loss, l.total
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Input(format!("malformed log row {line:?}"));
        if f.len() != 8 {
            return Err(bad());
        }
        let n = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            lr: n(1)?,
            losses: LossBreakdown {
                class_loss: n(2)?,
                obj_loss: n(3)?,
                box_loss: n(4)?,
                drivable_loss: n(5)?,
                lane_loss: n(6)?,
                total: n(7)?,
            },
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(LogRow::parse).collect()
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Directory receiving `last.ckpt`, `best.ckpt`, `train_log.csv` and
    /// `eval_epoch{N}.json`.
    pub run_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    /// Split evaluated every `eval_every` epochs and at the end.
    pub eval: Option<DatasetManifest>,
    /// Continue from `run_dir/last.ckpt` when it exists.
    pub resume: bool,
    /// Return after finishing this many epochs (the schedule still spans
    /// `total_epochs`).
    pub stop_after_epoch: Option<usize>,
    /// Checked before every step; when set the run saves and returns.
    pub stop: Option<Arc<AtomicBool>>,
}

impl FitOptions {
    pub fn new(run_dir: impl Into<PathBuf>, model: ModelConfig, train: TrainConfig, loss: LossWeights) -> Self {
        Self {
            run_dir: run_dir.into(),
            model,
            train,
            loss,
            eval: None,
            resume: false,
            stop_after_epoch: None,
            stop: None,
        }
    }
}

pub struct FitOutcome {
    pub model: PerceptionModel<f32>,
    pub last: PathBuf,
    pub best: Option<PathBuf>,
    pub log: PathBuf,
    pub history: Vec<LogRow>,
    /// (epoch, report) for each evaluation run.
    pub reports: Vec<(usize, MetricReport)>,
    pub interrupted: bool,
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

/// Anchors re-fitted to the training boxes at the input size, 3 per scale.
pub fn fit_anchors(samples: &[Sample], input_size: (usize, usize), seed: u64) -> Option<Vec<[f64; 2]>> {
    let mut sizes = Vec::new();
    for s in samples {
        let lb = Letterbox::new((s.width(), s.height()), input_size);
        for o in &s.objects {
            let b = lb.forward_box(o.bbox);
            sizes.push([b[2] - b[0], b[3] - b[1]]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kmeans_anchors(&sizes, 9, 100, &mut rng)
}

/// Train on `train_split` following the schedule in `opts.train`.
///
/// Every step's losses and learning rate go to `train_log.csv`; the latest
/// state is saved to `last.ckpt` after every epoch (and on interruption), and
/// the best evaluation mAP50 so far to `best.ckpt`. Sample order and
/// augmentation are derived from `(seed, epoch, index)`, so a resumed run
/// repeats the uninterrupted one exactly.
pub fn fit(train_split: &DatasetManifest, opts: &FitOptions) -> Result<FitOutcome> {
    let cfg = &opts.train;
    cfg.validate()?;
    opts.loss.validate()?;
    if train_split.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    fs::create_dir_all(&opts.run_dir).map_err(|e| Error::io(&opts.run_dir, e))?;
    let last_path = opts.run_dir.join("last.ckpt");
    let best_path = opts.run_dir.join("best.ckpt");
    let log_path = opts.run_dir.join("train_log.csv");

    let pool = train_split.load_all()?;
    let spe = steps_per_epoch(pool.len(), cfg.batch_size);

    let (mut model, mut opt, mut epoch, mut skip, mut step, mut best, mut history) =
        if opts.resume && last_path.is_file() {
            let ck = load_checkpoint::<f32>(&last_path)?;
            if ck.header.seed != cfg.seed {
                return Err(Error::Checkpoint(format!(
                    "checkpoint seed {} differs from configured seed {}",
                    ck.header.seed, cfg.seed
                )));
            }
            let mut opt = Sgd::new(&ck.model.store, cfg.momentum, cfg.weight_decay);
            if let Some(v) = ck.velocity {
                opt.velocity = v;
            }
            let mut history = if log_path.is_file() { read_log(&log_path)? } else { Vec::new() };
            history.retain(|r| r.step < ck.header.step);
            log::info!("resuming at epoch {} step {}", ck.header.epoch, ck.header.step);
            (
                ck.model,
                opt,
                ck.header.epoch,
                ck.header.batch_in_epoch,
                ck.header.step,
                ck.header.best_map50,
                history,
            )
        } else {
            let mut model_cfg = opts.model.clone();
            if cfg.auto_anchors {
                match fit_anchors(&pool, model_cfg.input_size, cfg.seed) {
                    Some(a) => model_cfg.anchor_sizes = a,
                    None => log::warn!("too few boxes to fit anchors; keeping the configured ones"),
                }
            }
            let model = PerceptionModel::<f32>::new(model_cfg, cfg.seed)?;
            let opt = Sgd::new(&model.store, cfg.momentum, cfg.weight_decay);
            (model, opt, 0, 0, 0, None, Vec::new())
        };
    write_log(&log_path, &history)?;
    let mut log_file = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let pipeline = AugmentPipeline {
        input_size: model.config.input_size,
        config: AugmentConfig {
            use_mosaic: model.config.use_mosaic && cfg.augment.use_mosaic,
            use_mixup: model.config.use_mixup && cfg.augment.use_mixup,
            ..cfg.augment
        },
    };
    let header = |model: &PerceptionModel<f32>, epoch: usize, batch_in_epoch: usize, step: usize, best: Option<f64>| {
        CheckpointHeader {
            schema_id: String::new(),
            dtype: String::new(),
            model: model.config.clone(),
            train: cfg.clone(),
            loss: opts.loss,
            params: vec![],
            buffers: vec![],
            has_velocity: false,
            epoch,
            batch_in_epoch,
            step,
            seed: cfg.seed,
            best_map50: best,
        }
    };
    let mut reports = Vec::new();
    let mut interrupted = false;
    let eval_opts = EvalOptions::from_train(cfg);

    while epoch < cfg.total_epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, u64::MAX)));
        let mosaic_allowed = epoch + cfg.augment.close_mosaic_epochs < cfg.total_epochs;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate().skip(skip) {
            if opts.stop.as_ref().is_some_and(|s| s.load(Ordering::SeqCst)) {
                save_checkpoint(&last_path, &model, Some(&opt), header(&model, epoch, b, step, best))?;
                interrupted = true;
                break;
            }
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, i as u64));
                    pipeline.sample(&pool, i, mosaic_allowed, &mut rng)
                })
                .collect::<Result<_>>()?;
            let lr = lr_at(step, cfg, spe);
            let losses = train_step(&mut model, &mut opt, &batch, &opts.loss, lr)?;
            let row = LogRow { step, lr, losses };
            writeln!(log_file, "{}", row.to_csv()).map_err(|e| Error::io(&log_path, e))?;
            history.push(row);
            step += 1;
        }
        if interrupted {
            break;
        }
        skip = 0;
        epoch += 1;
        let due = cfg.eval_every > 0 && epoch % cfg.eval_every == 0 || epoch == cfg.total_epochs;
        if let (true, Some(eval)) = (due, &opts.eval) {
            let report = evaluate(&model, eval, &eval_opts)?;
            let path = opts.run_dir.join(format!("eval_epoch{epoch}.json"));
            fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
            let score = report.map50.unwrap_or(-1.0);
            if best.is_none_or(|b| score > b) {
                best = Some(score);
                save_checkpoint(&best_path, &model, None, header(&model, epoch, 0, step, best))?;
            }
            reports.push((epoch, report));
        }
        save_checkpoint(&last_path, &model, Some(&opt), header(&model, epoch, 0, step, best))?;
        if opts.stop_after_epoch.is_some_and(|e| epoch >= e) {
            break;
        }
    }
    Ok(FitOutcome {
        model,
        last: last_path,
        best: best_path.is_file().then_some(best_path),
        log: log_path,
        history,
        reports,
        interrupted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            total_epochs: 10,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_boundaries() {
        let c = cfg();
        assert_eq!(lr_at(0, &c, 5), 0.0);
        assert!((lr_at(15, &c, 5) - 0.01).abs() < 1e-15);
        assert!((lr_at(49, &c, 5) - 0.0001).abs() < 1e-15);
        let restarts = TrainConfig {
            schedule: Schedule::WarmRestarts,
            ..c
        };
        assert_eq!(lr_at(0, &restarts, 5), 0.01);
        assert_eq!(lr_at(5, &restarts, 5), 0.01);
        assert!(lr_at(4, &restarts, 5) < 0.001);
    }

    #[test]
    fn validate_rejects_bad_values() {
        let mut c = cfg();
        c.warmup_epochs = 10;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        cfg().validate().unwrap();
    }

    #[test]
    fn sgd_matches_hand_rolled_updates() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", ParamKind::Weight, Tensor::from_vec(&[1], vec![1.0]).unwrap());
        store.add("b", ParamKind::Bias, Tensor::from_vec(&[1], vec![-2.0]).unwrap());
        let mut opt = Sgd::new(&store, 0.9, 0.1);
        let (mut w, mut b, mut vw, mut vb) = (1.0f64, -2.0f64, 0.0f64, 0.0f64);
        for k in 0..5 {
            // loss = (w - 3)^2 + (b + 1)^2
            let gw = 2.0 * (store.get(0).data()[0] - 3.0);
            let gb = 2.0 * (store.get(1).data()[0] + 1.0);
            let grads = vec![Tensor::from_vec(&[1], vec![gw]).unwrap(), Tensor::from_vec(&[1], vec![gb]).unwrap()];
            let lr = 0.05 * (k + 1) as f64;
            opt.step(&mut store, &grads, lr);
            vw = 0.9 * vw + 2.0 * (w - 3.0) + 0.1 * w;
            w -= lr * vw;
            vb = 0.9 * vb + 2.0 * (b + 1.0);
            b -= lr * vb;
            assert_eq!(store.get(0).data()[0], w);
            assert_eq!(store.get(1).data()[0], b);
        }
    }

    #[test]
    fn log_row_round_trip() {
        let r = LogRow {
            step: 3,
            lr: 0.1 + 0.2,
            losses: LossBreakdown::new(0.1, 0.25, 1.0 / 3.0, 0.5, 0.7, &LossWeights::default()),
        };
        assert_eq!(LogRow::parse(&r.to_csv()).unwrap(), r);
    }
}
