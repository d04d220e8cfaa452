//! Multi-stage training: learning-rate schedule, Adam, batching and the
//! stage loop with logging, checkpoints and resume.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, normalize, AugmentConfig};
use crate::data::{load_samples, Sample};
use crate::engine::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig};
use crate::losses::{total_loss, BatchTargets, LossBreakdown, LossConfig};
use crate::network::{save_checkpoint, Model, ModelOutputs, NetworkConfig};
use crate::postprocess::InferenceConfig;
use crate::quant::{prepare_qat, QuantConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Pretrain1,
    Pretrain2,
    Finetune,
    Qat,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Pretrain1 => "pretrain1",
            StageName::Pretrain2 => "pretrain2",
            StageName::Finetune => "finetune",
            StageName::Qat => "qat",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: StageName,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub mosaic: bool,
    /// Mosaic is switched off for this many final epochs.
    #[serde(default)]
    pub mosaic_off_tail: usize,
    /// Dataset manifests; relative paths resolve against the schedule's
    /// `data_root`.
    pub datasets: Vec<PathBuf>,
    /// Convert to deploy form and train with fake quantization.
    #[serde(default)]
    pub qat: bool,
}

impl StageConfig {
    pub fn validate(&self, key: &str) -> Result<()> {
        let bad = |k: &str, r: &str| {
            Err(Error::Config {
                key: format!("{key}.{k}"),
                reason: r.into(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return bad("lr_init", "must be a positive number");
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            return bad("lr_min", "must be in [0, lr_init]");
        }
        if self.warmup_epochs >= self.epochs && self.warmup_epochs > 0 {
            return bad("warmup_epochs", "must be smaller than epochs");
        }
        if self.mosaic_off_tail > self.epochs {
            return bad("mosaic_off_tail", "must not exceed epochs");
        }
        if self.datasets.is_empty() {
            return bad("datasets", "at least one dataset is required");
        }
        Ok(())
    }

    /// Whether mosaic composition is active in `epoch` (0-based).
    pub fn mosaic_active(&self, epoch: usize) -> bool {
        self.mosaic && epoch + self.mosaic_off_tail < self.epochs
    }
}

/// Linear warmup from `lr_init / 100` to `lr_init`, then cosine decay that
/// reaches `lr_min` on the last step.
pub fn lr_at(stage: &StageConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let warm = stage.warmup_epochs * steps_per_epoch;
    let total = stage.epochs * steps_per_epoch;
    let start = stage.lr_init / 100.0;
    if step < warm {
        return start + (stage.lr_init - start) * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm + 1);
    if span == 0 {
        return stage.lr_init;
    }
    let t = ((step - warm) as f64 / span as f64).min(1.0);
    stage.lr_min + 0.5 * (stage.lr_init - stage.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter moment buffers keyed by name.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, model: &mut Model, grads: &IndexMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, g) in grads {
            let p = match model.store.param_mut(name) {
                Some(p) if p.trainable => p,
                _ => continue,
            };
            let n = g.numel();
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for ((w, &gi), (mi, vi)) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let gi = gi as f64;
                *mi = (b1 * *mi as f64 + (1.0 - b1) * gi) as f32;
                *vi = (b2 * *vi as f64 + (1.0 - b2) * gi * gi) as f32;
                let mh = *mi as f64 / c1;
                let vh = *vi as f64 / c2;
                *w -= (lr * mh / (vh.sqrt() + self.cfg.eps)) as f32;
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &IndexMap<String, Tensor>) -> f64 {
    grads.values().map(|g| g.sum_sq()).sum::<f64>().sqrt()
}

/// Rescales the gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut IndexMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let k = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.scale_inplace(k);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub stages: Vec<StageConfig>,
    pub seed: u64,
    pub network: NetworkConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub quant: QuantConfig,
    pub eval: EvalConfig,
    pub inference: InferenceConfig,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    /// Decay of an exponential moving average of the weights; when set, the
    /// averaged weights replace the trained ones at the end of each stage.
    pub weight_ema: Option<f64>,
    /// Held-out manifest scored every `eval_every` epochs and after the last.
    pub val_dataset: Option<PathBuf>,
    pub eval_every: usize,
    pub data_root: PathBuf,
    /// Caps the number of optimizer steps per epoch (smoke runs).
    pub max_steps_per_epoch: Option<usize>,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.augment.validate()?;
        self.quant.validate()?;
        self.inference.validate()?;
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(&format!("schedule.stages[{i}]"))?;
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config {
                key: "schedule.grad_clip".into(),
                reason: "must be > 0".into(),
            });
        }
        if let Some(d) = self.weight_ema {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config {
                    key: "schedule.weight_ema".into(),
                    reason: "must be in [0,1)".into(),
                });
            }
        }
        if self.eval_every == 0 {
            return Err(Error::Config {
                key: "schedule.eval_every".into(),
                reason: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_root.join(p)
        }
    }
}

/// Scores on the held-out split recorded in the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub map50: f64,
    pub drivable_miou: f64,
    pub lane_miou: f64,
    pub merged_miou: f64,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: StageName,
    pub stage_index: usize,
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Mean of every loss component over the epoch's batches.
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub mosaic_applied: usize,
    pub mosaic_skipped: usize,
    pub eval: Option<EvalSummary>,
}

/// Per-epoch hook; returning an error aborts training.
pub type EpochHook<'a> = dyn FnMut(&EpochLog) -> Result<()> + 'a;

pub struct ScheduleOutcome {
    pub model: Model,
    pub logs: Vec<EpochLog>,
    /// Checkpoint written after each stage, in stage order.
    pub checkpoints: Vec<PathBuf>,
}

/// Normalized image batch and labels at network input resolution.
pub struct Batch {
    pub images: Tensor,
    pub targets: BatchTargets,
    pub mosaic_applied: usize,
}

fn stream_id(stage: usize, epoch: usize, slot: usize) -> u64 {
    ((stage as u64) << 48) | ((epoch as u64) << 24) | slot as u64
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sample order of one epoch.
pub fn epoch_order(seed: u64, stage: usize, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed, (1 << 63) | stream_id(stage, epoch, 0)));
    idx
}

/// Resizes a sample to the network input (bilinear image, nearest masks,
/// scaled boxes).
pub fn fit_sample(s: &Sample, height: usize, width: usize) -> Sample {
    if s.height() == height && s.width() == width {
        return s.clone();
    }
    let (sx, sy) = (width as f32 / s.width() as f32, height as f32 / s.height() as f32);
    let boxes = s
        .boxes
        .iter()
        .filter_map(|b| {
            let mut b = *b;
            b.x1 *= sx;
            b.x2 *= sx;
            b.y1 *= sy;
            b.y2 *= sy;
            b.clamp(width as f32, height as f32)
        })
        .collect();
    Sample {
        image: s.image.resize_bilinear(height, width),
        boxes,
        drivable: s.drivable.resize_nearest(height, width),
        lane: s.lane.resize_nearest(height, width),
        source_id: s.source_id.clone(),
    }
}

/// Stacks samples into a normalized batch without augmentation.
pub fn collate(samples: &[Sample], mean: [f32; 3], std: [f32; 3]) -> Batch {
    let images: Vec<Tensor> = samples
        .iter()
        .map(|s| Tensor::from_vec(&[1, 3, s.height(), s.width()], normalize(&s.image, mean, std).to_chw()))
        .collect();
    Batch {
        images: Tensor::stack(&images),
        targets: BatchTargets {
            boxes: samples.iter().map(|s| s.boxes.clone()).collect(),
            drivable: samples.iter().flat_map(|s| s.drivable.labels.iter().copied()).collect(),
            lane: samples.iter().flat_map(|s| s.lane.labels.iter().copied()).collect(),
        },
        mosaic_applied: 0,
    }
}

/// Builds the augmented batch for slots `slots` of an epoch. Each slot draws
/// from its own random stream, so the result does not depend on threading.
#[allow(clippy::too_many_arguments)]
pub fn make_batch(
    seed: u64,
    data: &[Sample],
    order: &[usize],
    slots: std::ops::Range<usize>,
    aug: &AugmentConfig,
    mosaic: bool,
    stage: usize,
    epoch: usize,
) -> Result<Batch> {
    let out: Vec<(Sample, bool)> = slots
        .into_par_iter()
        .map(|slot| {
            let mut rng = seeded(seed, stream_id(stage, epoch, slot));
            let s = &data[order[slot]];
            let partners = if mosaic && data.len() > 1 {
                let p: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..data.len()));
                Some([&data[p[0]], &data[p[1]], &data[p[2]]])
            } else {
                None
            };
            let used = partners.is_some();
            augment(s, partners, aug, &mut rng).map(|s| (s, used))
        })
        .collect::<Result<_>>()?;
    let mosaic_applied = out.iter().filter(|(_, m)| *m).count();
    let samples: Vec<Sample> = out.into_iter().map(|(s, _)| s).collect();
    let mut b = collate(&samples, aug.normalize_mean, aug.normalize_std);
    b.mosaic_applied = mosaic_applied;
    Ok(b)
}

/// Name of the first non-finite loss component, if any.
pub fn non_finite_component(b: &LossBreakdown) -> Option<&'static str> {
    b.components().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
}

/// Outcome of one optimization step.
pub struct StepResult {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Forward, loss, backward, clipping and an Adam update. Segmentation
/// logits are bilinearly upsampled to the input resolution before the loss.
/// Returns `Err(component)` without touching the weights when the loss or
/// the gradient is not finite.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &Batch,
    schedule: &TrainSchedule,
    lr: f64,
) -> Result<std::result::Result<StepResult, &'static str>> {
    let [h, w] = model.config.input_size;
    let mut g = Graph::new();
    let x = g.input(batch.images.clone());
    let out = model.forward_graph(&mut g, x, true)?;
    let da = g.resize_bilinear(out.drivable, h, w);
    let ll = g.resize_bilinear(out.lane, h, w);
    let values = ModelOutputs {
        det: out.det.map(|v| g.value(v).clone()),
        drivable: g.value(da).clone(),
        lane: g.value(ll).clone(),
    };
    let (loss, grads) = total_loss(&values, &batch.targets, &schedule.network.anchors, &schedule.loss)?;
    if let Some(c) = non_finite_component(&loss) {
        return Ok(Err(c));
    }
    let ModelOutputs {
        det: [g0, g1, g2],
        drivable,
        lane,
    } = grads;
    let seeds = vec![
        (out.det[0], g0),
        (out.det[1], g1),
        (out.det[2], g2),
        (da, drivable),
        (ll, lane),
    ];
    let mut pg = g.backward(seeds).params;
    let norm = clip_grad_norm(&mut pg, schedule.grad_clip);
    if !norm.is_finite() {
        return Ok(Err("gradient"));
    }
    opt.update(model, &pg, lr);
    Ok(Ok(StepResult { loss, grad_norm: norm }))
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.det_class += b.det_class;
    acc.det_obj += b.det_obj;
    acc.det_box += b.det_box;
    acc.det += b.det;
    acc.da_tversky += b.da_tversky;
    acc.da_focal += b.da_focal;
    acc.da += b.da;
    acc.ll_tversky += b.ll_tversky;
    acc.ll_focal += b.ll_focal;
    acc.ll_jaccard += b.ll_jaccard;
    acc.ll += b.ll;
    acc.total += b.total;
    acc.unassigned += b.unassigned;
}

fn scale_breakdown(acc: &mut LossBreakdown, k: f64) {
    for v in [
        &mut acc.det_class,
        &mut acc.det_obj,
        &mut acc.det_box,
        &mut acc.det,
        &mut acc.da_tversky,
        &mut acc.da_focal,
        &mut acc.da,
        &mut acc.ll_tversky,
        &mut acc.ll_focal,
        &mut acc.ll_jaccard,
        &mut acc.ll,
        &mut acc.total,
    ] {
        *v *= k;
    }
}

/// Loads and caches datasets, fitting every sample to the input size.
#[derive(Default)]
pub struct DataCache {
    sets: HashMap<PathBuf, Arc<Vec<Sample>>>,
}

impl DataCache {
    pub fn load(&mut self, path: &Path, size: [usize; 2]) -> Result<Arc<Vec<Sample>>> {
        if let Some(s) = self.sets.get(path) {
            return Ok(s.clone());
        }
        let samples: Vec<Sample> = load_samples(path)?.iter().map(|s| fit_sample(s, size[0], size[1])).collect();
        let arc = Arc::new(samples);
        self.sets.insert(path.to_path_buf(), arc.clone());
        Ok(arc)
    }

    pub fn concat(&mut self, paths: &[PathBuf], schedule: &TrainSchedule) -> Result<Vec<Sample>> {
        let mut all = Vec::new();
        for p in paths {
            all.extend(self.load(&schedule.resolve(p), schedule.network.input_size)?.iter().cloned());
        }
        if all.is_empty() {
            return Err(Error::Argument("training datasets are empty".into()));
        }
        Ok(all)
    }
}

pub fn checkpoint_path(out_dir: &Path, index: usize, name: StageName) -> PathBuf {
    out_dir.join("checkpoints").join(format!("stage{}_{}.ckpt", index + 1, name.as_str()))
}

/// Trains stage `index` of `schedule` in place.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    model: &mut Model,
    schedule: &TrainSchedule,
    index: usize,
    data: &[Sample],
    val: Option<&[Sample]>,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochLog>> {
    let stage = &schedule.stages[index];
    let name = stage.name.as_str().to_string();
    if stage.qat && model.qat.is_none() {
        prepare_qat(model, &schedule.quant)?;
    }
    let mut opt = Adam::new(schedule.adam);
    let mut ema: Option<IndexMap<String, Tensor>> = schedule.weight_ema.map(|_| {
        model
            .store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect()
    });
    let full_steps = data.len().div_ceil(stage.batch_size);
    let steps_per_epoch = schedule.max_steps_per_epoch.map_or(full_steps, |m| m.min(full_steps)).max(1);
    let mut logs = Vec::with_capacity(stage.epochs);
    let mut step = 0usize;
    for epoch in 0..stage.epochs {
        let order = epoch_order(schedule.seed, index, epoch, data.len());
        let mosaic = stage.mosaic_active(epoch);
        let mut acc = LossBreakdown::default();
        let mut norm_acc = 0.0;
        let mut mosaic_applied = 0;
        let mut lr = 0.0;
        for b in 0..steps_per_epoch {
            let lo = b * stage.batch_size;
            let hi = (lo + stage.batch_size).min(data.len());
            let batch = make_batch(schedule.seed, data, &order, lo..hi, &schedule.augment, mosaic, index, epoch).map_err(|e| Error::Stage {
                stage: name.clone(),
                epoch,
                source: Box::new(e),
            })?;
            mosaic_applied += batch.mosaic_applied;
            lr = lr_at(stage, step, steps_per_epoch);
            let r = train_step(model, &mut opt, &batch, schedule, lr).map_err(|e| Error::Stage {
                stage: name.clone(),
                epoch,
                source: Box::new(e),
            })?;
            let r = r.map_err(|component| Error::NonFiniteLoss {
                stage: name.clone(),
                epoch,
                component: component.to_string(),
            })?;
            if let (Some(avg), Some(d)) = (ema.as_mut(), schedule.weight_ema) {
                for (n, p) in model.store.iter() {
                    if let Some(e) = avg.get_mut(n) {
                        for (a, &w) in e.data_mut().iter_mut().zip(p.value.data()) {
                            *a = (d * *a as f64 + (1.0 - d) * w as f64) as f32;
                        }
                    }
                }
            }
            add_breakdown(&mut acc, &r.loss);
            norm_acc += r.grad_norm;
            step += 1;
        }
        scale_breakdown(&mut acc, 1.0 / steps_per_epoch as f64);
        let last = epoch + 1 == stage.epochs;
        let eval = match val {
            Some(v) if !v.is_empty() && (last || (epoch + 1) % schedule.eval_every == 0) => {
                let r = evaluate(model, v, &schedule.inference, &schedule.eval)?;
                Some(EvalSummary {
                    map50: r.map50,
                    drivable_miou: r.drivable.miou,
                    lane_miou: r.lane.miou,
                    merged_miou: r.merged.miou,
                })
            }
            _ => None,
        };
        let total_slots: usize = (0..steps_per_epoch)
            .map(|b| ((b + 1) * stage.batch_size).min(data.len()).saturating_sub(b * stage.batch_size))
            .sum();
        let entry = EpochLog {
            stage: stage.name,
            stage_index: index,
            epoch,
            steps: steps_per_epoch,
            lr,
            loss: acc,
            grad_norm: norm_acc / steps_per_epoch as f64,
            mosaic_applied,
            mosaic_skipped: total_slots - mosaic_applied,
            eval,
        };
        log::info!(
            "{} epoch {}/{} loss {:.4} (det {:.4} da {:.4} ll {:.4}) lr {:.2e}",
            name,
            epoch + 1,
            stage.epochs,
            entry.loss.total,
            entry.loss.det,
            entry.loss.da,
            entry.loss.ll,
            lr
        );
        hook(&entry)?;
        logs.push(entry);
    }
    if let Some(avg) = ema {
        for (n, t) in avg {
            *model.store.tensor_mut(&n) = t;
        }
    }
    Ok(logs)
}

/// Where to pick up an interrupted schedule.
#[derive(Clone, Debug)]
pub struct Resume {
    /// Model state at the end of the previous stage.
    pub model: Model,
    /// Index of the first stage still to run.
    pub next_stage: usize,
}

/// Runs every stage in order, appending one JSON line per epoch to
/// `out_dir/train_log.jsonl` and writing a checkpoint after each stage.
pub fn run_schedule(schedule: &TrainSchedule, out_dir: &Path, resume: Option<Resume>) -> Result<ScheduleOutcome> {
    schedule.validate()?;
    fs::create_dir_all(out_dir.join("checkpoints")).map_err(|e| Error::io(out_dir, e))?;
    let (mut model, first) = match resume {
        Some(r) => {
            if r.next_stage > schedule.stages.len() {
                return Err(Error::Argument(format!(
                    "cannot resume at stage {} of a {}-stage schedule",
                    r.next_stage + 1,
                    schedule.stages.len()
                )));
            }
            (r.model, r.next_stage)
        }
        None => (Model::build(&schedule.network, schedule.seed)?, 0),
    };
    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = if first == 0 {
        File::create(&log_path)
    } else {
        OpenOptions::new().create(true).append(true).open(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut cache = DataCache::default();
    let val = match &schedule.val_dataset {
        Some(p) => Some(cache.load(&schedule.resolve(p), schedule.network.input_size)?),
        None => None,
    };
    let mut logs = Vec::new();
    let mut checkpoints = Vec::new();
    for index in first..schedule.stages.len() {
        let stage = &schedule.stages[index];
        let data = cache.concat(&stage.datasets, schedule).map_err(|e| Error::Stage {
            stage: stage.name.as_str().into(),
            epoch: 0,
            source: Box::new(e),
        })?;
        let mut hook = |e: &EpochLog| -> Result<()> {
            let line = serde_json::to_string(e).map_err(|err| Error::Format(err.to_string()))?;
            writeln!(log_file, "{line}").map_err(|err| Error::io(&log_path, err))
        };
        logs.extend(run_stage(&mut model, schedule, index, &data, val.as_deref().map(|v| v.as_slice()), &mut hook)?);
        let ck = checkpoint_path(out_dir, index, stage.name);
        save_checkpoint(&model, &ck)?;
        checkpoints.push(ck);
    }
    Ok(ScheduleOutcome {
        model,
        logs,
        checkpoints,
    })
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
