//! Optimisation loop: augmentation, schedule, AdamW, checkpoints and the
//! line-JSON training log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{round_f32, Checkpoint, CheckpointError};
use crate::config::{RunConfig, TrainConfig};
use crate::losses::{total_loss, LossReport};
use crate::matching::{cost_matrix, hungarian, CostWeights, PredictionView, Targets};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::synthdata::{background, scene_seed, Dataset, Image, Instance, Mask, SceneAnnotation};
use crate::tensor::{Graph, Tensor, TensorError};

/// Attempts at drawing a jitter ratio that keeps at least one instance.
pub const LSJ_MAX_ATTEMPTS: usize = 10;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const AUGMENT_STREAM: u64 = 0x6175_6720;
const ORDER_STREAM: u64 = 0x6f72_6465;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("invalid training setup: {0}")]
    Setup(String),
    #[error("non-finite loss at iteration {iteration}: {}", dump(report))]
    NonFinite { iteration: usize, report: LossReport },
}

fn dump(r: &LossReport) -> String {
    format!(
        "total={} cls={:?} focal={:?} dice={:?} attr={:?}",
        r.total, r.cls, r.focal, r.dice, r.attr
    )
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> TrainError {
    let context = context.into();
    move |source| TrainError::Io { context, source }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub total: f64,
    pub cls: Vec<f64>,
    pub focal: Vec<f64>,
    pub dice: Vec<f64>,
    pub attr: Vec<f64>,
    pub lr: f64,
}

impl LogEntry {
    pub fn report(&self) -> LossReport {
        LossReport {
            total: self.total,
            cls: self.cls.clone(),
            focal: self.focal.clone(),
            dice: self.dice.clone(),
            attr: self.attr.clone(),
        }
    }
}

/// Large-scale jitter: rescale by a ratio drawn from `ratio`, then crop or
/// pad (with background noise) back to the input size at a random offset.
pub fn lsj_augment(
    image: &Image,
    ann: &SceneAnnotation,
    ratio: (f64, f64),
    rng: &mut impl Rng,
) -> (Image, SceneAnnotation) {
    for _ in 0..LSJ_MAX_ATTEMPTS {
        let r = rng.random_range(ratio.0..=ratio.1);
        let out = jitter(image, ann, r, rng);
        if !out.1.instances.is_empty() || ann.instances.is_empty() {
            return out;
        }
    }
    (image.clone(), ann.clone())
}

/// Source offset, destination offset and copied length along one axis.
fn placement(scaled: usize, target: usize, rng: &mut impl Rng) -> (usize, usize, usize) {
    if scaled >= target {
        (rng.random_range(0..=scaled - target), 0, target)
    } else {
        (0, rng.random_range(0..=target - scaled), scaled)
    }
}

fn jitter(image: &Image, ann: &SceneAnnotation, r: f64, rng: &mut impl Rng) -> (Image, SceneAnnotation) {
    let (h, w) = (image.height, image.width);
    let sh = ((h as f64 * r).round() as usize).max(1);
    let sw = ((w as f64 * r).round() as usize).max(1);
    let scaled = if (sh, sw) == (h, w) {
        image.clone()
    } else {
        let mut g = Graph::new();
        let x = g.constant(image.to_tensor());
        let y = g.resize_bilinear(x, sh, sw).expect("3-channel image resizes");
        Image {
            height: sh,
            width: sw,
            pixels: g.value(y).data().iter().map(|&v| v as f32).collect(),
        }
    };
    let (sy, dy, ly) = placement(sh, h, rng);
    let (sx, dx, lx) = placement(sw, w, rng);
    let mut out = if sh < h || sw < w {
        background(h, w, rng)
    } else {
        Image::filled(h, w, 0.0)
    };
    for c in 0..3 {
        for y in 0..ly {
            for x in 0..lx {
                out.set(c, dy + y, dx + x, scaled.get(c, sy + y, sx + x));
            }
        }
    }
    let instances = ann
        .instances
        .iter()
        .filter_map(|inst| {
            let m = inst.mask.resize_nearest(sh, sw);
            let mut placed = Mask::empty(h, w);
            for y in 0..ly {
                for x in 0..lx {
                    if m.get(sy + y, sx + x) {
                        placed.set(dy + y, dx + x, true);
                    }
                }
            }
            (placed.area() > 0).then(|| Instance {
                mask: placed,
                ..inst.clone()
            })
        })
        .collect();
    (out, SceneAnnotation { instances })
}

/// Linear warmup from zero, then ×0.1 at 2/3 and again at 8/9 of the run.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_iters {
        return cfg.base_lr * step as f64 / cfg.warmup_iters as f64;
    }
    let t = cfg.iterations as f64;
    let mut lr = cfg.base_lr;
    for milestone in [2.0 * t / 3.0, 8.0 * t / 9.0] {
        if step as f64 >= milestone {
            lr *= 0.1;
        }
    }
    lr
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Adam moments with decoupled weight decay on every parameter of rank ≥ 2.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamW {
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id);
            let wd = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS) + wd * *x;
                *x -= lr * update;
            }
        }
    }
}

/// A training sample: image tensor and its (possibly augmented) annotation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub annotation: SceneAnnotation,
}

/// Forward, per-stage matching and loss for one sample; returns the
/// gradient of every parameter and the loss report.
pub fn sample_gradients(model: &Model, sample: &Sample, cfg: &TrainConfig) -> Result<(Vec<Tensor>, LossReport), TensorError> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let out = model.forward(&mut g, &p, &sample.image)?;
    let ms = g.shape(out.stages[0].mask_logits).to_vec();
    let targets = Targets::new(&sample.annotation, (ms[1], ms[2]), model.config.k_attr);
    let mut assignments = Vec::with_capacity(out.stages.len());
    for s in &out.stages {
        let view = PredictionView {
            class_logits: g.value(s.class_logits),
            mask_logits: g.value(s.mask_logits),
            attr_logits: g.value(s.attr_logits),
        };
        let costs = cost_matrix(view, &targets, CostWeights::default())?;
        assignments.push(hungarian(&costs)?);
    }
    let loss = total_loss(
        &mut g,
        &out.stages,
        &targets,
        &assignments,
        cfg.loss_weights,
        model.config.stages,
    )?;
    if !loss.report.is_finite() {
        return Ok((Vec::new(), loss.report));
    }
    let mut grads = g.backward(loss.total)?;
    let grads = model
        .params
        .ids()
        .map(|id| {
            grads
                .take(p.var(id))
                .unwrap_or_else(|| Tensor::zeros(model.params.get(id).shape()))
        })
        .collect();
    Ok((grads, loss.report))
}

/// One optimisation step over `batch`: gradients and losses are averaged
/// over samples, clipped, and applied with AdamW at rate `lr`.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[Sample],
    lr: f64,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<LossReport, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Setup("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut acc: Option<Vec<Tensor>> = None;
    let mut report = LossReport::default();
    for sample in batch {
        let (grads, r) = sample_gradients(model, sample, cfg)?;
        if !r.is_finite() {
            return Err(TrainError::NonFinite { iteration, report: r });
        }
        accumulate_report(&mut report, &r, scale);
        match &mut acc {
            None => {
                acc = Some(
                    grads
                        .into_iter()
                        .map(|mut t| {
                            t.data_mut().iter_mut().for_each(|v| *v *= scale);
                            t
                        })
                        .collect(),
                )
            }
            Some(acc) => {
                for (a, gr) in acc.iter_mut().zip(&grads) {
                    for (x, &y) in a.data_mut().iter_mut().zip(gr.data()) {
                        *x += scale * y;
                    }
                }
            }
        }
    }
    let mut grads = acc.expect("non-empty batch");
    clip_grad_norm(&mut grads, cfg.grad_clip);
    opt.update(&mut model.params, &grads, lr);
    Ok(report)
}

fn accumulate_report(acc: &mut LossReport, r: &LossReport, scale: f64) {
    let add = |a: &mut Vec<f64>, b: &[f64]| {
        a.resize(b.len(), 0.0);
        for (x, y) in a.iter_mut().zip(b) {
            *x += scale * y;
        }
    };
    acc.total += scale * r.total;
    add(&mut acc.cls, &r.cls);
    add(&mut acc.focal, &r.focal);
    add(&mut acc.dice, &r.dice);
    add(&mut acc.attr, &r.attr);
}

/// Scene indices for iteration `iter`: walks a fresh permutation of the
/// dataset every epoch, each a pure function of `(seed, epoch)`.
pub fn batch_indices(seed: u64, iter: usize, batch_size: usize, n_scenes: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch_size)
        .map(|b| {
            let k = iter * batch_size + b;
            let (epoch, pos) = (k / n_scenes, k % n_scenes);
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n_scenes).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(scene_seed(seed ^ ORDER_STREAM, epoch as u64)));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("permutation").1[pos]
        })
        .collect()
}

/// Batch for iteration `iter`; augmentation draws from a generator seeded
/// by `(seed, iter)` so any iteration can be reproduced in isolation.
pub fn make_batch(dataset: &Dataset, cfg: &TrainConfig, iter: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed ^ AUGMENT_STREAM, iter as u64));
    batch_indices(cfg.seed, iter, cfg.batch_size, dataset.scenes.len())
        .into_iter()
        .map(|i| {
            let scene = &dataset.scenes[i];
            let (image, annotation) = if cfg.lsj {
                lsj_augment(&scene.image, &scene.annotation, (cfg.lsj_min, cfg.lsj_max), &mut rng)
            } else {
                (scene.image.clone(), scene.annotation.clone())
            };
            Sample {
                image: image.to_tensor(),
                annotation,
            }
        })
        .collect()
}

/// Live training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub opt: AdamW,
    /// Completed optimisation steps.
    pub iteration: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self, TrainError> {
        config.validate().map_err(|e| TrainError::Setup(e.to_string()))?;
        let model = Model::new(config.model, config.train.seed)?;
        let opt = AdamW::new(&model.params, config.train.weight_decay);
        Ok(Trainer {
            config,
            model,
            opt,
            iteration: 0,
        })
    }

    /// Restores model, moments and iteration count. The run config stored in
    /// the checkpoint is kept except for `train.iterations` and the data
    /// paths, which come from `config`.
    pub fn resume(config: RunConfig, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let mut merged = ckpt.config.clone();
        merged.train.iterations = config.train.iterations;
        merged.data = config.data;
        let model = ckpt.to_model()?;
        let mut opt = AdamW::new(&model.params, merged.train.weight_decay);
        for (k, (name, t)) in model.params.iter().enumerate() {
            for (slot, prefix) in [(&mut opt.m[k], "opt.m."), (&mut opt.v[k], "opt.v.")] {
                let stored = ckpt.get(&format!("{prefix}{name}")).ok_or_else(|| CheckpointError::Schema {
                    field: format!("{prefix}{name}"),
                    expected: "a stored optimiser moment".into(),
                    found: "nothing".into(),
                })?;
                if stored.shape() != t.shape() {
                    return Err(CheckpointError::Schema {
                        field: format!("{prefix}{name}"),
                        expected: format!("{:?}", t.shape()),
                        found: format!("{:?}", stored.shape()),
                    }
                    .into());
                }
                *slot = stored.clone();
            }
        }
        opt.step = ckpt.iteration as u64;
        Ok(Trainer {
            config: merged,
            model,
            opt,
            iteration: ckpt.iteration,
        })
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<(), TrainError> {
        if dataset.scenes.is_empty() {
            return Err(TrainError::Setup("dataset has no scenes".into()));
        }
        if dataset.image_size != self.config.train.image_size {
            return Err(TrainError::Setup(format!(
                "dataset image size {} differs from train.image_size {}",
                dataset.image_size, self.config.train.image_size
            )));
        }
        Ok(())
    }

    pub fn step(&mut self, dataset: &Dataset) -> Result<LogEntry, TrainError> {
        let cfg = &self.config.train;
        let lr = lr_schedule(self.iteration, cfg);
        let batch = make_batch(dataset, cfg, self.iteration);
        let r = train_step(&mut self.model, &mut self.opt, &batch, lr, cfg, self.iteration)?;
        let entry = LogEntry {
            iter: self.iteration,
            total: r.total,
            cls: r.cls,
            focal: r.focal,
            dice: r.dice,
            attr: r.attr,
            lr,
        };
        self.iteration += 1;
        Ok(entry)
    }

    /// Rounds the live parameters and moments to `f32` and snapshots them,
    /// so that resuming from the snapshot continues the identical run.
    pub fn checkpoint(&mut self) -> Checkpoint {
        let mut tensors = Vec::with_capacity(3 * self.model.params.len());
        let ids: Vec<_> = self.model.params.ids().collect();
        for id in &ids {
            round_f32(self.model.params.get_mut(*id));
        }
        for t in self.opt.m.iter_mut().chain(self.opt.v.iter_mut()) {
            round_f32(t);
        }
        for (name, t) in self.model.params.iter() {
            tensors.push((name.to_string(), t.clone()));
        }
        for (k, id) in ids.iter().enumerate() {
            let name = self.model.params.name(*id);
            tensors.push((format!("opt.m.{name}"), self.opt.m[k].clone()));
            tensors.push((format!("opt.v.{name}"), self.opt.v[k].clone()));
        }
        Checkpoint::new(self.config.clone(), self.iteration, tensors)
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.lqsg";

pub fn checkpoint_path(out_dir: &Path, iteration: usize) -> PathBuf {
    out_dir.join(format!("checkpoint_{iteration:06}.lqsg"))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub final_checkpoint: PathBuf,
    pub log: Vec<LogEntry>,
}

/// Runs from the trainer's current iteration to `train.iterations`,
/// writing the log and checkpoints under `data.out_dir`. `progress` sees
/// every log entry.
pub fn run_training(
    mut trainer: Trainer,
    dataset: &Dataset,
    progress: &mut dyn FnMut(&LogEntry),
) -> Result<TrainOutcome, TrainError> {
    trainer.check_dataset(dataset)?;
    let out_dir = trainer.config.data.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(io(format!("cannot create {}", out_dir.display())))?;
    let probe = out_dir.join(".write_probe");
    File::create(&probe)
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(io(format!("checkpoint directory {} is not writable", out_dir.display())))?;

    let log_path = out_dir.join(LOG_FILE);
    let kept = if trainer.iteration > 0 && log_path.exists() {
        read_log(&log_path)?
            .into_iter()
            .filter(|e| e.iter < trainer.iteration)
            .collect()
    } else {
        Vec::new()
    };
    let mut writer = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&log_path)
            .map_err(io(format!("cannot open {}", log_path.display())))?,
    );
    let write_line = |w: &mut BufWriter<File>, e: &LogEntry| -> Result<(), TrainError> {
        let line = serde_json::to_string(e).expect("log entry serialises");
        writeln!(w, "{line}").map_err(io("cannot write training log"))
    };
    for e in &kept {
        write_line(&mut writer, e)?;
    }

    let total = trainer.config.train.iterations;
    let every = trainer.config.train.checkpoint_every;
    let mut log = Vec::with_capacity(total.saturating_sub(trainer.iteration));
    while trainer.iteration < total {
        let entry = trainer.step(dataset)?;
        write_line(&mut writer, &entry)?;
        progress(&entry);
        log.push(entry);
        if trainer.iteration % every == 0 && trainer.iteration < total {
            writer.flush().map_err(io("cannot write training log"))?;
            trainer.checkpoint().save(&checkpoint_path(&out_dir, trainer.iteration))?;
        }
    }
    writer.flush().map_err(io("cannot write training log"))?;
    let ckpt = trainer.checkpoint();
    ckpt.save(&checkpoint_path(&out_dir, trainer.iteration))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    ckpt.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        trainer,
        final_checkpoint,
        log,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>, TrainError> {
    let file = File::open(path).map_err(io(format!("cannot open {}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io("cannot read training log"))?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line)
            .map_err(|e| TrainError::Setup(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
#[path = "trainer_tests.rs"]
mod tests;
