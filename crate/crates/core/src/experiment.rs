//! Evaluation of a trained model and the desk-scale experiment drivers.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::metrics::{evaluate, Detection, EvalReport, ImageResult};
use crate::model::Model;
use crate::synthdata::{generate_dataset, Dataset, DatasetSpec, SynthError};
use crate::tensor::{Result, TensorError};
use crate::trainer::{TrainError, Trainer};

/// Runs inference on every scene in parallel and scores the detections.
/// Results are collected in scene order, so the report does not depend on
/// the thread count.
pub fn evaluate_model(model: &Model, dataset: &Dataset, fixed_f1: Option<f64>) -> Result<EvalReport> {
    if dataset.scenes.is_empty() {
        return Err(TensorError::contract("evaluate_model", "dataset has no scenes"));
    }
    let detections: Vec<Vec<Detection>> = dataset
        .scenes
        .par_iter()
        .map(|s| model.predict(&s.image.to_tensor()))
        .collect::<Result<_>>()?;
    let images: Vec<ImageResult<'_>> = detections
        .iter()
        .zip(&dataset.scenes)
        .map(|(d, s)| ImageResult {
            detections: d,
            gt: &s.annotation,
        })
        .collect();
    evaluate(&images, fixed_f1)
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Trains in memory (no files) for `config.train.iterations` steps.
pub fn train_in_memory(
    config: RunConfig,
    dataset: &Dataset,
    progress: &mut dyn FnMut(usize, f64),
) -> std::result::Result<Trainer, TrainError> {
    let mut trainer = Trainer::new(config)?;
    trainer.check_dataset(dataset)?;
    while trainer.iteration < trainer.config.train.iterations {
        let e = trainer.step(dataset)?;
        progress(e.iter, e.total);
    }
    Ok(trainer)
}

#[derive(Debug, Clone)]
pub struct OverfitResult {
    pub report: EvalReport,
    pub final_loss: f64,
    pub trainer: Trainer,
    pub dataset: Dataset,
}

/// Fits a model to `scenes` synthetic scenes and evaluates on the same scenes.
pub fn overfit(
    config: RunConfig,
    spec: DatasetSpec,
    progress: &mut dyn FnMut(usize, f64),
) -> std::result::Result<OverfitResult, ExperimentError> {
    let dataset = generate_dataset(&spec)?;
    let mut last = f64::NAN;
    let trainer = train_in_memory(config, &dataset, &mut |i, l| {
        last = l;
        progress(i, l)
    })?;
    let report = evaluate_model(&trainer.model, &dataset, trainer.config.eval.f1_threshold)?;
    Ok(OverfitResult {
        report,
        final_loss: last,
        trainer,
        dataset,
    })
}

/// Held-out comparison of the 3-stage model against the 1-stage ablation.
#[derive(Debug, Clone)]
pub struct AblationResult {
    /// `(seed, 3-stage ap_iou, 1-stage ap_iou)` per seed.
    pub runs: Vec<(u64, f64, f64)>,
}

impl AblationResult {
    pub fn mean_improvement(&self) -> f64 {
        self.runs.iter().map(|(_, a, b)| a - b).sum::<f64>() / self.runs.len() as f64
    }
}

/// For each seed, trains both variants on `train` and scores them on `test`.
pub fn stage_ablation(
    base: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    seeds: &[u64],
    progress: &mut dyn FnMut(&str),
) -> std::result::Result<AblationResult, ExperimentError> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut scores = [0.0; 2];
        for (k, stages) in [3usize, 1].into_iter().enumerate() {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            cfg.model.stages = stages;
            let trainer = train_in_memory(cfg, train, &mut |_, _| {})?;
            scores[k] = evaluate_model(&trainer.model, test, None)?.ap_iou;
            progress(&format!("seed {seed} stages {stages}: ap_iou {:.4}", scores[k]));
        }
        runs.push((seed, scores[0], scores[1]));
    }
    Ok(AblationResult { runs })
}
