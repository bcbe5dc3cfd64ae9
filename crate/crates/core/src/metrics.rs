//! COCO-style mask AP and the joint mask-IoU + attribute-F1 AP.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::synthdata::{Instance, Mask, SceneAnnotation};
use crate::tensor::{Graph, Result, Tensor, TensorError};

/// Number of recall samples in the interpolated PR curve.
pub const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub mask: Mask,
    /// Sorted attribute indices predicted present.
    pub attributes: Vec<usize>,
}

pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(TensorError::dim("mask_iou", &[a.height, a.width], &[b.height, b.width]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// F1 of two attribute sets; both empty counts as perfect agreement.
pub fn attribute_f1(pred: &[usize], gt: &[usize]) -> f64 {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let tp = pred.iter().filter(|a| gt.contains(a)).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / pred.len() as f64;
    let recall = tp / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Copy)]
pub struct ImageResult<'a> {
    pub detections: &'a [Detection],
    pub gt: &'a SceneAnnotation,
}

/// Decides whether a detection may match a gt instance at threshold `t`.
pub trait TpPredicate: Sync {
    fn accepts(&self, det: &Detection, gt: &Instance, iou: f64, t: f64) -> bool;
}

pub struct IouPredicate;

impl TpPredicate for IouPredicate {
    fn accepts(&self, _: &Detection, _: &Instance, iou: f64, t: f64) -> bool {
        iou >= t
    }
}

/// Mask IoU and attribute F1 must both clear the threshold; with a fixed
/// F1 threshold only IoU follows the sweep.
pub struct IouF1Predicate {
    pub fixed_f1: Option<f64>,
}

impl TpPredicate for IouF1Predicate {
    fn accepts(&self, det: &Detection, gt: &Instance, iou: f64, t: f64) -> bool {
        iou >= t && attribute_f1(&det.attributes, &gt.attribute_set()) >= self.fixed_f1.unwrap_or(t)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ApResult {
    /// Mean over thresholds and classes present in the ground truth.
    pub mean: f64,
    pub per_class: BTreeMap<usize, f64>,
    /// Interpolated precision at each recall sample for the first threshold,
    /// averaged over classes.
    pub pr_curve: Vec<f64>,
}

/// Per-detection TP flags at one threshold: greedy in descending score,
/// each detection takes the unmatched same-class gt of highest IoU among
/// those the predicate accepts.
fn match_image(img: &ImageResult<'_>, ious: &[Vec<f64>], pred: &dyn TpPredicate, t: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..img.detections.len()).collect();
    order.sort_by(|&a, &b| img.detections[b].score.total_cmp(&img.detections[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; img.gt.instances.len()];
    let mut tp = vec![false; img.detections.len()];
    for d in order {
        let det = &img.detections[d];
        let mut best: Option<(usize, f64)> = None;
        for (gi, inst) in img.gt.instances.iter().enumerate() {
            if taken[gi] || inst.class_id != det.class_id {
                continue;
            }
            let iou = ious[d][gi];
            if pred.accepts(det, inst, iou, t) && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            tp[d] = true;
        }
    }
    tp
}

/// 101-point interpolated precision samples from score-ordered TP flags.
fn interpolated_precision(flags: &[bool], n_gt: usize) -> Vec<f64> {
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&x| x < r - 1e-12);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect()
}

pub fn average_precision(images: &[ImageResult<'_>], pred: &dyn TpPredicate, thresholds: &[f64]) -> Result<ApResult> {
    let mut ious: Vec<Vec<Vec<f64>>> = Vec::with_capacity(images.len());
    for img in images {
        let mut per_det = Vec::with_capacity(img.detections.len());
        for det in img.detections {
            let row = img
                .gt
                .instances
                .iter()
                .map(|inst| mask_iou(&det.mask, &inst.mask))
                .collect::<Result<Vec<f64>>>()?;
            per_det.push(row);
        }
        ious.push(per_det);
    }
    let mut n_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for img in images {
        for inst in &img.gt.instances {
            *n_gt.entry(inst.class_id).or_default() += 1;
        }
    }
    if n_gt.is_empty() {
        return Ok(ApResult {
            pr_curve: vec![0.0; RECALL_POINTS],
            ..ApResult::default()
        });
    }
    let mut sums: BTreeMap<usize, f64> = n_gt.keys().map(|&c| (c, 0.0)).collect();
    let mut pr_curve = vec![0.0; RECALL_POINTS];
    for (ti, &t) in thresholds.iter().enumerate() {
        // (score, image, detection, tp) for every detection of a gt class
        let mut all: BTreeMap<usize, Vec<(f64, usize, usize, bool)>> = BTreeMap::new();
        for (ii, img) in images.iter().enumerate() {
            let tp = match_image(img, &ious[ii], pred, t);
            for (di, det) in img.detections.iter().enumerate() {
                if n_gt.contains_key(&det.class_id) {
                    all.entry(det.class_id).or_default().push((det.score, ii, di, tp[di]));
                }
            }
        }
        for (&class, &count) in &n_gt {
            let mut dets = all.remove(&class).unwrap_or_default();
            dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let flags: Vec<bool> = dets.iter().map(|d| d.3).collect();
            let samples = interpolated_precision(&flags, count);
            *sums.get_mut(&class).expect("class present") += samples.iter().sum::<f64>();
            if ti == 0 {
                for (acc, s) in pr_curve.iter_mut().zip(&samples) {
                    *acc += s / n_gt.len() as f64;
                }
            }
        }
    }
    let per_class: BTreeMap<usize, f64> = sums
        .into_iter()
        .map(|(c, s)| (c, s / (RECALL_POINTS * thresholds.len().max(1)) as f64))
        .collect();
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(ApResult {
        mean,
        per_class,
        pr_curve,
    })
}

pub fn ap_iou(images: &[ImageResult<'_>]) -> Result<ApResult> {
    average_precision(images, &IouPredicate, &coco_thresholds())
}

pub fn ap_iou_f1(images: &[ImageResult<'_>], fixed_f1: Option<f64>) -> Result<ApResult> {
    average_precision(images, &IouF1Predicate { fixed_f1 }, &coco_thresholds())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap_iou: f64,
    pub ap_iou_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_iou: f64,
    pub ap_iou_f1: f64,
    pub per_class: BTreeMap<String, ClassAp>,
    pub thresholds: Vec<f64>,
    pub n_images: usize,
    /// Interpolated precision at recall `k/100`, IoU threshold 0.5.
    pub pr_curve: Vec<f64>,
}

pub fn evaluate(images: &[ImageResult<'_>], fixed_f1: Option<f64>) -> Result<EvalReport> {
    let iou = ap_iou(images)?;
    let joint = ap_iou_f1(images, fixed_f1)?;
    let per_class = iou
        .per_class
        .iter()
        .map(|(&c, &a)| {
            (
                c.to_string(),
                ClassAp {
                    ap_iou: a,
                    ap_iou_f1: joint.per_class[&c],
                },
            )
        })
        .collect();
    Ok(EvalReport {
        ap_iou: iou.mean,
        ap_iou_f1: joint.mean,
        per_class,
        thresholds: coco_thresholds(),
        n_images: images.len(),
        pr_curve: iou.pr_curve,
    })
}

/// Turns one stage's raw outputs into detections at `image_hw`.
///
/// Queries whose most likely class is "no object" (the last column) are
/// dropped. The score is the largest foreground probability; masks are the
/// logits bilinearly resized to the image and thresholded at zero.
pub fn detections_from_logits(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    attr_logits: &Tensor,
    image_hw: (usize, usize),
) -> Result<Vec<Detection>> {
    let (n_q, k1) = (class_logits.shape()[0], class_logits.shape()[1]);
    let k_attr = attr_logits.shape()[1];
    let mut g = Graph::new();
    let m = g.constant(mask_logits.clone());
    let resized = g.resize_bilinear(m, image_hw.0, image_hw.1)?;
    let masks = g.value(resized);
    let px = image_hw.0 * image_hw.1;
    let mut out = Vec::new();
    for q in 0..n_q {
        let row = &class_logits.data()[q * k1..(q + 1) * k1];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let (best, _) = e
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if best == k1 - 1 {
            continue;
        }
        let bits = masks.data()[q * px..(q + 1) * px].iter().map(|&v| v > 0.0).collect();
        let attributes = attr_logits.data()[q * k_attr..(q + 1) * k_attr]
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, _)| i)
            .collect();
        out.push(Detection {
            class_id: best,
            score: e[best] / z,
            mask: Mask {
                height: image_hw.0,
                width: image_hw.1,
                bits,
            },
            attributes,
        });
    }
    Ok(out)
}

#[cfg(test)]
#[path = "metrics_tests.rs"]
mod tests;
