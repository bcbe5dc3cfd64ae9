//! Focal, dice and attribute losses and their deep-supervision total.

use serde::{Deserialize, Serialize};

use crate::decoder::StagePrediction;
use crate::matching::{Assignment, Targets};
use crate::tensor::{sigmoid, softplus, Graph, Result, Tensor, TensorError, Var};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;
pub const DICE_SMOOTH: f64 = 1.0;

/// Focal loss of a single logit against a binary target.
pub fn focal_elem(logit: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    let (pt, miss, at) = if target > 0.5 {
        (sigmoid(logit), sigmoid(-logit), alpha)
    } else {
        (sigmoid(-logit), sigmoid(logit), 1.0 - alpha)
    };
    -at * miss.powf(gamma) * pt.max(LOG_FLOOR).ln()
}

/// Binary cross-entropy of a single logit, `softplus(x) − t·x`.
pub fn bce_elem(logit: f64, target: f64) -> f64 {
    softplus(logit) - target * logit
}

fn check_binary(op: &'static str, targets: &Tensor) -> Result<()> {
    match targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        Some(t) => Err(TensorError::contract(op, format!("target {t} is not in {{0, 1}}"))),
        None => Ok(()),
    }
}

fn check_shapes(g: &Graph, op: &'static str, logits: Var, targets: &Tensor) -> Result<()> {
    if g.shape(logits) != targets.shape() {
        return Err(TensorError::dim(op, g.shape(logits), targets.shape()));
    }
    check_binary(op, targets)
}

/// Elementwise focal terms; the caller reduces.
fn focal_terms(g: &mut Graph, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    check_shapes(g, "focal_loss", logits, targets)?;
    let sign = g.constant(targets.map(|t| 2.0 * t - 1.0));
    let neg_alpha = g.constant(targets.map(|t| if t == 1.0 { -alpha } else { alpha - 1.0 }));
    let s = g.mul(logits, sign)?;
    let pt = g.sigmoid(s);
    let log_pt = g.log_clamped(pt, LOG_FLOOR);
    let weighted = if gamma == 0.0 {
        log_pt
    } else {
        let flipped = g.scale(s, -1.0);
        let miss = g.sigmoid(flipped);
        let modulation = g.powf(miss, gamma);
        g.mul(modulation, log_pt)?
    };
    g.mul(weighted, neg_alpha)
}

/// Mean over elements of `−α_t (1 − p_t)^γ ln p_t`.
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    let terms = focal_terms(g, logits, targets, alpha, gamma)?;
    Ok(g.mean(terms))
}

/// Smoothed dice loss averaged over the leading axis; each row is one mask.
pub fn dice_loss(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    check_shapes(g, "dice_loss", logits, targets)?;
    let n = targets.shape()[0];
    let per = targets.numel() / n;
    let flat = g.reshape(logits, &[n, per])?;
    let p = g.sigmoid(flat);
    let t = g.constant(targets.clone().reshape(&[n, per])?);
    let pt = g.mul(p, t)?;
    let inter = g.sum_last_axis(pt);
    let num = g.affine(inter, 2.0, DICE_SMOOTH);
    let p_sum = g.sum_last_axis(p);
    let t_sum: Vec<f64> = targets.data().chunks(per).map(|c| c.iter().sum::<f64>() + DICE_SMOOTH).collect();
    let t_sum = g.constant(Tensor::new(&[n], t_sum)?);
    let den = g.add(p_sum, t_sum)?;
    let ratio = g.div(num, den)?;
    let m = g.mean(ratio);
    Ok(g.affine(m, -1.0, 1.0))
}

/// Mean binary cross-entropy over all cells.
pub fn attribute_loss(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    check_shapes(g, "attribute_loss", logits, targets)?;
    let sp = g.softplus(logits);
    let t = g.constant(targets.clone());
    let tx = g.mul(t, logits)?;
    let cells = g.sub(sp, tx)?;
    Ok(g.mean(cells))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub mask: f64,
    pub attr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            mask: 1.0,
            attr: 1.0,
        }
    }
}

/// Per-stage loss components and the weighted total.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub cls: Vec<f64>,
    pub focal: Vec<f64>,
    pub dice: Vec<f64>,
    pub attr: Vec<f64>,
}

impl LossReport {
    /// Recomputes the total from the components in the order the graph uses.
    pub fn recompose(&self, w: LossWeights) -> f64 {
        let mut total = 0.0;
        for j in 0..self.cls.len() {
            let stage = w.cls * self.cls[j] + w.mask * (self.focal[j] + self.dice[j]) + w.attr * self.attr[j];
            total += stage;
        }
        total
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && [&self.cls, &self.focal, &self.dice, &self.attr]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Graph handles of the loss and its components.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: Var,
    pub report: LossReport,
}

/// Class one-hot: matched queries get their gt class, the rest "no object".
fn class_targets(n_q: usize, k1: usize, gt: &Targets, a: &Assignment) -> Tensor {
    let mut t = Tensor::zeros(&[n_q, k1]);
    for (q, m) in a.query_targets(n_q).into_iter().enumerate() {
        let c = m.map_or(k1 - 1, |g| gt.class_ids[g]);
        t.set(&[q, c], 1.0);
    }
    t
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Deep-supervision total over all stages.
///
/// Class focal terms are summed over every query and class and divided by
/// the number of instances. Mask logits of matched queries are upsampled
/// to the gt resolution for the focal (mean over pixels) and dice (mean
/// over instances) terms. Attribute BCE averages over matched cells.
pub fn total_loss(
    g: &mut Graph,
    stages: &[StagePrediction],
    gt: &Targets,
    assignments: &[Assignment],
    weights: LossWeights,
    expected_stages: usize,
) -> Result<LossGraph> {
    if !matches!(expected_stages, 1 | 3) || stages.len() != expected_stages {
        return Err(TensorError::contract(
            "total_loss",
            format!("got {} stages, configured for {expected_stages} (1 or 3)", stages.len()),
        ));
    }
    if assignments.len() != stages.len() {
        return Err(TensorError::contract("total_loss", "one assignment per stage is required"));
    }
    let n_gt = gt.len();
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    for (stage, a) in stages.iter().zip(assignments) {
        if a.pairs.len() != n_gt {
            return Err(TensorError::contract("total_loss", "assignment does not cover every instance"));
        }
        let cs = g.shape(stage.class_logits).to_vec();
        let cls_t = class_targets(cs[0], cs[1], gt, a);
        let terms = focal_terms(g, stage.class_logits, &cls_t, FOCAL_ALPHA, FOCAL_GAMMA)?;
        let cls_sum = g.sum(terms);
        let cls = g.scale(cls_sum, 1.0 / n_gt.max(1) as f64);

        let (focal, dice, attr) = match &gt.masks {
            Some(masks) if n_gt > 0 => {
                let queries: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
                let m = g.select_rows(stage.mask_logits, &queries)?;
                let (h, w) = (masks.shape()[1], masks.shape()[2]);
                let ms = g.shape(m).to_vec();
                let m = if ms[1] == h && ms[2] == w {
                    m
                } else {
                    g.resize_bilinear(m, h, w)?
                };
                let focal = focal_loss(g, m, masks, FOCAL_ALPHA, FOCAL_GAMMA)?;
                let dice = dice_loss(g, m, masks)?;
                let at = g.select_rows(stage.attr_logits, &queries)?;
                let attr = attribute_loss(g, at, &gt.attributes)?;
                (focal, dice, attr)
            }
            _ => (zero(g), zero(g), zero(g)),
        };

        let wc = g.scale(cls, weights.cls);
        let fd = g.add(focal, dice)?;
        let wm = g.scale(fd, weights.mask);
        let wa = g.scale(attr, weights.attr);
        let s = g.add(wc, wm)?;
        let s = g.add(s, wa)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
        report.cls.push(g.value(cls).item());
        report.focal.push(g.value(focal).item());
        report.dice.push(g.value(dice).item());
        report.attr.push(g.value(attr).item());
    }
    let total = total.expect("at least one stage");
    report.total = g.value(total).item();
    Ok(LossGraph { total, report })
}

#[cfg(test)]
#[path = "losses_tests.rs"]
mod tests;
