//! Bipartite matching of predictions to ground-truth instances.

use crate::losses::{bce_elem, focal_elem, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::synthdata::{Mask, SceneAnnotation};
use crate::tensor::{Result, Tensor, TensorError};

/// Relative slack under which two assignment totals count as tied.
const TIE_TOLERANCE: f64 = 1e-9;

/// Ground truth laid out for matching and loss computation.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub class_ids: Vec<usize>,
    /// `N_gt×K_attr` multi-hot.
    pub attributes: Tensor,
    /// `N_gt×H×W` at image resolution; `None` for a scene without instances.
    pub masks: Option<Tensor>,
    /// `N_gt×h×w` nearest-resized to the mask-logit resolution.
    pub masks_low: Option<Tensor>,
}

impl Targets {
    pub fn new(ann: &SceneAnnotation, low_hw: (usize, usize), k_attr: usize) -> Self {
        let n = ann.instances.len();
        let stack = |masks: Vec<Mask>| -> Option<Tensor> {
            let first = masks.first()?;
            let (h, w) = (first.height, first.width);
            let data = masks
                .iter()
                .flat_map(|m| m.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }))
                .collect();
            Some(Tensor::new(&[masks.len(), h, w], data).expect("mask stack"))
        };
        let full: Vec<Mask> = ann.instances.iter().map(|i| i.mask.clone()).collect();
        let low: Vec<Mask> = ann
            .instances
            .iter()
            .map(|i| i.mask.resize_nearest(low_hw.0, low_hw.1))
            .collect();
        let attributes = if n == 0 {
            Tensor::zeros(&[1, k_attr])
        } else {
            Tensor::from_fn(&[n, k_attr], |i| ann.instances[i / k_attr].attributes[i % k_attr] as f64)
        };
        Targets {
            class_ids: ann.instances.iter().map(|i| i.class_id).collect(),
            attributes,
            masks: stack(full),
            masks_low: stack(low),
        }
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// Plain-value view of one stage's predictions.
#[derive(Debug, Clone, Copy)]
pub struct PredictionView<'a> {
    /// `N_q×(K_cls+1)`, last column is "no object".
    pub class_logits: &'a Tensor,
    /// `N_q×h×w`.
    pub mask_logits: &'a Tensor,
    /// `N_q×K_attr`.
    pub attr_logits: &'a Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub cls: f64,
    pub mask: f64,
    pub attr: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            cls: 1.0,
            mask: 1.0,
            attr: 1.0,
        }
    }
}

/// `N_q×N_gt` costs, row-major by query, with the per-term breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub n_q: usize,
    pub n_gt: usize,
    pub values: Vec<f64>,
    pub cls: Vec<f64>,
    pub mask: Vec<f64>,
    pub attr: Vec<f64>,
}

impl CostMatrix {
    /// A matrix without breakdown, for direct use with [`hungarian`].
    pub fn from_values(n_q: usize, n_gt: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_q * n_gt {
            return Err(TensorError::dim("CostMatrix", &[n_q, n_gt], &[values.len()]));
        }
        let zeros = vec![0.0; values.len()];
        Ok(CostMatrix {
            n_q,
            n_gt,
            values,
            cls: zeros.clone(),
            mask: zeros.clone(),
            attr: zeros,
        })
    }

    pub fn get(&self, q: usize, g: usize) -> f64 {
        self.values[q * self.n_gt + g]
    }
}

/// Matched `(query, gt)` pairs sorted by gt index. Queries not listed are
/// assigned "no object".
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn total(&self, costs: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, g)| costs.get(q, g)).sum()
    }

    /// Gt index per query, or `None` for unmatched queries.
    pub fn query_targets(&self, n_q: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_q];
        for &(q, g) in &self.pairs {
            out[q] = Some(g);
        }
        out
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn cost_matrix(pred: PredictionView<'_>, gt: &Targets, w: CostWeights) -> Result<CostMatrix> {
    let cs = pred.class_logits.shape();
    let ms = pred.mask_logits.shape();
    let n_q = cs[0];
    let n_gt = gt.len();
    if ms[0] != n_q || pred.attr_logits.shape()[0] != n_q {
        return Err(TensorError::dim("cost_matrix", cs, ms));
    }
    let mut out = CostMatrix::from_values(n_q, n_gt, vec![0.0; n_q * n_gt])?;
    let Some(low) = &gt.masks_low else {
        return Ok(out);
    };
    if low.shape()[1..] != ms[1..] {
        return Err(TensorError::dim("cost_matrix", low.shape(), ms));
    }
    let k1 = cs[1];
    let k_attr = pred.attr_logits.shape()[1];
    if gt.attributes.shape()[1] != k_attr {
        return Err(TensorError::dim("cost_matrix", gt.attributes.shape(), pred.attr_logits.shape()));
    }
    let px = ms[1] * ms[2];
    let gt_masks = low.data();
    let gt_area: Vec<f64> = gt_masks.chunks(px).map(|m| m.iter().sum()).collect();
    for q in 0..n_q {
        let probs = softmax_row(&pred.class_logits.data()[q * k1..(q + 1) * k1]);
        let logits = &pred.mask_logits.data()[q * px..(q + 1) * px];
        let sig: Vec<f64> = logits.iter().map(|&x| crate::tensor::sigmoid(x)).collect();
        let neg: Vec<f64> = logits.iter().map(|&x| focal_elem(x, 0.0, FOCAL_ALPHA, FOCAL_GAMMA)).collect();
        let pos: Vec<f64> = logits.iter().map(|&x| focal_elem(x, 1.0, FOCAL_ALPHA, FOCAL_GAMMA)).collect();
        let neg_sum: f64 = neg.iter().sum();
        let sig_sum: f64 = sig.iter().sum();
        let attr = &pred.attr_logits.data()[q * k_attr..(q + 1) * k_attr];
        for g in 0..n_gt {
            let m = &gt_masks[g * px..(g + 1) * px];
            let (mut focal, mut inter) = (neg_sum, 0.0);
            for p in 0..px {
                if m[p] > 0.5 {
                    focal += pos[p] - neg[p];
                    inter += sig[p];
                }
            }
            let focal = focal / px as f64;
            let dice = 1.0 - (2.0 * inter + 1.0) / (sig_sum + gt_area[g] + 1.0);
            let targets = &gt.attributes.data()[g * k_attr..(g + 1) * k_attr];
            let bce = attr.iter().zip(targets).map(|(&x, &t)| bce_elem(x, t)).sum::<f64>() / k_attr as f64;
            let i = q * n_gt + g;
            out.cls[i] = -probs[gt.class_ids[g]];
            out.mask[i] = focal + dice;
            out.attr[i] = bce;
            out.values[i] = w.cls * out.cls[i] + w.mask * out.mask[i] + w.attr * out.attr[i];
        }
    }
    if out.values.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::contract("cost_matrix", "non-finite cost"));
    }
    Ok(out)
}

/// Minimum total cost of assigning every row to a distinct column of an
/// `rows×cols` matrix (`rows ≤ cols`), with the row-to-column assignment.
/// Shortest augmenting paths with potentials, `O(rows²·cols)`.
fn solve(cost: &dyn Fn(usize, usize) -> f64, rows: usize, cols: usize) -> (f64, Vec<usize>) {
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    // owner[j] = row (1-based) currently assigned to column j (1-based); 0 = free
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = NONE;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    let total = (0..rows).map(|r| cost(r, assign[r])).sum();
    (total, assign)
}

/// Minimum-cost assignment of every gt column to a distinct query row.
///
/// Among optimal assignments the one whose query indices, listed in gt
/// order, are lexicographically smallest is returned. Totals within a
/// relative `1e-9` of the optimum count as optimal.
pub fn hungarian(costs: &CostMatrix) -> Result<Assignment> {
    let (n_q, n_gt) = (costs.n_q, costs.n_gt);
    if n_gt > n_q {
        return Err(TensorError::contract(
            "hungarian",
            format!("{n_gt} ground-truth instances exceed {n_q} queries"),
        ));
    }
    if costs.values.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::contract("hungarian", "non-finite cost"));
    }
    if n_gt == 0 {
        return Ok(Assignment::default());
    }
    // rows are gt instances, columns are queries
    let at = |g: usize, q: usize| costs.get(q, g);
    let (optimum, _) = solve(&at, n_gt, n_q);
    let scale = costs.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = TIE_TOLERANCE * (1.0 + scale * n_gt as f64);

    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(n_gt);
    let mut used_q = vec![false; n_q];
    let mut spent = 0.0;
    for g in 0..n_gt {
        let mut chosen = None;
        for q in (0..n_q).filter(|&q| !used_q[q]) {
            let rest_rows: Vec<usize> = (g + 1..n_gt).collect();
            let rest_cols: Vec<usize> = (0..n_q).filter(|&c| !used_q[c] && c != q).collect();
            let rest = if rest_rows.is_empty() {
                0.0
            } else {
                let sub = |r: usize, c: usize| at(rest_rows[r], rest_cols[c]);
                solve(&sub, rest_rows.len(), rest_cols.len()).0
            };
            if spent + at(g, q) + rest <= optimum + tol {
                chosen = Some(q);
                break;
            }
        }
        let q = chosen.expect("some query completes an optimal assignment");
        used_q[q] = true;
        spent += at(g, q);
        fixed.push((q, g));
    }
    Ok(Assignment { pairs: fixed })
}
