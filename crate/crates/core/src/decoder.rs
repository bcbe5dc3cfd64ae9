//! Cascaded mask decoder with the multi-level attribute stream.
//!
//! Each stage runs two chained attention passes. Internal attention reads
//! tokens pooled under the stage's initial mask and yields the external
//! queries; external attention reads tokens pooled under the internal mask
//! and yields the stage's final queries and mask. Attribute features pool
//! every pyramid level under the previous stage's mask.

use rand::Rng;

use crate::nn::{xavier_uniform, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Graph, Result, TensorError, Var};

/// Initial sigmoid probability of every class logit.
pub const CLASS_PRIOR: f64 = 0.01;

/// Added to the pooling denominator in [`mask_to_tokens`].
pub const TOKEN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub d: usize,
    pub k_cls: usize,
    pub k_attr: usize,
    /// 3 for the full cascade, 1 for the ablation.
    pub stages: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln_attn: LayerNorm,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let mut proj = |suffix: &str| store.add(format!("{name}.{suffix}"), xavier_uniform(&[d, d], d, d, rng));
        let w_q = proj("w_q");
        let w_k = proj("w_k");
        let w_v = proj("w_v");
        let w_o = proj("w_o");
        AttentionParams {
            w_q,
            w_k,
            w_v,
            w_o,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, 4 * d, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), 4 * d, d, rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StageParams {
    pub internal: AttentionParams,
    pub external: AttentionParams,
    pub cls_head: Linear,
    pub attr_head: Linear,
}

/// Outputs of one cascade stage. Masks are logits at the fused-map resolution.
#[derive(Debug, Clone, Copy)]
pub struct StagePrediction {
    pub mask_logits: Var,
    pub internal_mask_logits: Var,
    pub class_logits: Var,
    pub attr_logits: Var,
    pub queries_in: Var,
    pub queries_out: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub queries: Var,
    pub mask_logits: Var,
    /// Row-stochastic `N_q×N_q` attention matrix.
    pub weights: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayeredOutput {
    pub initial_mask_logits: Var,
    pub internal: AttentionOutput,
    pub external: AttentionOutput,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub stages: Vec<StageParams>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, config: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.stages == 0 {
            return Err(TensorError::contract("Decoder::new", "need at least one stage"));
        }
        let d = config.d;
        let stages = (1..=config.stages)
            .map(|j| {
                let name = format!("decoder.stage{j}");
                let internal = AttentionParams::new(store, &format!("{name}.internal"), d, rng);
                let external = AttentionParams::new(store, &format!("{name}.external"), d, rng);
                let cls_head = Linear::new(store, &format!("{name}.cls_head"), d, config.k_cls + 1, rng);
                let attr_head = Linear::new(store, &format!("{name}.attr_head"), d, config.k_attr, rng);
                // Attribute features are unnormalised sums over pixels; start the
                // head small so initial logits stay near zero.
                let w = store.get_mut(attr_head.weight);
                *w = w.map(|v| v * ATTR_HEAD_INIT_SCALE);
                // Focal-loss prior: every class starts at probability CLASS_PRIOR.
                let b = store.get_mut(cls_head.bias);
                *b = b.map(|_| -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln());
                StageParams {
                    internal,
                    external,
                    cls_head,
                    attr_head,
                }
            })
            .collect();
        Ok(Decoder { config, stages })
    }

    /// Runs every stage. Stage `j` consumes the queries of stage `j − 1`
    /// and pools attributes under its final mask; stage 1 starts from the
    /// encoder queries and the initial mask.
    pub fn run(&self, g: &mut Graph, p: &Bound, queries: Var, fused: Var, levels: &[Var]) -> Result<Vec<StagePrediction>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut q = queries;
        let mut prev_mask: Option<Var> = None;
        for (idx, stage) in self.stages.iter().enumerate() {
            let layered = multi_layered_attention(g, p, stage, q, fused)?;
            let p_prev = prev_mask.unwrap_or(layered.initial_mask_logits);
            let q_fin = layered.external.queries;
            let attr_feat = mlr_attribute_features(g, p_prev, levels, q_fin, idx + 1)?;
            let (class_logits, attr_logits) = predict_heads(g, p, stage, q_fin, attr_feat)?;
            out.push(StagePrediction {
                mask_logits: layered.external.mask_logits,
                internal_mask_logits: layered.internal.mask_logits,
                class_logits,
                attr_logits,
                queries_in: q,
                queries_out: q_fin,
            });
            q = q_fin;
            prev_mask = Some(layered.external.mask_logits);
        }
        Ok(out)
    }
}

const ATTR_HEAD_INIT_SCALE: f64 = 0.01;

fn flatten_map(g: &mut Graph, map: Var) -> Result<(Var, usize, usize)> {
    let s = g.shape(map).to_vec();
    let [c, h, w] = s[..] else {
        return Err(TensorError::contract("flatten_map", format!("expected a C×H×W map, got {s:?}")));
    };
    Ok((g.reshape(map, &[c, h * w])?, h, w))
}

/// `mask[q, h, w] = Σ_c Q[q, c] · F[c, h, w]`.
pub fn initial_mask(g: &mut Graph, queries: Var, fused: Var) -> Result<Var> {
    let (flat, h, w) = flatten_map(g, fused)?;
    let logits = g.matmul(queries, flat)?;
    let n_q = g.shape(logits)[0];
    g.reshape(logits, &[n_q, h, w])
}

/// Sigmoid-weighted spatial mean of `fused` under each query's mask.
pub fn mask_to_tokens(g: &mut Graph, mask_logits: Var, fused: Var) -> Result<Var> {
    let (flat, h, w) = flatten_map(g, fused)?;
    let ms = g.shape(mask_logits).to_vec();
    if ms.len() != 3 || ms[1] != h || ms[2] != w {
        return Err(TensorError::dim("mask_to_tokens", &ms, g.shape(fused)));
    }
    let m = g.reshape(mask_logits, &[ms[0], h * w])?;
    let weights = g.sigmoid(m);
    let pooled = g.matmul_t(weights, false, flat, true)?;
    let mass = g.sum_last_axis(weights);
    let mass = g.affine(mass, 1.0, TOKEN_EPS);
    let inv = g.powf(mass, -1.0);
    g.scale_rows(pooled, inv)
}

/// Single-head attention from `queries` to `tokens` with post-norm residual
/// and feed-forward blocks, followed by a fresh mask from the new queries.
pub fn attention_stage(
    g: &mut Graph,
    p: &Bound,
    params: &AttentionParams,
    queries: Var,
    tokens: Var,
    fused: Var,
) -> Result<AttentionOutput> {
    let d = g.shape(queries)[1];
    let q = g.matmul(queries, p.var(params.w_q))?;
    let k = g.matmul(tokens, p.var(params.w_k))?;
    let v = g.matmul(tokens, p.var(params.w_v))?;
    let scores = g.matmul_t(q, false, k, true)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax(scores, 1)?;
    let attended = g.matmul(weights, v)?;
    let attended = g.matmul(attended, p.var(params.w_o))?;
    let x = g.add(queries, attended)?;
    let x = params.ln_attn.forward(g, p, x)?;
    let hidden = params.ffn_in.forward(g, p, x)?;
    let hidden = g.relu(hidden);
    let ffn = params.ffn_out.forward(g, p, hidden)?;
    let x = g.add(x, ffn)?;
    let queries_out = params.ln_ffn.forward(g, p, x)?;
    let mask_logits = initial_mask(g, queries_out, fused)?;
    Ok(AttentionOutput {
        queries: queries_out,
        mask_logits,
        weights,
    })
}

/// Initial mask, internal attention, then external attention.
pub fn multi_layered_attention(
    g: &mut Graph,
    p: &Bound,
    stage: &StageParams,
    queries: Var,
    fused: Var,
) -> Result<LayeredOutput> {
    let m0 = initial_mask(g, queries, fused)?;
    let t0 = mask_to_tokens(g, m0, fused)?;
    let internal = attention_stage(g, p, &stage.internal, queries, t0, fused)?;
    let t1 = mask_to_tokens(g, internal.mask_logits, fused)?;
    let external = attention_stage(g, p, &stage.external, internal.queries, t1, fused)?;
    Ok(LayeredOutput {
        initial_mask_logits: m0,
        internal,
        external,
    })
}

/// Per-query attribute features pooled over all pyramid levels.
///
/// For level `i`, the previous mask is resized to the level, squashed to
/// weights and multiplied by the gate `σ(Q · F_i)`; the weighted map is
/// summed against `F_i` over all positions. Levels are averaged.
pub fn mlr_attribute_features(g: &mut Graph, p_prev: Var, levels: &[Var], queries: Var, stage: usize) -> Result<Var> {
    if !(1..=3).contains(&stage) {
        return Err(TensorError::contract(
            "mlr_attribute_features",
            format!("stage index {stage} is outside 1..=3"),
        ));
    }
    if levels.is_empty() {
        return Err(TensorError::contract("mlr_attribute_features", "no feature levels"));
    }
    let mut total: Option<Var> = None;
    for &level in levels {
        let (flat, h, w) = flatten_map(g, level)?;
        let resized = g.resize_bilinear(p_prev, h, w)?;
        let n_q = g.shape(resized)[0];
        let resized = g.reshape(resized, &[n_q, h * w])?;
        let weights = g.sigmoid(resized);
        let corr = g.matmul(queries, flat)?;
        let gate = g.sigmoid(corr);
        let wg = g.mul(weights, gate)?;
        let feat = g.matmul_t(wg, false, flat, true)?;
        total = Some(match total {
            Some(t) => g.add(t, feat)?,
            None => feat,
        });
    }
    let total = total.expect("at least one level");
    Ok(g.scale(total, 1.0 / levels.len() as f64))
}

pub fn predict_heads(g: &mut Graph, p: &Bound, stage: &StageParams, queries: Var, attr_features: Var) -> Result<(Var, Var)> {
    let class_logits = stage.cls_head.forward(g, p, queries)?;
    let attr_logits = stage.attr_head.forward(g, p, attr_features)?;
    Ok((class_logits, attr_logits))
}

#[cfg(test)]
#[path = "decoder_tests.rs"]
mod tests;
