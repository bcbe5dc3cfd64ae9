//! Pyramid backbone, multi-level fusion and object-query generation.
//!
//! The backbone is a stack of stride-2 convolutions producing maps at
//! strides 4, 8, 16 and 32. Lateral 1×1 projections bring each to `d`
//! channels and a top-down pathway adds upsampled coarser levels into finer
//! ones. The fused map concatenates all four levels at stride 4 and projects
//! them back to `d` channels with a learned 1×1 convolution.

use rand::Rng;

use crate::nn::{normal, Bound, Conv, ParamId, ParamStore};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

pub const NUM_LEVELS: usize = 4;
/// Input height and width must be multiples of the coarsest stride.
pub const MAX_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d: usize,
    pub n_queries: usize,
    pub stem_width: usize,
    /// Backbone widths at strides 4, 8, 16, 32.
    pub widths: [usize; NUM_LEVELS],
}

impl EncoderConfig {
    pub fn new(d: usize, n_queries: usize) -> Self {
        EncoderConfig {
            d,
            n_queries,
            stem_width: 16,
            widths: [32, 64, 64, 64],
        }
    }
}

/// Per-scale features `F_1..F_4` (strides 4..32) and the fused stride-4 map.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub fused: Var,
}

/// Learned content queries plus their fixed positional embeddings.
#[derive(Debug, Clone, Copy)]
pub struct QuerySet {
    pub content: Var,
    pub positional: Var,
    /// `content + positional`.
    pub combined: Var,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    stem: Conv,
    down: [Conv; NUM_LEVELS],
    refine: Conv,
    pub laterals: [Conv; NUM_LEVELS],
    pub fuse: Conv,
    pub query_content: ParamId,
    positional: Tensor,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let positional = positional_encoding(config.n_queries, config.d)?;
        let d = config.d;
        let w = config.widths;
        let stem = Conv::new(store, "encoder.stem", (3, config.stem_width, 3), 2, rng);
        let ins = [config.stem_width, w[0], w[1], w[2]];
        let down = std::array::from_fn(|i| {
            Conv::new(store, &format!("encoder.down{}", i + 1), (ins[i], w[i], 3), 2, rng)
        });
        let refine = Conv::new(store, "encoder.refine1", (w[0], w[0], 3), 1, rng);
        let laterals = std::array::from_fn(|i| {
            Conv::new(store, &format!("encoder.lateral{}", i + 1), (w[i], d, 1), 1, rng)
        });
        let fuse = Conv::new(store, "encoder.fuse", (NUM_LEVELS * d, d, 1), 1, rng);
        let query_content = store.add("encoder.query_content", normal(&[config.n_queries, d], 0.02, rng));
        Ok(Encoder {
            config,
            stem,
            down,
            refine,
            laterals,
            fuse,
            query_content,
            positional,
        })
    }

    /// Backbone plus top-down pathway: `d`-channel maps at strides 4, 8, 16, 32.
    pub fn extract_pyramid(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Vec<Var>> {
        let shape = g.shape(image).to_vec();
        let [3, h, w] = shape[..] else {
            return Err(TensorError::contract(
                "extract_pyramid",
                format!("expected a 3×H×W image, got {shape:?}"),
            ));
        };
        if h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(TensorError::contract(
                "extract_pyramid",
                format!("image size {h}×{w} is not divisible by {MAX_STRIDE}; pad the image first"),
            ));
        }
        let mut x = self.stem.forward(g, p, image)?;
        x = g.relu(x);
        let mut bottom_up = Vec::with_capacity(NUM_LEVELS);
        for (i, conv) in self.down.iter().enumerate() {
            x = conv.forward(g, p, x)?;
            x = g.relu(x);
            if i == 0 {
                x = self.refine.forward(g, p, x)?;
                x = g.relu(x);
            }
            bottom_up.push(x);
        }
        let mut levels: Vec<Var> = Vec::with_capacity(NUM_LEVELS);
        let mut coarser: Option<Var> = None;
        for i in (0..NUM_LEVELS).rev() {
            let mut lat = self.laterals[i].forward(g, p, bottom_up[i])?;
            if let Some(c) = coarser {
                let (lh, lw) = (g.shape(lat)[1], g.shape(lat)[2]);
                let up = g.resize_bilinear(c, lh, lw)?;
                lat = g.add(lat, up)?;
            }
            levels.push(lat);
            coarser = Some(lat);
        }
        levels.reverse();
        Ok(levels)
    }

    /// Resizes every level to the stride-4 size, concatenates along channels
    /// and projects back to `d` channels.
    pub fn fuse_features(&self, g: &mut Graph, p: &Bound, levels: &[Var]) -> Result<Var> {
        if levels.len() != NUM_LEVELS {
            return Err(TensorError::contract(
                "fuse_features",
                format!("expected {NUM_LEVELS} levels, got {}", levels.len()),
            ));
        }
        let (h, w) = (g.shape(levels[0])[1], g.shape(levels[0])[2]);
        let mut aligned = Vec::with_capacity(NUM_LEVELS);
        for &lvl in levels {
            let s = g.shape(lvl);
            aligned.push(if s[1] == h && s[2] == w {
                lvl
            } else {
                g.resize_bilinear(lvl, h, w)?
            });
        }
        let cat = g.concat(&aligned)?;
        self.fuse.forward(g, p, cat)
    }

    pub fn make_queries(&self, g: &mut Graph, p: &Bound) -> Result<QuerySet> {
        let content = p.var(self.query_content);
        let positional = g.constant(self.positional.clone());
        let combined = g.add(content, positional)?;
        Ok(QuerySet {
            content,
            positional,
            combined,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<(FeaturePyramid, QuerySet)> {
        let levels = self.extract_pyramid(g, p, image)?;
        let fused = self.fuse_features(g, p, &levels)?;
        let queries = self.make_queries(g, p)?;
        Ok((FeaturePyramid { levels, fused }, queries))
    }
}

/// Sinusoidal encoding over the query index:
/// `pe[q, 2t] = sin(q / 10000^(2t/d))`, `pe[q, 2t+1] = cos(q / 10000^(2t/d))`.
pub fn positional_encoding(n_queries: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(TensorError::contract(
            "positional_encoding",
            format!("embedding width {d} must be even and positive"),
        ));
    }
    if n_queries == 0 {
        return Err(TensorError::contract("positional_encoding", "need at least one query"));
    }
    let mut pe = Tensor::zeros(&[n_queries, d]);
    for q in 0..n_queries {
        for t in 0..d / 2 {
            let freq = 10000f64.powf(2.0 * t as f64 / d as f64);
            let angle = q as f64 / freq;
            pe.set(&[q, 2 * t], angle.sin());
            pe.set(&[q, 2 * t + 1], angle.cos());
        }
    }
    Ok(pe)
}
