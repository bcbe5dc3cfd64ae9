//! The full network: encoder, decoder and their shared parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, StagePrediction};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid, QuerySet};
use crate::metrics::{detections_from_logits, Detection};
use crate::nn::{Bound, ParamStore};
use crate::synthdata::{K_ATTR, K_CLS};
use crate::tensor::{Graph, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub n_queries: usize,
    pub stages: usize,
    pub k_cls: usize,
    pub k_attr: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            n_queries: 20,
            stages: 3,
            k_cls: K_CLS,
            k_attr: K_ATTR,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::contract("ModelConfig", msg));
        if self.d == 0 || self.d % 2 != 0 {
            return bad(format!("d = {} must be even and positive", self.d));
        }
        if self.n_queries == 0 {
            return bad("n_queries must be positive".into());
        }
        if !matches!(self.stages, 1 | 3) {
            return bad(format!("stages = {} must be 1 or 3", self.stages));
        }
        if self.k_cls == 0 || self.k_attr == 0 {
            return bad("class and attribute counts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub pyramid: FeaturePyramid,
    pub queries: QuerySet,
    pub stages: Vec<StagePrediction>,
}

impl Model {
    /// Freshly initialised model; parameters are a pure function of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, EncoderConfig::new(config.d, config.n_queries), &mut rng)?;
        let decoder = Decoder::new(
            &mut params,
            DecoderConfig {
                d: config.d,
                k_cls: config.k_cls,
                k_attr: config.k_attr,
                stages: config.stages,
            },
            &mut rng,
        )?;
        Ok(Model {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, image: &Tensor) -> Result<ModelOutput> {
        let img = g.constant(image.clone());
        let (pyramid, queries) = self.encoder.forward(g, p, img)?;
        let stages = self.decoder.run(g, p, queries.combined, pyramid.fused, &pyramid.levels)?;
        Ok(ModelOutput {
            pyramid,
            queries,
            stages,
        })
    }

    /// Detections from the last stage at the image's resolution.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, image)?;
        let last = out.stages.last().expect("at least one stage");
        let hw = (image.shape()[1], image.shape()[2]);
        detections_from_logits(
            g.value(last.class_logits),
            g.value(last.mask_logits),
            g.value(last.attr_logits),
            hw,
        )
    }
}
