//! The full network: Y-branched backbone plus every projection head.
//!
//! All heads are registered regardless of the configured loss mode, so that
//! configurations which only differ in routing start from identical
//! parameters.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ClipMeta, EndpointSet};
use crate::error::{Error, Result};
use crate::heads::{ContextHead, GlobalHead, HeadsConfig, VanillaRegionHead};
use crate::nn::{global_avg_pool, Mlp, StatUpdate};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DENSE_HEAD: &str = "head.dense";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadsConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.heads.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub global: GlobalHead,
    pub vanilla: VanillaRegionHead,
    pub context: ContextHead,
    pub dense: Mlp,
}

impl Model {
    pub fn new(store: &mut ParamStore, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, config.backbone.clone())?;
        let c = config.backbone.out_channels();
        let global = GlobalHead::new(store, c, &config.heads)?;
        let vanilla = VanillaRegionHead::new(store, c, &config.heads)?;
        let context = ContextHead::new(store, c, &config.heads)?;
        let widths = [c, config.heads.vanilla_hidden, c];
        let dense = if config.heads.hidden_norm {
            Mlp::with_hidden_norm(store, DENSE_HEAD, &widths)?
        } else {
            Mlp::new(store, DENSE_HEAD, &widths)?
        };
        Ok(Model {
            config,
            backbone,
            global,
            vanilla,
            context,
            dense,
        })
    }

    /// Fresh parameter store with the model registered in it.
    pub fn build(config: ModelConfig, dtype: crate::DType, seed: u64) -> Result<(Model, ParamStore)> {
        let mut store = ParamStore::new(dtype, seed);
        let model = Model::new(&mut store, config)?;
        Ok((model, store))
    }

    pub fn channels(&self) -> usize {
        self.config.backbone.out_channels()
    }

    /// Stacks `[T, H, W, 3]` clips into one batch and runs the backbone.
    pub fn encode(
        &self,
        store: &ParamStore,
        clips: &[&Tensor],
        meta: &[ClipMeta],
        train: bool,
        stats: &mut Vec<StatUpdate>,
    ) -> Result<EndpointSet> {
        let first = clips.first().ok_or_else(|| Error::invalid("encode needs at least one clip"))?;
        let mut shape = vec![clips.len()];
        shape.extend_from_slice(first.shape());
        let parts: Vec<Tensor> = clips
            .iter()
            .map(|c| c.reshape(&[1, c.numel()]))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        let batch = Tensor::concat(&refs, 0)?.reshape(&shape)?;
        self.backbone.forward(store, &batch, meta, train, stats)
    }

    /// Unit-norm global embeddings `[N, out]` from `C5_g`.
    pub fn global_embedding(&self, store: &ParamStore, c5_g: &Tensor, train: bool, stats: &mut Vec<StatUpdate>) -> Result<Tensor> {
        self.global.forward_mode(store, &global_avg_pool(c5_g)?, train, stats)
    }
}
