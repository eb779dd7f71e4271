//! Two-stage forward pass: a dense transformer over a coarse volume and the
//! input views, a decoded feature volume, and a sparse residual transformer
//! over the informative fine tokens.

mod decode;
mod dense;
mod instance;
mod sparse;

pub use decode::{
    decode_feature_volume, decode_point, decode_sparse_volume, query_field, DecoderHeads,
    FeatureVolume, QueryMode, SparseVolume, UPSAMPLE,
};
pub use dense::{dense_block_forward, dense_stage_forward, DenseBlockWeights, StreamWeights};
pub use instance::{
    build_instance, stage_one, GeometrySource, InstanceOptions, RoutingMode, SparseInstance,
    StageOne,
};
pub use sparse::{
    sparse_block_forward, sparse_stage_forward, sparse_stage_forward_with, stream_step,
    LayerState, Routing, SelectionSet, SparseBlockWeights, SparseContext, SparseStreamWeights,
    StreamKv,
};
pub(crate) use sparse::injected;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::rng::SeedStream;
use crate::tensor::Linear;
use crate::tokenizer::{ImageEmbedWeights, PosEmbed, PATCH};

/// Model dimensions. [`ModelConfig::desk`] is what tests and examples run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub h_q: usize,
    pub h_kv: usize,
    pub hardware_faithful: bool,
    pub dense_depth: usize,
    pub sparse_depth: usize,
    /// Coarse volume token grid per axis.
    pub s_vol_d: usize,
    /// Coarse image token grid per axis; input views are `8 * s_img_d` pixels.
    pub s_img_d: usize,
    pub views: usize,
    pub d_f: usize,
    pub factor_vol: usize,
    pub factor_img: usize,
    pub decoder_hidden: usize,
    /// Appearance channels decoded per point (3 for colour).
    pub z_channels: usize,
    /// Width of provider features fused into image tokens.
    pub d_feat: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            d: 64,
            h_q: 8,
            h_kv: 1,
            hardware_faithful: false,
            dense_depth: 4,
            sparse_depth: 4,
            s_vol_d: 8,
            s_img_d: 16,
            views: 4,
            d_f: 32,
            factor_vol: 6,
            factor_img: 3,
            decoder_hidden: 32,
            z_channels: 3,
            d_feat: 16,
        }
    }

    pub fn full_scale() -> Self {
        ModelConfig {
            d: 1024,
            h_q: 32,
            h_kv: 2,
            hardware_faithful: true,
            dense_depth: 24,
            sparse_depth: 24,
            s_vol_d: 16,
            s_img_d: 32,
            views: 12,
            d_f: 32,
            factor_vol: 6,
            factor_img: 3,
            decoder_hidden: 64,
            z_channels: 3,
            d_feat: 1024,
        }
    }

    pub fn attention(&self) -> AttentionParams {
        AttentionParams {
            h_q: self.h_q,
            h_kv: self.h_kv,
            d_h: if self.h_q == 0 { 0 } else { self.d / self.h_q },
            d: self.d,
            hardware_faithful: self.hardware_faithful,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let p = self.attention();
        if self.h_q == 0 || self.d % self.h_q != 0 {
            return Err(crate::LsrmError::Config(format!(
                "d = {} is not divisible by h_q = {}",
                self.d, self.h_q
            )));
        }
        p.validate()?;
        for (name, v) in [
            ("s_vol_d", self.s_vol_d),
            ("s_img_d", self.s_img_d),
            ("views", self.views),
            ("d_f", self.d_f),
            ("factor_vol", self.factor_vol),
            ("factor_img", self.factor_img),
            ("decoder_hidden", self.decoder_hidden),
        ] {
            if v == 0 {
                return Err(crate::LsrmError::Config(format!("{name} must be positive")));
            }
        }
        if self.s_vol_d < 2 {
            return Err(crate::LsrmError::Config("s_vol_d must be at least 2".into()));
        }
        Ok(())
    }

    pub fn image_size(&self) -> u32 {
        (self.s_img_d * PATCH) as u32
    }

    pub fn s_vol(&self) -> usize {
        self.s_vol_d * self.factor_vol
    }

    pub fn s_img(&self) -> usize {
        self.s_img_d * self.factor_img
    }
}

/// Every parameter of both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub coarse_pe: PosEmbed,
    pub image_embed: ImageEmbedWeights,
    pub dense_blocks: Vec<DenseBlockWeights>,
    /// `d -> 64 * d_f`, shared by both stages.
    pub volume_decoder: Linear,
    pub heads: DecoderHeads,
    pub fine_vol_pe: PosEmbed,
    pub fine_img_pe: PosEmbed,
    pub sparse_blocks: Vec<SparseBlockWeights>,
}

impl Model {
    pub fn random(config: &ModelConfig, seed: u64) -> crate::Result<Self> {
        config.validate()?;
        let s = SeedStream::new(seed).child("model");
        let p = config.attention();
        let d = config.d;
        let dense_blocks: Vec<DenseBlockWeights> = (0..config.dense_depth)
            .map(|m| DenseBlockWeights::random(&p, &s.child("dense").index(m as u64)))
            .collect();
        let sparse_blocks = (0..config.sparse_depth)
            .map(|m| {
                let base = &dense_blocks[m.min(dense_blocks.len().saturating_sub(1))];
                let fallback;
                let base = if dense_blocks.is_empty() {
                    fallback = DenseBlockWeights::random(&p, &s.child("sparse_base").index(m as u64));
                    &fallback
                } else {
                    base
                };
                SparseBlockWeights::from_dense(base, &p, &s.child("sparse").index(m as u64))
            })
            .collect();
        Ok(Model {
            coarse_pe: PosEmbed::random(config.s_vol_d, d, &s.child("coarse_pe")),
            image_embed: ImageEmbedWeights::random(3, config.d_feat, d, &s.child("image_embed")),
            dense_blocks,
            volume_decoder: Linear::random(d, UPSAMPLE.pow(3) * config.d_f, &s.child("decoder")),
            heads: DecoderHeads::random(config.d_f, config.decoder_hidden, config.z_channels, &s.child("heads")),
            fine_vol_pe: PosEmbed::random(config.s_vol(), d, &s.child("fine_vol_pe")),
            fine_img_pe: PosEmbed::random(config.s_img(), d, &s.child("fine_img_pe")),
            sparse_blocks,
            config: config.clone(),
        })
    }

    /// Zero every Stage-2 transformer parameter (attention, gates, FFN,
    /// injections); norms keep unit gain.
    pub fn zero_sparse_weights(&mut self) {
        let p = self.config.attention();
        for b in &mut self.sparse_blocks {
            *b = SparseBlockWeights::zeros(&p);
        }
    }
}
