#![allow(dead_code)]

use lsrm::pipeline::{build_instance, stage_one, InstanceOptions, Model, ModelConfig, RoutingMode, SparseInstance};
use lsrm::scene::{Scene, SceneFile};
use lsrm::tokenizer::ZeroFeatures;

/// Small enough for a few hundred fine tokens per modality.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d: 32,
        h_q: 4,
        h_kv: 1,
        dense_depth: 2,
        sparse_depth: 2,
        s_vol_d: 4,
        s_img_d: 8,
        views: 3,
        decoder_hidden: 16,
        d_feat: 8,
        ..ModelConfig::desk()
    }
}

pub fn tiny_scene(views: usize) -> Scene {
    SceneFile::preset("small_sphere", views).build().unwrap()
}

pub fn tiny_instance(seed: u64, routing: RoutingMode) -> (Model, SparseInstance) {
    let cfg = tiny_config();
    let model = Model::random(&cfg, seed).unwrap();
    let scene = tiny_scene(cfg.views);
    let s1 = stage_one(&model, &scene, &ZeroFeatures { dim: cfg.d_feat }).unwrap();
    let opts = InstanceOptions {
        routing,
        ..InstanceOptions::default()
    };
    let inst = build_instance(&model, &scene, &s1, &opts).unwrap();
    (model, inst)
}
